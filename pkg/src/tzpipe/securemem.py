"""Contiguous secure memory: CMA page model, TZASC windows, extend/shrink.

The parameter region grows in the order parameters are first used and shrinks
from its end, so the resident parameter groups always form a topological
prefix and the protected window stays a single contiguous run.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple, Protocol

import numpy as np

from .hardware import GB, PAGE_SIZE, HardwareModel, transfer_us

MAX_TZASC_REGIONS = 8


class SecureMemoryError(Exception):
    pass


class OutOfRegion(SecureMemoryError):
    pass


class ContiguityViolation(SecureMemoryError):
    """The CMA reply is not adjacent to the already allocated window."""


class ProtectOverrun(SecureMemoryError):
    pass


class FiloViolation(SecureMemoryError):
    pass


class AccessFault(SecureMemoryError):
    """A non-secure access hit a protected window."""


class RegionLimitExceeded(SecureMemoryError):
    pass


class SanitizationError(SecureMemoryError):
    """Sensitive bytes were about to be returned to the REE."""


class PageState(IntEnum):
    FREE = 0
    MOVABLE = 1
    TEE = 2


def pages_for(nbytes: int, page_size: int = PAGE_SIZE) -> int:
    return -(-nbytes // page_size)


def page_align(nbytes: int, page_size: int = PAGE_SIZE) -> int:
    return pages_for(nbytes, page_size) * page_size


@dataclass
class CmaRegion:
    base_address: int
    page_count: int
    page_states: np.ndarray
    page_size: int = PAGE_SIZE
    tee_pages: int = 0
    # pages holding TEE secrets; must be clear before a page goes back to the REE
    dirty: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.base_address % self.page_size:
            raise ValueError("CMA base must be page aligned")
        if self.dirty is None:
            self.dirty = np.zeros(self.page_count, dtype=bool)

    @classmethod
    def create(cls, size_bytes: int, base_address: int, occupancy: float = 0.0,
               seed: int = 0, page_size: int = PAGE_SIZE) -> "CmaRegion":
        n = size_bytes // page_size
        states = np.zeros(n, dtype=np.int8)
        if occupancy >= 1.0:
            states[:] = PageState.MOVABLE
        elif occupancy > 0.0:
            rng = np.random.default_rng(seed)
            states[rng.random(n) < occupancy] = PageState.MOVABLE
        return cls(base_address, n, states, page_size)

    @property
    def pressure(self) -> float:
        return float(np.count_nonzero(self.page_states == PageState.MOVABLE)) / self.page_count

    @property
    def end_address(self) -> int:
        return self.base_address + self.page_count * self.page_size

    def copy(self) -> "CmaRegion":
        return CmaRegion(self.base_address, self.page_count, self.page_states.copy(),
                         self.page_size, self.tee_pages, self.dirty.copy())

    def allocate(self, nbytes: int, throughput: float) -> tuple[int, float]:
        """Claim the pages right after the TEE prefix, migrating movable ones."""
        n = pages_for(nbytes, self.page_size)
        start = self.tee_pages
        if n <= 0 or start + n > self.page_count:
            raise OutOfRegion(f"cannot allocate {nbytes} bytes: {self.page_count - start} pages left")
        span = self.page_states[start:start + n]
        moved = int(np.count_nonzero(span == PageState.MOVABLE))
        span[:] = PageState.TEE
        self.tee_pages = start + n
        return self.base_address + start * self.page_size, transfer_us(moved * self.page_size, throughput)

    def release(self, address: int, nbytes: int) -> None:
        n = pages_for(nbytes, self.page_size)
        start = (address - self.base_address) // self.page_size
        if start + n != self.tee_pages or address % self.page_size:
            raise FiloViolation("CMA pages must be released from the end of the TEE prefix")
        if self.dirty[start:start + n].any():
            raise SanitizationError("releasing pages that still hold sensitive data")
        self.page_states[start:start + n] = PageState.FREE
        self.tee_pages = start

    def prefix_ok(self) -> bool:
        tee = self.page_states == PageState.TEE
        return bool(tee[:self.tee_pages].all() and not tee[self.tee_pages:].any())


def cma_allocate(cma: CmaRegion, nbytes: int, threads: int = 1,
                 hw: HardwareModel | None = None) -> tuple[int, float]:
    """Allocate from `cma`; returns (address, migration cost in µs)."""
    hw = hw or HardwareModel()
    return cma.allocate(nbytes, hw.migration_throughput(threads))


class CmaReply(NamedTuple):
    address: int
    migration_cost: float


class CmaDriver(Protocol):
    """The REE-side allocator as seen from the TEE. Replies are untrusted."""

    region: CmaRegion

    def allocate(self, nbytes: int) -> CmaReply: ...

    def release(self, address: int, nbytes: int) -> None: ...


class HonestCma:
    def __init__(self, region: CmaRegion, hw: HardwareModel | None = None, threads: int | None = None):
        self.region = region
        self.hw = hw or HardwareModel()
        self.threads = self.hw.cma_threads if threads is None else threads

    def allocate(self, nbytes: int) -> CmaReply:
        return CmaReply(*cma_allocate(self.region, nbytes, self.threads, self.hw))

    def release(self, address: int, nbytes: int) -> None:
        self.region.release(address, nbytes)


class AdversarialCma(HonestCma):
    """Replies with ``base + reply_offset(request_no)`` when that returns a value.

    A lying reply is not backed by a real allocation.
    """

    def __init__(self, region: CmaRegion, reply_offset, hw: HardwareModel | None = None):
        super().__init__(region, hw)
        self.reply_offset = reply_offset
        self.requests = 0

    def allocate(self, nbytes: int) -> CmaReply:
        offset = self.reply_offset(self.requests)
        self.requests += 1
        if offset is None:
            return super().allocate(nbytes)
        return CmaReply(self.region.base_address + offset, 0.0)


@dataclass
class TzascRegion:
    base_address: int
    purpose: str  # "Parameters" | "Working" | "JobContext"
    allocated_watermark: int = 0
    protected_watermark: int = 0

    @property
    def protected_end(self) -> int:
        return self.base_address + self.protected_watermark

    def protects(self, address: int, nbytes: int = 1) -> bool:
        return address < self.protected_end and address + nbytes > self.base_address


class TzascController:
    """At most eight protected windows system-wide."""

    def __init__(self):
        self.regions: list[TzascRegion] = []

    def add(self, base_address: int, purpose: str) -> TzascRegion:
        if len(self.regions) >= MAX_TZASC_REGIONS:
            raise RegionLimitExceeded(f"TZASC supports {MAX_TZASC_REGIONS} regions")
        region = TzascRegion(base_address, purpose)
        self.regions.append(region)
        return region

    def protected(self, address: int, nbytes: int = 1) -> bool:
        return any(r.protects(address, nbytes) for r in self.regions)


@dataclass
class SecureMemoryState:
    tzasc: TzascController
    param_region: TzascRegion
    working_region: TzascRegion
    drivers: dict  # purpose -> CmaDriver
    group_extents: list = field(default_factory=list)  # (group, offset, nbytes)
    kv_bytes: int = 0
    fixed_bytes: int = 0
    validate_contiguity: bool = True
    trace: list = field(default_factory=list)
    zero_filled: list = field(default_factory=list)  # (purpose, offset, nbytes)
    last_migration_cost: float = 0.0

    @classmethod
    def create(cls, hw: HardwareModel | None = None, param_capacity: int = 12 * GB,
               working_capacity: int = 2 * GB, occupancy: float = 0.0, seed: int = 0,
               param_base: int = 0x8000_0000) -> "SecureMemoryState":
        hw = hw or HardwareModel()
        param_capacity = page_align(param_capacity)
        working_base = param_base + param_capacity
        param_cma = CmaRegion.create(param_capacity, param_base, occupancy, seed)
        working_cma = CmaRegion.create(page_align(working_capacity), working_base, 0.0, seed)
        tzasc = TzascController()
        return cls(
            tzasc=tzasc,
            param_region=tzasc.add(param_base, "Parameters"),
            working_region=tzasc.add(working_base, "Working"),
            drivers={"Parameters": HonestCma(param_cma, hw), "Working": HonestCma(working_cma, hw)},
        )

    def copy(self) -> "SecureMemoryState":
        return copy.deepcopy(self)

    def driver(self, region: TzascRegion) -> CmaDriver:
        return self.drivers[region.purpose]

    def resident_groups(self) -> list[int]:
        return [g for g, _, _ in self.group_extents]

    def resident_bytes(self) -> int:
        return sum(n for _, _, n in self.group_extents)

    def _log(self, op: str, region: TzascRegion, nbytes: int, cost: float = 0.0) -> None:
        self.trace.append({
            "operation": op, "region": region.purpose, "bytes": nbytes,
            "allocated": region.allocated_watermark, "protected": region.protected_watermark,
            "migration_cost_us": cost,
        })

    def register_group(self, group: int, offset: int, nbytes: int) -> None:
        expected = self.group_extents[-1][0] + 1 if self.group_extents else 0
        if group != expected:
            raise FiloViolation(f"group {group} resident out of order (expected {expected})")
        if self.group_extents:
            _, o, n = self.group_extents[-1]
            if offset != page_align(o + n):
                raise FiloViolation(f"group {group} extent at {offset} is not adjacent")
        if offset + nbytes > self.param_region.allocated_watermark:
            raise FiloViolation(f"group {group} extent exceeds the allocated window")
        self.group_extents.append((group, offset, nbytes))

    def mark_sensitive(self, region: TzascRegion, offset: int, nbytes: int) -> None:
        """Plaintext written by the TEE; only legal inside the protected window."""
        if offset < 0 or offset + nbytes > region.protected_watermark:
            raise AccessFault("plaintext write outside the protected window")
        cma = self.driver(region).region
        start = region.base_address + offset - cma.base_address
        cma.dirty[start // cma.page_size:pages_for(start + nbytes, cma.page_size)] = True


def extend_allocated(state: SecureMemoryState, region: TzascRegion, nbytes: int,
                     cma: CmaDriver | None = None) -> int:
    """Grow the allocated (not yet protected) window; returns the new block's address."""
    cma = cma or state.driver(region)
    nbytes = page_align(nbytes)
    expected = region.base_address + region.allocated_watermark
    reply = cma.allocate(nbytes)
    if reply.address != expected and state.validate_contiguity:
        raise ContiguityViolation(f"CMA returned {reply.address:#x}, expected {expected:#x}")
    region.allocated_watermark += nbytes
    state.last_migration_cost = reply.migration_cost
    state._log("extend_allocated", region, nbytes, reply.migration_cost)
    return reply.address


def extend_protected(state: SecureMemoryState, region: TzascRegion, nbytes: int) -> None:
    nbytes = page_align(nbytes)
    if region.protected_watermark + nbytes > region.allocated_watermark:
        raise ProtectOverrun(
            f"protect {nbytes} past allocated watermark {region.allocated_watermark}")
    region.protected_watermark += nbytes
    state._log("extend_protected", region, nbytes)


def protect_through(state: SecureMemoryState, region: TzascRegion, end_offset: int) -> None:
    """Extend protection so that [base, base + end_offset) is secure."""
    end = page_align(end_offset)
    if end > region.protected_watermark:
        extend_protected(state, region, end - region.protected_watermark)


def shrink(state: SecureMemoryState, region: TzascRegion, nbytes: int,
           cma: CmaDriver | None = None) -> None:
    """Release `nbytes` from the end of the region, zero-filling them first."""
    cma = cma or state.driver(region)
    nbytes = page_align(nbytes)
    if nbytes > region.allocated_watermark:
        raise FiloViolation(f"shrink {nbytes} exceeds allocated {region.allocated_watermark}")
    new_end = region.allocated_watermark - nbytes
    if region is state.param_region:
        for g, off, n in state.group_extents:
            if off < new_end < off + n:
                raise FiloViolation(f"shrink would cut group {g} in half")
        # reverse topological order: later groups go first
        while state.group_extents and state.group_extents[-1][1] >= new_end:
            state.group_extents.pop()
    driver_region = cma.region
    first = (region.base_address + new_end - driver_region.base_address) // driver_region.page_size
    driver_region.dirty[first:first + nbytes // driver_region.page_size] = False
    state.zero_filled.append((region.purpose, new_end, nbytes))
    region.protected_watermark = min(region.protected_watermark, new_end)
    region.allocated_watermark = new_end
    if nbytes:
        cma.release(region.base_address + new_end, nbytes)
    state._log("shrink", region, nbytes)


def release_groups(state: SecureMemoryState, groups: list[int], cma: CmaDriver | None = None) -> None:
    """Release whole parameter groups; they must be the newest, newest first."""
    resident = state.resident_groups()
    k = len(groups)
    if k == 0:
        return
    if list(groups) != resident[::-1][:k]:
        raise FiloViolation(f"release order {groups} violates FILO over resident {resident}")
    start = [off for g, off, _ in state.group_extents if g == groups[-1]][0]
    shrink(state, state.param_region, state.param_region.allocated_watermark - start, cma)


def plan_cache(state: SecureMemoryState, pressure_signal: int) -> list[int]:
    """Smallest newest-first suffix of resident groups covering `pressure_signal` bytes."""
    plan: list[int] = []
    freed = 0
    for g, _, n in reversed(state.group_extents):
        if freed >= pressure_signal:
            break
        plan.append(g)
        freed += n
    return plan


def ree_read(state: SecureMemoryState, address: int, nbytes: int = 1) -> bool:
    """Non-secure CPU access: faults on any protected byte."""
    if state.tzasc.protected(address, nbytes):
        raise AccessFault(f"non-secure read at {address:#x} hits a protected window")
    return True


def install_cached_groups(state: SecureMemoryState, sizes: list[int]) -> None:
    """Make groups 0..k-1 resident, as left behind by a previous inference."""
    region = state.param_region
    for g, nbytes in enumerate(sizes):
        offset = region.allocated_watermark
        extend_allocated(state, region, nbytes)
        extend_protected(state, region, nbytes)
        state.register_group(g, offset, nbytes)
        state.mark_sensitive(region, offset, nbytes)


def working_region_lifecycle(state: SecureMemoryState, prompt_tokens: int, generated_tokens: int,
                             kv_bytes_per_token: int, fixed_bytes: int) -> list[tuple[str, int]]:
    """Run one inference's working-region calls; returns them in order."""
    region = state.working_region
    calls: list[tuple[str, int]] = []

    def grow(n: int) -> None:
        extend_allocated(state, region, n)
        calls.append(("extend_allocated", page_align(n)))
        extend_protected(state, region, n)
        calls.append(("extend_protected", page_align(n)))

    grow(fixed_bytes)
    state.fixed_bytes = fixed_bytes
    state.kv_bytes = prompt_tokens * kv_bytes_per_token
    if state.kv_bytes:
        grow(state.kv_bytes)
    for _ in range(generated_tokens):
        grow(kv_bytes_per_token)
        state.kv_bytes += kv_bytes_per_token
    total = region.allocated_watermark
    shrink(state, region, total)
    calls.append(("shrink", total))
    state.kv_bytes = 0
    state.fixed_bytes = 0
    return calls

