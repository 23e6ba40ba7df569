"""Co-driver model of TEE/REE NPU time-sharing.

The REE driver keeps the control plane (a unified job queue holding normal
jobs and shadow placeholders); the TEE driver owns the data plane of secure
jobs. When a shadow job is dispatched, the TEE driver takes the NPU over,
verifies the paired job and launches it. The REE is untrusted: it can drop,
reorder, duplicate or fabricate dispatches, so all checks live TEE-side.

`attack_explore` enumerates adversarial interleavings against the same
verification and switch-ordering rules used by the runtime classes.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Iterable

from .hardware import MIB


class CodriverError(Exception):
    pass


class ContextOverflow(CodriverError):
    pass


class InvalidState(CodriverError):
    pass


class LaunchRejected(CodriverError):
    """Base of the launch verification failures."""


class ReplayDetected(LaunchRejected):
    pass


class ReorderDetected(LaunchRejected):
    pass


class UnauthorizedJob(LaunchRejected):
    pass


class BadContextAddress(LaunchRejected):
    pass


class MmioFault(CodriverError):
    """Non-secure MMIO access to a device marked secure."""


class JobState(str, Enum):
    Created = "Created"
    Initialized = "Initialized"
    Issued = "Issued"
    Launched = "Launched"
    Complete = "Complete"
    Rejected = "Rejected"


class DeviceMode(str, Enum):
    NonSecureIdle = "NonSecureIdle"
    NonSecureBusy = "NonSecureBusy"
    SecureIdle = "SecureIdle"
    SecureBusy = "SecureBusy"


@dataclass(frozen=True)
class Defenses:
    state_check: bool = True
    seq_check: bool = True
    switch_ordering: bool = True
    contiguity_validation: bool = True
    load_checksum: bool = True

    @classmethod
    def without(cls, *names: str) -> "Defenses":
        known = {f.name for f in fields(cls)}
        for name in names:
            if name not in known:
                raise ValueError(f"unknown defense {name!r}; expected one of {', '.join(sorted(known))}")
        return cls(**{n: False for n in names})


DEFENSE_NAMES = tuple(f.name for f in fields(Defenses))


# Shared rules ------------------------------------------------------------------

TAKE_OVER_STEPS = ("secure_mmio_irq", "wait_nonsecure_idle", "grant_secure_memory")
TAKE_OVER_STEPS_TZASC_FIRST = ("grant_secure_memory", "wait_nonsecure_idle", "secure_mmio_irq")
RELEASE_STEPS = ("revoke_secure_memory", "restore_mmio_irq")
RELEASE_STEPS_SWAPPED = ("restore_mmio_irq", "revoke_secure_memory")


def take_over_steps(defenses: Defenses) -> tuple:
    return TAKE_OVER_STEPS if defenses.switch_ordering else TAKE_OVER_STEPS_TZASC_FIRST


def release_steps(defenses: Defenses) -> tuple:
    return RELEASE_STEPS if defenses.switch_ordering else RELEASE_STEPS_SWAPPED


def verify_launch(state: JobState | None, job_seq: int | None, claimed_seq: int,
                  next_execute: int, defenses: Defenses = Defenses()) -> None:
    """Raise the violated check, if any, for launching a dispatched job.

    `state` is None for a job id the TEE never created. The state check binds
    the dispatch to a job that is issued and not yet run; the sequence check
    requires dispatches to arrive in issue order.
    """
    if state is None:
        raise UnauthorizedJob("dispatch names a job the TEE never created")
    if defenses.state_check:
        if state in (JobState.Launched, JobState.Complete):
            raise ReplayDetected(f"job already {state.value}")
        if state != JobState.Issued:
            raise UnauthorizedJob(f"job is {state.value}, not Issued")
        if job_seq != claimed_seq:
            raise UnauthorizedJob(f"shadow carries seq {claimed_seq}, job was issued as {job_seq}")
    if defenses.seq_check and claimed_seq != next_execute:
        raise ReorderDetected(f"seq {claimed_seq} dispatched, expected {next_execute}")


def validate_contiguity(reply: int, expected: int, defenses: Defenses = Defenses()) -> bool:
    return reply == expected or not defenses.contiguity_validation


# Runtime model -------------------------------------------------------------------

@dataclass
class TzRegisters:
    npu_mmio_secure: bool = False
    npu_irq_to_tee: bool = False
    npu_may_access_secure: bool = False
    # (base, size) windows the NPU may reach while granted
    dma_allowlist: tuple = ()

    def snapshot(self) -> tuple:
        return (self.npu_mmio_secure, self.npu_irq_to_tee, self.npu_may_access_secure)


@dataclass
class NpuJob:
    job_id: int
    origin: str  # "TEE" | "REE"
    state: JobState = JobState.Created
    seq: int | None = None
    context_addr: int | None = None
    context_bytes: int = 0
    # command stream, I/O page table and in/out buffers referenced by the context
    addresses: tuple = ()
    launches: int = 0


@dataclass(frozen=True)
class ShadowJob:
    shadow_id: int
    job_id: int
    seq: int | None


@dataclass
class SeqCounter:
    next_issue: int = 0
    next_execute: int = 0


@dataclass
class NpuDevice:
    mode: DeviceMode = DeviceMode.NonSecureIdle
    current_job: int | None = None
    current_origin: str | None = None
    dma_trace: list = field(default_factory=list)  # (address, secure_memory, origin)


def _in_windows(address: int, windows: Iterable) -> bool:
    return any(base <= address < base + size for base, size in windows)


class CoDriverSystem:
    """TEE driver, REE driver, NPU device and TrustZone registers on one clock."""

    def __init__(self, context_window: tuple = (0x1_0000_0000, 64 * MIB),
                 other_windows: tuple = (), defenses: Defenses = Defenses(),
                 switch_cost_us: float = 0.0):
        self.regs = TzRegisters(dma_allowlist=(context_window,) + tuple(other_windows))
        self.device = NpuDevice()
        self.counter = SeqCounter()
        self.defenses = defenses
        self.window = context_window
        self._ctx_used = 0
        self.jobs: dict[int, NpuJob] = {}
        self.queue: deque = deque()
        self.trace: list = []
        self.switch_cost_us = switch_cost_us
        self.switch_time_us = 0.0
        self.world_switches = 0
        self._next_job = 0
        self._next_shadow = 0
        self._pending_ree: dict[int, NpuJob] = {}
        self._current_shadow: ShadowJob | None = None

    # bookkeeping
    def _log(self, event: str, **info) -> None:
        self.trace.append({"step": len(self.trace), "event": event, "regs": self.regs.snapshot(),
                           "mode": self.device.mode.value, **info})

    def _secure_windows(self) -> tuple:
        return self.regs.dma_allowlist

    # TEE data plane
    def tee_init_job(self, context_bytes: int, addresses: tuple | None = None) -> NpuJob:
        base, size = self.window
        if context_bytes <= 0 or self._ctx_used + context_bytes > size:
            raise ContextOverflow(f"job context of {context_bytes} bytes does not fit the window")
        job = NpuJob(self._next_job, "TEE", JobState.Initialized,
                     context_addr=base + self._ctx_used, context_bytes=context_bytes)
        job.addresses = tuple(addresses) if addresses is not None else (job.context_addr,)
        self._ctx_used += context_bytes
        self._next_job += 1
        self.jobs[job.job_id] = job
        self._log("tee_init_job", job=job.job_id)
        return job

    def tee_issue_job(self, job: NpuJob) -> ShadowJob:
        if job.state != JobState.Initialized:
            raise InvalidState(f"job {job.job_id} is {job.state.value}, expected Initialized")
        job.state = JobState.Issued
        job.seq = self.counter.next_issue
        self.counter.next_issue += 1
        shadow = ShadowJob(self._next_shadow, job.job_id, job.seq)
        self._next_shadow += 1
        self.queue.append(shadow)
        self._log("tee_issue_job", job=job.job_id, seq=job.seq)
        return shadow

    def tee_take_over(self) -> None:
        for step in take_over_steps(self.defenses):
            if step == "secure_mmio_irq":
                self.regs.npu_mmio_secure = True
                self.regs.npu_irq_to_tee = True
            elif step == "wait_nonsecure_idle":
                if self.device.mode == DeviceMode.NonSecureBusy:
                    self._complete_nonsecure()
            else:
                self.regs.npu_may_access_secure = True
            self._log(step)
        self.device.mode = DeviceMode.SecureIdle
        self.world_switches += 1
        self.switch_time_us += self.switch_cost_us

    def tee_launch_verified(self, shadow: ShadowJob) -> NpuJob:
        if self.device.mode != DeviceMode.SecureIdle:
            raise InvalidState(f"launch needs SecureIdle, device is {self.device.mode.value}")
        job = self.jobs.get(shadow.job_id)
        try:
            verify_launch(job.state if job else None, job.seq if job else None,
                          shadow.seq, self.counter.next_execute, self.defenses)
            bad = [a for a in job.addresses if not _in_windows(a, self._secure_windows())]
            if bad:
                raise BadContextAddress(f"context references {bad[0]:#x} outside allowed windows")
        except LaunchRejected as exc:
            if job is not None:
                job.state = JobState.Rejected
            self._log("launch_rejected", job=shadow.job_id, reason=type(exc).__name__)
            self.tee_release()
            raise
        job.state = JobState.Launched
        job.launches += 1
        self.counter.next_execute += 1
        self.device.mode = DeviceMode.SecureBusy
        self.device.current_job, self.device.current_origin = job.job_id, "TEE"
        for a in job.addresses:
            self._dma(a, "TEE")
        self._current_shadow = shadow
        self._log("launch", job=job.job_id, seq=job.seq)
        return job

    def secure_interrupt(self) -> bool:
        """Completion interrupt of the running secure job. Spurious ones are dropped."""
        if self.device.mode != DeviceMode.SecureBusy or not self.regs.npu_irq_to_tee:
            self._log("spurious_interrupt_dropped")
            return False
        job = self.jobs[self.device.current_job]
        job.state = JobState.Complete
        self.device.current_job = self.device.current_origin = None
        self.device.mode = DeviceMode.SecureIdle
        self._log("secure_complete", job=job.job_id)
        self.tee_release()
        return True

    def tee_release(self) -> None:
        for step in release_steps(self.defenses):
            if step == "revoke_secure_memory":
                self.regs.npu_may_access_secure = False
            else:
                self.regs.npu_mmio_secure = False
                self.regs.npu_irq_to_tee = False
            self._log(step)
        self.device.mode = DeviceMode.NonSecureIdle
        self.world_switches += 1
        self.switch_time_us += self.switch_cost_us
        if self._current_shadow is not None:
            self._log("shadow_complete", shadow=self._current_shadow.shadow_id)
            self._current_shadow = None

    # REE side
    def ree_submit(self, addresses: tuple = ()) -> NpuJob:
        job = NpuJob(self._next_job, "REE", JobState.Issued, addresses=tuple(addresses))
        self._next_job += 1
        self._pending_ree[job.job_id] = job
        self.queue.append(job)
        return job

    def ree_mmio_launch(self, job: NpuJob) -> None:
        if self.regs.npu_mmio_secure:
            self._log("mmio_fault", job=job.job_id)
            raise MmioFault("NPU MMIO is secure")
        if self.device.mode != DeviceMode.NonSecureIdle:
            raise InvalidState("NPU busy")
        job.state = JobState.Launched
        self.device.mode = DeviceMode.NonSecureBusy
        self.device.current_job, self.device.current_origin = job.job_id, "REE"
        for a in job.addresses:
            self._dma(a, "REE")
        self._log("ree_launch", job=job.job_id)

    def ree_complete(self) -> None:
        if self.device.mode == DeviceMode.NonSecureBusy:
            self._complete_nonsecure()

    def _complete_nonsecure(self) -> None:
        job = self._pending_ree.pop(self.device.current_job)
        job.state = JobState.Complete
        self.device.current_job = self.device.current_origin = None
        self.device.mode = (DeviceMode.SecureIdle if self.regs.npu_may_access_secure
                            else DeviceMode.NonSecureIdle)
        self._log("ree_complete", job=job.job_id)

    def _dma(self, address: int, origin: str) -> None:
        secure = _in_windows(address, self._secure_windows())
        self.device.dma_trace.append((address, secure, origin))

    def ree_schedule_next(self) -> str | None:
        """Honest REE scheduler: dispatch the queue head."""
        if not self.queue:
            return None
        item = self.queue.popleft()
        if isinstance(item, ShadowJob):
            self.dispatch_shadow(item)
            return "shadow"
        self.ree_mmio_launch(item)
        return "ree"

    def dispatch_shadow(self, shadow: ShadowJob) -> NpuJob:
        """REE hands the NPU to the TEE for `shadow` (any content the REE likes)."""
        if self.device.mode == DeviceMode.SecureBusy:
            raise InvalidState("a secure job is running")
        self.tee_take_over()
        return self.tee_launch_verified(shadow)

    def run_secure_job(self, context_bytes: int = 4096) -> NpuJob:
        """TA-side convenience: init, issue, let the REE dispatch, complete."""
        job = self.tee_init_job(context_bytes)
        self.tee_issue_job(job)
        while self.queue:
            kind = self.ree_schedule_next()
            if kind == "ree":
                self.ree_complete()
            elif kind == "shadow":
                self.secure_interrupt()
            if job.state == JobState.Complete:
                break
        self._ctx_used -= context_bytes  # context freed once the job completes
        return job


def register_invariant_holds(trace: list) -> bool:
    """Grant implies secure MMIO and no non-secure job in flight, at every step."""
    for rec in trace:
        mmio, _, grant = rec["regs"]
        if grant and (not mmio or rec["mode"] == DeviceMode.NonSecureBusy.value):
            return False
    return True


def dma_audit(device: NpuDevice) -> bool:
    """No REE-originated DMA reached secure memory."""
    return not any(secure and origin == "REE" for _, secure, origin in device.dma_trace)


# Exhaustive exploration -------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    predicate: str  # S1..S4
    component: str
    steps: tuple

    def to_text(self) -> str:
        return json.dumps({"predicate": self.predicate, "component": self.component,
                           "length": len(self.steps), "steps": list(self.steps)}, sort_keys=True)


_S = JobState
MAX_TEE_JOBS, MAX_REE_JOBS = 3, 2


@dataclass(frozen=True)
class _NpuState:
    inited: int = 0
    jobs: tuple = ()  # (state, seq) per created TEE job
    next_issue: int = 0
    next_execute: int = 0
    legit: int = 0  # launches a reference monitor accepts, in order
    regs: tuple = (False, False, False)  # mmio_secure, irq_to_tee, grant
    running: tuple | None = None  # ("ree", j) | ("tee", i)
    ree_done: tuple = (False,) * MAX_REE_JOBS
    phase: tuple | None = None  # ("take", step, job, claimed) | ("verify", job, claimed) | ("rel", step)
    bad_launch: bool = False


def _npu_successors(s: _NpuState, d: Defenses, tee_jobs: int, ree_jobs: int):
    mmio, irq, grant = s.regs
    if s.inited < tee_jobs:
        yield "ta_init", replace(s, inited=s.inited + 1, jobs=s.jobs + ((_S.Initialized, None),))
    for i, (st, _) in enumerate(s.jobs):
        if st == _S.Initialized:
            jobs = list(s.jobs)
            jobs[i] = (_S.Issued, s.next_issue)
            yield f"ta_issue({i})", replace(s, jobs=tuple(jobs), next_issue=s.next_issue + 1)
            break
    if s.running is None and not mmio:
        for j in range(ree_jobs):
            started = s.ree_done[j] or s.running == ("ree", j)
            if not started:
                yield f"ree_launch({j})", replace(s, running=("ree", j))
    if s.running and s.running[0] == "ree":
        done = list(s.ree_done)
        done[s.running[1]] = True
        yield "ree_complete", replace(s, running=None, ree_done=tuple(done))
    if s.phase is None and not (s.running and s.running[0] == "tee"):
        for i in range(tee_jobs + 1):  # the last id is never created: fabricated
            for claimed in range(tee_jobs):
                yield f"dispatch(job={i},seq={claimed})", replace(s, phase=("take", 0, i, claimed))
    if s.phase is not None:
        yield from _npu_tee_step(s, d)
    if s.running and s.running[0] == "tee" and irq:
        i = s.running[1]
        jobs = list(s.jobs)
        jobs[i] = (_S.Complete, jobs[i][1])
        yield "secure_interrupt", replace(s, jobs=tuple(jobs), running=None, phase=("rel", 0))


def _npu_tee_step(s: _NpuState, d: Defenses):
    mmio, irq, grant = s.regs
    kind = s.phase[0]
    if kind == "take":
        _, k, i, claimed = s.phase
        step = take_over_steps(d)[k]
        nxt = ("take", k + 1, i, claimed) if k + 1 < len(TAKE_OVER_STEPS) else ("verify", i, claimed)
        if step == "secure_mmio_irq":
            yield f"tee:{step}", replace(s, regs=(True, True, grant), phase=nxt)
        elif step == "grant_secure_memory":
            yield f"tee:{step}", replace(s, regs=(mmio, irq, True), phase=nxt)
        elif not (s.running and s.running[0] == "ree"):
            yield f"tee:{step}", replace(s, phase=nxt)
    elif kind == "verify":
        _, i, claimed = s.phase
        st, seq = s.jobs[i] if i < len(s.jobs) else (None, None)
        try:
            verify_launch(st, seq, claimed, s.next_execute, d)
        except LaunchRejected as exc:
            jobs = list(s.jobs)
            if i < len(jobs):
                jobs[i] = (_S.Rejected, seq)
            yield f"tee:reject({type(exc).__name__})", replace(s, jobs=tuple(jobs), phase=("rel", 0))
            return
        legit = st == _S.Issued and seq == s.legit
        jobs = list(s.jobs)
        jobs[i] = (_S.Launched, seq)
        yield "tee:launch", replace(s, jobs=tuple(jobs), running=("tee", i), phase=None,
                                    next_execute=s.next_execute + 1,
                                    legit=s.legit + (1 if legit else 0),
                                    bad_launch=s.bad_launch or not legit)
    else:
        _, k = s.phase
        step = release_steps(d)[k]
        nxt = ("rel", k + 1) if k + 1 < len(RELEASE_STEPS) else None
        if step == "revoke_secure_memory":
            yield f"tee:{step}", replace(s, regs=(mmio, irq, False), phase=nxt)
        else:
            yield f"tee:{step}", replace(s, regs=(False, False, grant), phase=nxt)


def _npu_violations(s: _NpuState) -> list:
    out = []
    if s.bad_launch:
        out.append("S2")
    if s.regs[2] and s.running and s.running[0] == "ree":
        out.append("S3")
    return out


@dataclass(frozen=True)
class _MemState:
    """Blocks of the parameter window; one block per tensor group."""

    extents: tuple = ()  # block offset per allocated group
    allocated: int = 0
    protected: int = 0
    loaded: tuple = ()  # per group: None | "ok" | "forged"
    decrypted: tuple = ()
    plaintext: frozenset = frozenset()  # blocks holding plaintext
    released: bool = False


def _mem_successors(s: _MemState, d: Defenses, groups: int):
    if s.released:
        return
    g = len(s.extents)
    if g < groups:
        for reply, label in ((s.allocated, "honest"), (s.allocated + 1, "non_adjacent")):
            if validate_contiguity(reply, s.allocated, d):
                yield f"cma_reply({g},{label})", replace(
                    s, extents=s.extents + (reply,), allocated=s.allocated + 1,
                    loaded=s.loaded + (None,), decrypted=s.decrypted + (False,))
    for i in range(len(s.extents)):
        if s.loaded[i] is None and not s.decrypted[i]:
            for kind in ("ok", "forged"):
                loaded = list(s.loaded)
                loaded[i] = kind
                yield f"ree_load({i},{kind})", replace(s, loaded=tuple(loaded))
    if s.protected < s.allocated and any(x is not None for x in s.loaded):
        yield "tee:extend_protected", replace(s, protected=s.allocated)
    for i in range(len(s.extents)):
        if s.loaded[i] is not None and not s.decrypted[i] and s.protected >= i + 1:
            loaded = list(s.loaded)
            if s.loaded[i] == "forged" and d.load_checksum:
                loaded[i] = None
                yield f"tee:reject_chunk({i})", replace(s, loaded=tuple(loaded))
                continue
            # a forged chunk header points the plaintext just past the protected end
            dest = s.extents[i] if s.loaded[i] == "ok" else s.protected
            dec = list(s.decrypted)
            dec[i] = True
            yield f"tee:decrypt({i})", replace(s, decrypted=tuple(dec),
                                               plaintext=s.plaintext | {dest})
    if len(s.extents) == groups and all(s.decrypted):
        # shrink zero-fills the whole window before returning it
        inside = frozenset(b for b in s.plaintext if b >= s.allocated)
        yield "tee:shrink_all", replace(s, allocated=0, protected=0, plaintext=inside, released=True)


def _mem_violations(s: _MemState) -> list:
    out = []
    # group i must sit in block i and nothing is protected that is not allocated
    if any(off != i for i, off in enumerate(s.extents)) or s.protected > s.allocated:
        out.append("S1")
    # TZASC blocks every non-secure read below the protected watermark
    if any(b >= s.protected for b in s.plaintext):
        out.append("S4")
    return out


def _bfs(start, successors, violations, depth: int, component: str) -> tuple[list, int]:
    seen = {start: ()}
    frontier = [start]
    found = []
    for _ in range(depth):
        nxt = []
        for s in frontier:
            path = seen[s]
            for action, t in successors(s):
                if t in seen:
                    continue
                seen[t] = path + (action,)
                bad = violations(t)
                for p in bad:
                    found.append(Violation(p, component, seen[t]))
                if not bad:
                    nxt.append(t)
        frontier = nxt
    return found, len(seen)


def attack_explore(depth: int = 12, defenses: Defenses = Defenses(), tee_jobs: int = MAX_TEE_JOBS,
                   ree_jobs: int = MAX_REE_JOBS, groups: int = 2, stats: dict | None = None) -> list:
    """Every reachable violating state (shortest path each), up to `depth` steps.

    The NPU protocol and the parameter-memory pipeline share no state, so they
    are explored as separate components; their product adds no new violations.
    """
    if tee_jobs > MAX_TEE_JOBS or ree_jobs > MAX_REE_JOBS:
        raise ValueError(f"configuration limited to {MAX_TEE_JOBS} TEE and {MAX_REE_JOBS} REE jobs")
    npu, n_npu = _bfs(_NpuState(), lambda s: _npu_successors(s, defenses, tee_jobs, ree_jobs),
                      _npu_violations, depth, "npu")
    mem, n_mem = _bfs(_MemState(), lambda s: _mem_successors(s, defenses, groups),
                      _mem_violations, depth, "memory")
    if stats is not None:
        stats.update(npu_states=n_npu, memory_states=n_mem)
    return npu + mem


def format_report(violations: list) -> str:
    return "".join(v.to_text() + "\n" for v in violations)
