"""Hardware cost model shared by the simulator, the memory model and the graph."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

GB = 1_000_000_000
MB = 1_000_000
MIB = 1 << 20
PAGE_SIZE = 4096
US_PER_S = 1_000_000


@dataclass(frozen=True)
class HardwareModel:
    """Throughputs in bytes/second, costs in microseconds."""

    cpu_lanes: int = 1
    io_throughput: float = 2.0 * GB
    decrypt_throughput: float = 8.0 * GB / 0.9
    # single-thread migration rate under memory pressure
    cma_migration_throughput_pressured: float = 1.9 * GB
    # migration rate reached with four migration threads
    cma_migration_throughput_multi: float = 3.8 * GB
    cma_threads: int = 1
    npu_world_switch_cost: float = 40.0
    naive_reinit_cost: float = 32_000.0
    framework_init_cost: float = 2_300_000.0
    checkpoint_restore_cost: float = 20_000.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "npu_world_switch_cost":
                # zero is allowed: models an exclusive NPU
                if value < 0:
                    raise ValueError(f"{f.name} must be >= 0, got {value}")
            elif value <= 0:
                raise ValueError(f"{f.name} must be > 0, got {value}")

    def migration_throughput(self, threads: int | None = None) -> float:
        """Linear interpolation between the 1-thread and 4-thread endpoints."""
        t = self.cma_threads if threads is None else threads
        t = min(max(t, 1), 4)
        lo, hi = self.cma_migration_throughput_pressured, self.cma_migration_throughput_multi
        return lo + (hi - lo) * (t - 1) / 3

    def replace(self, **overrides) -> "HardwareModel":
        known = {f.name for f in dataclasses.fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise KeyError(f"unknown hardware field(s): {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **overrides)


def transfer_us(nbytes: float, throughput: float) -> float:
    return nbytes / throughput * US_PER_S
