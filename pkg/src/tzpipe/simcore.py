"""Discrete-event engine over CPU lanes, one NPU lane and one I/O lane.

Time is integer microseconds. Completions that coincide are handled in
ascending node id, lanes are dispatched in a fixed order, so a run is a pure
function of its inputs.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Sequence

from .graph import (ALLOC, COMPUTE, CPU, DECRYPT, DEFAULT_CHUNK_BYTES, IO, LOAD, NPU, ComputationGraph,
                    ExtendedGraph, GraphBuilder, alloc_bytes, critical_paths, insert_restoration_ops,
                    resolve_durations, split_micro_ops)
from .hardware import US_PER_S, HardwareModel
from .npu_codriver import CoDriverSystem
from .scheduler import Decision, Policy, ReadyQueue, preemption_decision
from .securemem import SecureMemoryState, extend_allocated, install_cached_groups, protect_through

BASELINES = ("TZLLM", "Strawman", "REE-Flash", "REE-Memory")
TRACE_HEADER = "lane\top\tkind\tgroup\tstart_us\tend_us\tresumed"


class DeadlockError(RuntimeError):
    pass


@dataclass(frozen=True)
class Interval:
    lane: str
    nid: int
    label: str
    op: str  # owning operator label (differs from `label` for micro-ops)
    kind: str
    group: int | None
    start: int
    end: int
    resumed: bool = False


@dataclass
class Timeline:
    graph: ExtendedGraph
    policy: str
    durations: list
    intervals: list = field(default_factory=list)
    events: list = field(default_factory=list)
    memory_trace: list = field(default_factory=list)
    makespan: int = 0
    setup_us: int = 0
    baseline: str = "TZLLM"
    components: dict = field(default_factory=dict)

    @property
    def ttft(self) -> int:
        return self.makespan + self.setup_us

    @property
    def lanes(self) -> dict:
        out: dict = {}
        for iv in self.intervals:
            out.setdefault(iv.lane, []).append(iv)
        return out

    def busy(self) -> dict:
        return {lane: sum(iv.end - iv.start for iv in ivs) for lane, ivs in self.lanes.items()}

    def to_trace(self) -> str:
        rows = [TRACE_HEADER]
        for iv in sorted(self.intervals, key=lambda i: (i.start, i.lane, i.nid)):
            group = "" if iv.group is None else str(iv.group)
            rows.append(f"{iv.lane}\t{iv.label}\t{iv.kind}\t{group}\t{iv.start}\t{iv.end}\t{int(iv.resumed)}")
        return "\n".join(rows) + "\n"


@dataclass(frozen=True)
class Bubble:
    lane: str
    start: int
    end: int
    blocked: str  # the node that started when the gap closed
    blocking: str | None  # its predecessor that finished last

    @property
    def edge(self) -> tuple:
        return (self.blocking, self.blocked)


def _lane_names(hw: HardwareModel) -> list:
    return [f"cpu{i}" for i in range(hw.cpu_lanes)] + ["npu", "io"]


def _lane_hw(lane: str) -> str:
    return CPU if lane.startswith("cpu") else (NPU if lane == "npu" else IO)


def _next_micro(graph: ExtendedGraph, node) -> int | None:
    if node.parent is None:
        return None
    for s in graph.succs[node.nid]:
        if graph.nodes[s].parent == node.parent:
            return s
    return None


def run_prefill(graph: ExtendedGraph, hw: HardwareModel, policy="GreedyPriority",
                memory: SecureMemoryState | None = None, setup_us: int | None = None,
                durations: Sequence[int] | None = None) -> Timeline:
    """Simulate one prefill pass; `memory` (if given) is mutated as operators run."""
    policy = Policy.of(policy)
    d = list(durations) if durations is not None else resolve_durations(graph, hw, memory)
    if setup_us is None:
        setup_us = int(round(hw.checkpoint_restore_cost))
    tl = Timeline(graph, policy.name, d, setup_us=setup_us)
    nodes = graph.nodes
    lanes = _lane_names(hw)
    running: dict = {lane: None for lane in lanes}
    sticky: dict = {lane: None for lane in lanes}
    last_lane: dict = {}  # op label -> (lane, end) of its latest micro-op
    missing = [len(n.preds) for n in nodes]
    queue = ReadyQueue()
    for n in nodes:
        if not missing[n.nid]:
            queue.push(n, 0)
    events: list = []
    done = 0
    t = 0
    region = memory.param_region if memory is not None else None
    group_offset: dict = {}

    def mem_effect(fn, *args):
        before = len(memory.trace)
        out = fn(*args)
        for rec in memory.trace[before:]:
            rec["t_us"] = t
            tl.memory_trace.append(rec)
        return out

    def start(lane: str, nid: int) -> None:
        n = nodes[nid]
        if n in queue:
            queue.remove(n)
        # a micro-op resumes its operator unless it runs straight after the previous one
        resumed = bool(n.chunk) and last_lane.get(n.op_label) != (lane, t)
        running[lane] = nid
        sticky[lane] = None
        end = t + d[nid]
        tl.intervals.append(Interval(lane, nid, n.label, n.op_label, n.kind, n.group, t, end, resumed))
        tl.events.append({"t_us": t, "event": "start", "op": n.label, "lane": lane})
        if memory is not None and n.kind == ALLOC:
            if n.chunk in (None, 0):
                group_offset[n.group] = region.allocated_watermark
            if alloc_bytes(graph, n):
                mem_effect(extend_allocated, memory, region, alloc_bytes(graph, n))
        if memory is not None and n.kind == DECRYPT:
            mem_effect(protect_through, memory, region, group_offset[n.group] + n.offset + n.nbytes)
        heapq.heappush(events, (end, nid, lane))

    def dispatch() -> None:
        for lane in lanes:
            if running[lane] is None and sticky[lane] is not None:
                start(lane, sticky[lane])
        for lane in lanes:
            if running[lane] is None:
                pick = policy.pick(_lane_hw(lane), queue)
                if pick is not None:
                    start(lane, pick.nid)

    dispatch()
    while done < len(nodes):
        if not events:
            raise DeadlockError(f"no runnable operator at t={t} with {len(nodes) - done} pending")
        t = events[0][0]
        batch = []
        while events and events[0][0] == t:
            batch.append(heapq.heappop(events))
        boundaries = []
        for _, nid, lane in sorted(batch, key=lambda e: e[1]):
            n = nodes[nid]
            running[lane] = None
            done += 1
            last_lane[n.op_label] = (lane, t)
            tl.events.append({"t_us": t, "event": "complete", "op": n.label, "lane": lane})
            if memory is not None and n.kind == ALLOC and _next_micro(graph, n) is None:
                memory.register_group(n.group, group_offset[n.group], graph.group(n.group).byte_size)
            if memory is not None and n.kind == DECRYPT:
                memory.mark_sensitive(region, group_offset[n.group] + n.offset, n.nbytes)
            for s in graph.succs[nid]:
                missing[s] -= 1
                if not missing[s]:
                    queue.push(nodes[s], t)
            nxt = _next_micro(graph, n)
            if nxt is not None:
                boundaries.append((lane, nxt))
        for lane, nxt in boundaries:
            nxt_node = nodes[nxt]
            if preemption_decision(nxt_node, queue, policy) == Decision.Continue:
                if nxt_node in queue:
                    queue.remove(nxt_node)
                sticky[lane] = nxt
            else:
                tl.events.append({"t_us": t, "event": "preempt", "op": nxt_node.op_label, "lane": lane})
        dispatch()
    tl.makespan = max((iv.end for iv in tl.intervals), default=0)
    return tl


def check_timeline(tl: Timeline) -> list:
    """Causality, lane exclusivity and time conservation; returns problems found."""
    problems = []
    g, d = tl.graph, tl.durations
    first_start, last_end, total = {}, {}, {}
    for iv in tl.intervals:
        first_start[iv.nid] = min(first_start.get(iv.nid, iv.start), iv.start)
        last_end[iv.nid] = max(last_end.get(iv.nid, iv.end), iv.end)
        total[iv.nid] = total.get(iv.nid, 0) + iv.end - iv.start
    for n in g.nodes:
        if total.get(n.nid) != d[n.nid]:
            problems.append(f"{n.label}: ran {total.get(n.nid)} of {d[n.nid]}")
            continue
        for p in n.preds:
            if first_start[n.nid] < last_end[p]:
                problems.append(f"{n.label} starts before {g.nodes[p].label} ends")
        if _lane_hw(next(iv.lane for iv in tl.intervals if iv.nid == n.nid)) != n.hardware:
            problems.append(f"{n.label} ran on the wrong hardware")
    for lane, ivs in tl.lanes.items():
        ivs = sorted(ivs, key=lambda i: (i.start, i.end))
        for a, b in zip(ivs, ivs[1:]):
            if b.start < a.end:
                problems.append(f"{lane}: {a.label} overlaps {b.label}")
    return problems


def detect_bubbles(tl: Timeline) -> list:
    """Idle gaps on each lane that are followed by more work on that lane."""
    g = tl.graph
    end_of = {}
    for iv in tl.intervals:
        end_of[iv.nid] = max(end_of.get(iv.nid, 0), iv.end)
    out = []
    for lane, ivs in sorted(tl.lanes.items()):
        ivs = sorted(ivs, key=lambda i: i.start)
        prev_end = 0
        for iv in ivs:
            if iv.start > prev_end:
                preds = g.nodes[iv.nid].preds
                blocking = max(preds, key=lambda p: (end_of[p], p)) if preds else None
                out.append(Bubble(lane, prev_end, iv.start, iv.label,
                                  g.nodes[blocking].label if blocking is not None else None))
            prev_end = max(prev_end, iv.end)
    return out


# Baselines ---------------------------------------------------------------------

def strawman_graph(graph: ComputationGraph, restoration: bool = True) -> ExtendedGraph:
    """Sequential cold start on the CPU: all allocs, then loads, decrypts, compute."""
    b = GraphBuilder()
    prev = None
    for kind in (ALLOC, LOAD, DECRYPT) if restoration else ():
        for grp in graph.groups:
            label = f"{kind[0].upper()}{grp.group_index}"
            assoc = min(grp.consumed_by)
            b.add(label, [prev] if prev else [], kind=kind, hardware=IO if kind == LOAD else CPU,
                  assoc=assoc, group=grp.group_index, nbytes=grp.byte_size)
            prev = label
    for op in graph.ops:
        duration = op.cpu_duration if op.cpu_duration is not None else op.duration
        if op.hardware == NPU and op.cpu_duration is None:
            raise ValueError(f"operator {op.index} has no CPU duration for a CPU-only run")
        preds = [f"C{p}" for p in op.predecessors] or ([prev] if prev else [])
        b.add(f"C{op.index}", preds, kind=COMPUTE, hardware=CPU, assoc=op.index,
              group=op.tensor_group, duration=duration, cpu_duration=duration)
    return b.build(name=graph.name, groups=graph.groups)


def build_prefill_graph(graph: ComputationGraph, baseline: str = "TZLLM", cached_groups=(),
                        chunk_bytes: int | None = DEFAULT_CHUNK_BYTES) -> ExtendedGraph:
    if baseline == "Strawman":
        return strawman_graph(graph)
    if baseline == "REE-Memory":
        return insert_restoration_ops(graph, [g.group_index for g in graph.groups])
    if baseline == "REE-Flash":
        return insert_restoration_ops(graph, (), kinds=(LOAD,))
    if baseline != "TZLLM":
        raise ValueError(f"unknown baseline {baseline!r}; expected one of {', '.join(BASELINES)}")
    ext = insert_restoration_ops(graph, cached_groups)
    return split_micro_ops(ext, chunk_bytes) if chunk_bytes else ext


def simulate_prefill(graph: ComputationGraph, hw: HardwareModel, policy="GreedyPriority",
                     baseline: str = "TZLLM", cached_groups=(), chunk_bytes: int | None = DEFAULT_CHUNK_BYTES,
                     occupancy: float = 1.0, seed: int = 0, param_capacity: int | None = None) -> Timeline:
    """Prefill of one request under a baseline; `occupancy` is the CMA pressure."""
    ext = build_prefill_graph(graph, baseline, cached_groups, chunk_bytes)
    needs_memory = baseline in ("TZLLM", "Strawman")
    memory = None
    if needs_memory:
        total = sum(g.byte_size for g in graph.groups)
        cap = param_capacity or max(12 * 10**9, 2 * total)
        memory = SecureMemoryState.create(hw, param_capacity=cap, occupancy=occupancy, seed=seed)
        install_cached_groups(memory, [graph.group(g).byte_size for g in sorted(ext.cached_groups)])
    if baseline == "Strawman":
        setup = hw.framework_init_cost
        policy = "TopologicalFifo"
    elif baseline == "TZLLM":
        setup = hw.checkpoint_restore_cost
    else:
        setup = 0
    tl = run_prefill(ext, hw, policy, memory, setup_us=int(round(setup)))
    tl.baseline = baseline
    sums = {ALLOC: 0, LOAD: 0, DECRYPT: 0, COMPUTE: 0}
    for n in ext.nodes:
        sums[n.kind] += tl.durations[n.nid]
    tl.components = {"init_us": tl.setup_us, "alloc_us": sums[ALLOC], "load_us": sums[LOAD],
                     "decrypt_us": sums[DECRYPT], "compute_us": sums[COMPUTE],
                     "cold_start_us": tl.setup_us + sums[ALLOC] + sums[LOAD] + sums[DECRYPT]}
    return tl


def lower_bound_gap(tl: Timeline, hw: HardwareModel) -> dict:
    paths = critical_paths(tl.graph, hw, durations=tl.durations)
    lb = paths["lower_bound"]
    return {**paths, "ttft_us": tl.ttft, "gap": (tl.ttft - lb) / lb if lb else 0.0}


# Decoding ----------------------------------------------------------------------

def decode_graph(spec, cpu_only: bool = False) -> ExtendedGraph:
    """Per-token compute graph with all parameters resident."""
    from .graph import build_graph

    cg = build_graph(spec.with_prompt(1))
    if cpu_only:
        return strawman_graph(cg, restoration=False)
    return insert_restoration_ops(cg, [g.group_index for g in cg.groups])


def run_decoding(spec, hw: HardwareModel, tokens: int, npu_sharing: bool = True,
                 cpu_only: bool = False) -> dict:
    """Simulate `tokens` decode iterations.

    With sharing on, every NPU operator is a secure job driven through the
    co-driver protocol, which charges one world switch on take-over and one
    on release.
    """
    g = decode_graph(spec, cpu_only)
    base = [n.duration for n in g.nodes]
    durations = list(base)
    switch_total = 0.0
    switches = 0
    if npu_sharing and not cpu_only:
        system = CoDriverSystem(switch_cost_us=hw.npu_world_switch_cost)
        for n in g.nodes:
            if n.hardware == NPU:
                before = system.switch_time_us
                system.run_secure_job()
                cost = system.switch_time_us - before
                durations[n.nid] += int(round(cost))
        switches = system.world_switches
        switch_total = system.switch_time_us
    tl = run_prefill(g, hw, "GreedyPriority", setup_us=0, durations=durations)
    token_us = tl.makespan
    decode_us = token_us * tokens
    return {
        "tokens": tokens,
        "token_time_us": token_us,
        "decode_time_us": decode_us,
        "tokens_per_second": US_PER_S / token_us if token_us else float("inf"),
        "switch_time_us": switch_total * tokens,
        "world_switches": switches * tokens,
        "switch_overhead_fraction": (sum(durations) - sum(base)) / token_us if token_us else 0.0,
    }


# Caching threshold -------------------------------------------------------------

def restoration_bound(graph: ComputationGraph, hw: HardwareModel, cached: int) -> tuple[int, int]:
    """Lower bound on prefill makespan with the first `cached` groups resident.

    For every uncached group g consumed first by operator c, compute cannot
    finish before either the I/O chain (first alloc, all loads through g,
    then g's decrypt) or the CPU work (allocs and decrypts through g, plus
    CPU compute ahead of c) is done, followed by compute from c onward.
    Returns (bound, pure compute path).
    """
    ext = insert_restoration_ops(graph, range(cached))
    d = resolve_durations(ext, hw)
    dur = {n.label: d[n.nid] for n in ext.nodes}
    comp = [op.duration for op in graph.ops]
    total = sum(comp)
    best, io, cpu = total, None, 0
    for grp in graph.groups[cached:]:
        g, c = grp.group_index, min(grp.consumed_by)
        if io is None:
            io = dur[f"A{g}"]
        io += dur[f"L{g}"]
        cpu += dur[f"A{g}"] + dur[f"D{g}"]
        cpu_before = sum(op.duration for op in graph.ops[:c] if op.hardware == CPU)
        best = max(best, max(io + dur[f"D{g}"], cpu + cpu_before) + sum(comp[c:]))
    return best, total


def caching_threshold(graph: ComputationGraph, hw: HardwareModel) -> float:
    """Smallest cached fraction at which restoration fits under the compute path."""
    n = len(graph.groups)
    for k in range(n + 1):
        bound, total = restoration_bound(graph, hw, k)
        if bound <= total:
            return k / n if n else 0.0
    return 1.0


def cached_prefix(graph: ComputationGraph, fraction: float) -> list:
    """Group indices cached at `fraction` (a topological prefix)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"cached fraction must be in [0, 1], got {fraction}")
    k = int(fraction * len(graph.groups) + 1e-9)
    return [g.group_index for g in graph.groups[:k]]


def calibrate_switch_cost(spec, hw: HardwareModel, percent: float) -> float:
    """Per-switch cost (µs) making switching `percent`% of exclusive decode time."""
    exclusive = run_decoding(spec, hw, 1, npu_sharing=False)["token_time_us"]
    npu_ops = sum(1 for n in decode_graph(spec).nodes if n.hardware == NPU)
    return percent / 100 * exclusive / (2 * npu_ops)
