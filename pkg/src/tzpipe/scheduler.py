"""Scheduling policies for the restoration pipeline.

The CPU rule: a ready CPU compute operator always wins; otherwise run the
restoration operator serving the earliest compute operator. I/O and NPU run
their ready operators in topological order. Alloc/Decrypt micro-op chains
may be preempted at micro-op boundaries.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .graph import ALLOC, COMPUTE, CPU, DECRYPT, IO, NPU, ExtendedGraph, Node, resolve_durations
from .hardware import HardwareModel

BRUTE_FORCE_LIMIT = 12
_KIND_RANK = {ALLOC: 0, DECRYPT: 1}


class TooLarge(ValueError):
    pass


class Variant(str, Enum):
    GreedyPriority = "GreedyPriority"
    GreedyPriorityNoPreempt = "GreedyPriorityNoPreempt"
    TopologicalFifo = "TopologicalFifo"
    BruteForceOptimal = "BruteForceOptimal"


class Decision(str, Enum):
    Continue = "Continue"
    PreemptAtBoundary = "PreemptAtBoundary"


@dataclass
class ReadyQueue:
    """Ready operators per hardware class, with the time each became ready."""

    by_hw: dict = field(default_factory=lambda: {CPU: {}, NPU: {}, IO: {}})

    @classmethod
    def of(cls, nodes: Sequence[Node], ready_at: dict | None = None) -> "ReadyQueue":
        q = cls()
        for n in nodes:
            q.push(n, (ready_at or {}).get(n.nid, 0))
        return q

    def push(self, node: Node, t: float = 0) -> None:
        self.by_hw[node.hardware][node.nid] = (node, t)

    def remove(self, node: Node) -> None:
        del self.by_hw[node.hardware][node.nid]

    def nodes(self, hw: str) -> list:
        return [n for n, _ in self.by_hw[hw].values()]

    def ready_time(self, node: Node) -> float:
        return self.by_hw[node.hardware][node.nid][1]

    def __contains__(self, node: Node) -> bool:
        return node.nid in self.by_hw[node.hardware]

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_hw.values())


def restoration_key(n: Node) -> tuple:
    # Alloc before Decrypt on equal association: it unblocks the I/O path
    return (n.assoc, _KIND_RANK.get(n.kind, 2), n.group if n.group is not None else -1, n.nid)


def cpu_pick(queue: ReadyQueue) -> Node | None:
    ready = queue.nodes(CPU)
    compute = [n for n in ready if n.kind == COMPUTE]
    if compute:
        return min(compute, key=lambda n: (n.assoc, n.nid))
    restoration = [n for n in ready if n.kind != COMPUTE]
    if restoration:
        return min(restoration, key=restoration_key)
    return None


def io_pick(queue: ReadyQueue) -> Node | None:
    ready = queue.nodes(IO)
    return min(ready, key=lambda n: (n.assoc, n.nid)) if ready else None


def npu_pick(queue: ReadyQueue) -> Node | None:
    ready = queue.nodes(NPU)
    return min(ready, key=lambda n: (n.assoc, n.nid)) if ready else None


def fifo_pick(queue: ReadyQueue, hw: str) -> Node | None:
    ready = queue.by_hw[hw].values()
    return min(ready, key=lambda item: (item[1], item[0].nid))[0] if ready else None


def preemption_decision(running: Node, queue: ReadyQueue,
                        policy: "Policy | str" = Variant.GreedyPriority) -> Decision:
    """Whether the micro-op chain of `running` yields at its next boundary."""
    policy = Policy.of(policy)
    if not policy.preemptive or running.kind == COMPUTE:
        return Decision.Continue
    for n in queue.nodes(CPU):
        if n.kind == COMPUTE:
            return Decision.PreemptAtBoundary
        if n.op_label != running.op_label and n.assoc < running.assoc:
            return Decision.PreemptAtBoundary
    return Decision.Continue


@dataclass(frozen=True)
class Policy:
    variant: Variant = Variant.GreedyPriority

    @classmethod
    def of(cls, value: "Policy | str | Variant") -> "Policy":
        if isinstance(value, Policy):
            return value
        try:
            return cls(Variant(value))
        except ValueError:
            names = ", ".join(v.value for v in Variant)
            raise ValueError(f"unknown policy {value!r}; expected one of {names}") from None

    @property
    def name(self) -> str:
        return self.variant.value

    @property
    def preemptive(self) -> bool:
        return self.variant == Variant.GreedyPriority

    def pick(self, hw: str, queue: ReadyQueue) -> Node | None:
        if self.variant == Variant.TopologicalFifo:
            return fifo_pick(queue, hw)
        if hw == CPU:
            return cpu_pick(queue)
        if hw == IO:
            return io_pick(queue)
        return npu_pick(queue)


# Exhaustive oracle -----------------------------------------------------------

def _lanes_for(hw: HardwareModel) -> dict:
    return {CPU: hw.cpu_lanes, NPU: 1, IO: 1}


def _earliest_fit(busy: list, est: int, d: int) -> int:
    """Earliest start >= est of a d-long slot between sorted (start, end) intervals."""
    t = est
    for s, e in busy:
        if e <= t:
            continue
        if s >= t + d:
            break
        t = e
    return t


def serial_schedule(graph: ExtendedGraph, durations: Sequence[int], order: Sequence[int],
                    hw: HardwareModel) -> int:
    """Serial schedule generation: place nodes in `order` at their earliest feasible slot."""
    lanes = {h: [[] for _ in range(k)] for h, k in _lanes_for(hw).items()}
    end = [0] * len(graph.nodes)
    makespan = 0
    for nid in order:
        n = graph.nodes[nid]
        est = max((end[p] for p in n.preds), default=0)
        d = durations[nid]
        best = None
        for lane in lanes[n.hardware]:
            t = _earliest_fit(lane, est, d)
            if best is None or t < best[0]:
                best = (t, lane)
        t, lane = best
        bisect.insort(lane, (t, t + d))
        end[nid] = t + d
        makespan = max(makespan, end[nid])
    return makespan


def brute_force_optimal(graph: ExtendedGraph, hw: HardwareModel, memory=None,
                        durations: Sequence[int] | None = None) -> int:
    """Exact minimum makespan over non-preemptive schedules.

    Any schedule sorted by start time and replayed lane by lane, each node
    appended at max(ready, lane free), starts no node later. So it suffices to
    search orders and lane choices with append-only placement. The search runs
    over sets of placed nodes; a partial schedule is summarised by its lane
    free times, the end times still needed by unplaced successors and its
    makespan, and summaries dominated by another for the same set are dropped.
    """
    n = len(graph.nodes)
    if n > BRUTE_FORCE_LIMIT:
        raise TooLarge(f"{n} operators exceed the exhaustive bound of {BRUTE_FORCE_LIMIT}")
    d = list(durations) if durations is not None else resolve_durations(graph, hw, memory)
    hws = sorted(_lanes_for(hw))
    counts = _lanes_for(hw)
    preds = [x.preds for x in graph.nodes]
    succs = graph.succs
    tail = [0] * n  # longest path from a node to the end, itself included
    for v in range(n - 1, -1, -1):
        tail[v] = d[v] + max((tail[s] for s in succs[v]), default=0)
    work = {h: sum(d[v] for v in range(n) if graph.nodes[v].hardware == h) for h in hws}

    # state: (lane free times per hardware, end time per node or -1, makespan)
    start = (tuple(tuple([0] * counts[h]) for h in hws), tuple([-1] * n), 0)
    layer = {0: [start]}
    # any feasible schedule bounds the search; states that cannot beat it are cut
    best = serial_schedule(graph, d, range(n), hw)
    for _ in range(n):
        nxt: dict = {}
        for mask, states in layer.items():
            for lanes, ends, span in states:
                for v in range(n):
                    if mask >> v & 1 or any(not mask >> p & 1 for p in preds[v]):
                        continue
                    h = hws.index(graph.nodes[v].hardware)
                    est = max((ends[p] for p in preds[v]), default=0)
                    for f in sorted(set(lanes[h])):
                        t = max(est, f)
                        free = list(lanes[h])
                        free.remove(f)
                        free.append(t + d[v])
                        new_lanes = lanes[:h] + (tuple(sorted(free)),) + lanes[h + 1:]
                        m2 = mask | 1 << v
                        # forget end times nobody will read again
                        new_ends = tuple(
                            (t + d[v] if u == v else e)
                            if (u == v or e >= 0) and any(not m2 >> s & 1 for s in succs[u]) else -1
                            for u, e in enumerate(ends))
                        new_span = max(span, t + d[v])
                        if _bound(new_span, new_ends, new_lanes, m2, n, preds,
                                                       tail, graph, hws, counts, d, work) >= best:
                            continue
                        _add(nxt.setdefault(m2, []), (new_lanes, new_ends, new_span))
        layer = nxt
    for state in layer.get((1 << n) - 1, ()):
        best = min(best, state[2])
    return best


def _flat(state) -> tuple:
    lanes, ends, span = state
    return tuple(x for lane in lanes for x in lane) + ends + (span,)


def _add(bucket: list, state) -> None:
    key = _flat(state)
    for other in bucket:
        if all(a <= b for a, b in zip(_flat(other), key)):
            return
    bucket[:] = [o for o in bucket if not all(a <= b for a, b in zip(key, _flat(o)))]
    bucket.append(state)


def _bound(span, ends, lanes, mask, n, preds, tail, graph, hws, counts, d, work) -> int:
    lb = span
    for v in range(n):
        if not mask >> v & 1:
            est = max((ends[p] for p in preds[v] if mask >> p & 1), default=0)
            lb = max(lb, est + tail[v])
    for i, h in enumerate(hws):
        left = work[h] - sum(d[v] for v in range(n) if mask >> v & 1 and graph.nodes[v].hardware == h)
        if left:
            lb = max(lb, -(-(sum(lanes[i]) + left) // counts[h]))
    return lb
