"""Computation DAGs with restoration operators.

A model is a DAG of compute operators in topological order. Before the first
operator that consumes a tensor group we insert Alloc -> Load -> Decrypt for
that group (unless it is cached), and Alloc/Decrypt may be split into
fixed-size micro-operators, which are the scheduler's preemption points.
"""
from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

from .hardware import MIB, HardwareModel, transfer_us
from .securemem import SecureMemoryState, page_align

CPU, NPU, IO = "CPU", "NPU", "IO"
COMPUTE, ALLOC, LOAD, DECRYPT = "compute", "alloc", "load", "decrypt"
RESTORATION_KINDS = (ALLOC, LOAD, DECRYPT)
DEFAULT_CHUNK_BYTES = 32 * MIB


class SpecError(ValueError):
    pass


class CacheSetError(ValueError):
    pass


@dataclass(frozen=True)
class TensorGroupSpec:
    group_index: int
    byte_size: int
    consumed_by: frozenset = frozenset()


@dataclass(frozen=True)
class OpTemplate:
    """One operator of the repeated per-layer pattern."""

    kind: str
    hardware: str
    uses_params: bool = False


@dataclass(frozen=True)
class OpSpec:
    """An explicitly declared operator (used instead of the layer pattern)."""

    kind: str
    hardware: str
    tensor_group: int | None = None
    predecessors: tuple = ()
    duration: int | None = None
    cpu_duration: int | None = None


@dataclass
class ModelSpec:
    name: str
    layer_count: int
    tensor_groups: list
    prompt_tokens: int
    # (operator kind, hardware, prompt bucket) -> µs
    durations: dict = field(default_factory=dict)
    layer_ops: tuple = ()
    ops: tuple | None = None

    @classmethod
    def uniform(cls, name: str, layer_count: int, param_bytes: int, layer_ops: Sequence[OpTemplate],
                durations: Mapping, prompt_tokens: int) -> "ModelSpec":
        """One tensor group per layer, parameters split evenly."""
        if layer_count <= 0:
            raise SpecError("layer_count must be positive")
        per = param_bytes // layer_count
        sizes = [per] * layer_count
        sizes[-1] += param_bytes - per * layer_count
        groups = [TensorGroupSpec(i, s) for i, s in enumerate(sizes)]
        return cls(name, layer_count, groups, prompt_tokens, dict(durations), tuple(layer_ops))

    def with_prompt(self, prompt_tokens: int) -> "ModelSpec":
        return ModelSpec(self.name, self.layer_count, list(self.tensor_groups), prompt_tokens,
                         dict(self.durations), self.layer_ops, self.ops)

    @property
    def param_bytes(self) -> int:
        return sum(g.byte_size for g in self.tensor_groups)

    def lookup(self, kind: str, hardware: str) -> int:
        buckets = sorted({b for (k, h, b) in self.durations if k == kind and h == hardware})
        if not buckets:
            raise SpecError(f"no duration for operator kind {kind!r} on {hardware}")
        bucket = next((b for b in buckets if b >= self.prompt_tokens), buckets[-1])
        return self.durations[(kind, hardware, bucket)]


@dataclass(frozen=True)
class ComputeOp:
    index: int
    kind: str
    hardware: str
    duration: int
    tensor_group: int | None
    predecessors: tuple
    cpu_duration: int | None = None


@dataclass(frozen=True)
class ComputationGraph:
    name: str
    ops: tuple
    groups: tuple

    def group(self, index: int) -> TensorGroupSpec:
        return self.groups[self._group_pos[index]]

    @cached_property
    def _group_pos(self) -> dict:
        return {g.group_index: i for i, g in enumerate(self.groups)}


def build_graph(spec: ModelSpec) -> ComputationGraph:
    group_ids = [g.group_index for g in spec.tensor_groups]
    if any(b <= a for a, b in zip(group_ids, group_ids[1:])):
        raise SpecError("tensor group indices must be strictly increasing")
    for g in spec.tensor_groups:
        if g.byte_size <= 0:
            raise SpecError(f"tensor group {g.group_index} has non-positive size")
    known = set(group_ids)

    decls: list[OpSpec] = []
    if spec.ops is not None:
        decls = list(spec.ops)
    else:
        if not spec.layer_ops:
            raise SpecError("spec declares neither ops nor layer_ops")
        for layer in range(spec.layer_count):
            for t in spec.layer_ops:
                i = len(decls)
                decls.append(OpSpec(t.kind, t.hardware, group_ids[layer] if t.uses_params else None,
                                    (i - 1,) if i else ()))

    ops = []
    consumers = defaultdict(set)
    for i, d in enumerate(decls):
        if d.hardware not in (CPU, NPU):
            raise SpecError(f"op {i}: hardware must be CPU or NPU, got {d.hardware!r}")
        if any(p >= i or p < 0 for p in d.predecessors):
            raise SpecError(f"op {i}: predecessors {d.predecessors} are not earlier operators (cycle)")
        if d.tensor_group is not None:
            if d.tensor_group not in known:
                raise SpecError(f"op {i} references unknown tensor group {d.tensor_group}")
            consumers[d.tensor_group].add(i)
        duration = d.duration if d.duration is not None else spec.lookup(d.kind, d.hardware)
        cpu_duration = d.cpu_duration
        if cpu_duration is None:
            cpu_duration = duration if d.hardware == CPU else _maybe(spec, d.kind, CPU)
        if duration <= 0:
            raise SpecError(f"op {i} has non-positive duration")
        ops.append(ComputeOp(i, d.kind, d.hardware, int(duration), d.tensor_group,
                             tuple(sorted(set(d.predecessors))), cpu_duration))
    _check_acyclic(len(ops), [(p, op.index) for op in ops for p in op.predecessors])

    groups = []
    for g in spec.tensor_groups:
        used = frozenset(consumers.get(g.group_index, ()))
        if g.consumed_by and set(g.consumed_by) != used:
            raise SpecError(f"tensor group {g.group_index}: consumed_by disagrees with operators")
        if not used:
            raise SpecError(f"tensor group {g.group_index} is never consumed")
        groups.append(TensorGroupSpec(g.group_index, g.byte_size, used))
    firsts = [min(g.consumed_by) for g in groups]
    if firsts != sorted(firsts):
        raise SpecError("tensor groups must be listed in first-consumption order")
    return ComputationGraph(spec.name, tuple(ops), tuple(groups))


def _maybe(spec: ModelSpec, kind: str, hw: str) -> int | None:
    try:
        return spec.lookup(kind, hw)
    except SpecError:
        return None


def _check_acyclic(n: int, edges: Iterable[tuple[int, int]]) -> None:
    indeg = [0] * n
    succ = defaultdict(list)
    for u, v in edges:
        succ[u].append(v)
        indeg[v] += 1
    queue = deque(i for i in range(n) if indeg[i] == 0)
    seen = 0
    while queue:
        u = queue.popleft()
        seen += 1
        for v in succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                queue.append(v)
    if seen != n:
        raise SpecError("graph contains a cycle")


@dataclass(frozen=True)
class Node:
    nid: int
    label: str
    kind: str
    hardware: str
    preds: tuple
    assoc: int  # index of the compute op this node serves (its own index for compute)
    group: int | None = None
    nbytes: int = 0
    duration: int | None = None  # fixed for compute nodes; resolved later otherwise
    parent: str | None = None  # restoration op label, for micro-ops
    chunk: int | None = None
    offset: int = 0  # byte offset of a micro-op inside its parent
    cpu_duration: int | None = None

    @property
    def is_restoration(self) -> bool:
        return self.kind != COMPUTE

    @property
    def op_label(self) -> str:
        """Label of the (unsplit) operator this node belongs to."""
        return self.parent or self.label


@dataclass(frozen=True)
class ExtendedGraph:
    name: str
    nodes: tuple
    groups: tuple
    cached_groups: frozenset = frozenset()
    chunk_bytes: int | None = None

    @cached_property
    def succs(self) -> tuple:
        out = [[] for _ in self.nodes]
        for n in self.nodes:
            for p in n.preds:
                out[p].append(n.nid)
        return tuple(tuple(s) for s in out)

    @cached_property
    def by_label(self) -> dict:
        return {n.label: n for n in self.nodes}

    @cached_property
    def _groups_by_index(self) -> dict:
        return {g.group_index: g for g in self.groups}

    def group(self, index: int) -> TensorGroupSpec:
        return self._groups_by_index[index]

    def compute_nodes(self) -> list:
        return [n for n in self.nodes if n.kind == COMPUTE]

    def restoration_nodes(self) -> list:
        return [n for n in self.nodes if n.is_restoration]

    def restoration_ops(self) -> dict:
        """Operator label -> its (micro) nodes in chain order."""
        ops: dict = {}
        for n in self.restoration_nodes():
            ops.setdefault(n.op_label, []).append(n)
        return ops

    def edges(self) -> list:
        return [(p, n.nid) for n in self.nodes for p in n.preds]

    def total_bytes(self, kinds: Iterable[str] = RESTORATION_KINDS) -> int:
        kinds = set(kinds)
        return sum(n.nbytes for n in self.nodes if n.kind in kinds)


class GraphBuilder:
    def __init__(self):
        self.items: list = []  # (label, fields, pred labels)

    def add(self, label: str, pred_labels: Iterable[str], **fields) -> None:
        self.items.append((label, fields, tuple(pred_labels)))

    def build(self, **graph_fields) -> ExtendedGraph:
        ids = {label: i for i, (label, _, _) in enumerate(self.items)}
        nodes = []
        for i, (label, fields, preds) in enumerate(self.items):
            pids = tuple(sorted({ids[p] for p in preds}))
            if any(p >= i for p in pids):
                raise SpecError(f"{label}: predecessor placed after node")
            nodes.append(Node(nid=i, label=label, preds=pids, **fields))
        g = ExtendedGraph(nodes=tuple(nodes), **graph_fields)
        _check_acyclic(len(nodes), g.edges())
        return g


def insert_restoration_ops(graph: ComputationGraph, cached_groups: Iterable[int] = (),
                           kinds: Sequence[str] = RESTORATION_KINDS,
                           chain_allocs: bool = True) -> ExtendedGraph:
    """Extend `graph` with restoration chains for every non-cached group.

    Alloc operators are chained in group order so that the secure window grows
    in topological order. `kinds` drops stages a baseline does not need.
    """
    cached = frozenset(cached_groups)
    order = [g.group_index for g in graph.groups]
    k = len(cached)
    if cached != frozenset(order[:k]):
        raise CacheSetError(f"cached groups {sorted(cached)} are not a prefix of {order[:k + 1]}...")
    first_user = {g.group_index: min(g.consumed_by) for g in graph.groups}
    by_first = {c: g for g, c in first_user.items() if g not in cached}
    chain = [kd for kd in RESTORATION_KINDS if kd in kinds]

    b = GraphBuilder()
    ready_label: dict = {}
    prev_alloc = None
    for op in graph.ops:
        g = by_first.get(op.index)
        if g is not None and chain:
            size = graph.group(g).byte_size
            prev = None
            for kind in chain:
                label = f"{kind[0].upper()}{g}"
                preds = [prev] if prev else []
                if kind == ALLOC and chain_allocs and prev_alloc:
                    preds.append(prev_alloc)
                b.add(label, preds, kind=kind, hardware=IO if kind == LOAD else CPU,
                      assoc=op.index, group=g, nbytes=size)
                if kind == ALLOC:
                    prev_alloc = label
                prev = label
            ready_label[g] = prev
        preds = [f"C{p}" for p in op.predecessors]
        if op.tensor_group is not None and op.tensor_group in ready_label:
            preds.append(ready_label[op.tensor_group])
        b.add(f"C{op.index}", preds, kind=COMPUTE, hardware=op.hardware, assoc=op.index,
              group=op.tensor_group, duration=op.duration, cpu_duration=op.cpu_duration)
    return b.build(name=graph.name, groups=graph.groups, cached_groups=cached)


def split_micro_ops(graph: ExtendedGraph, chunk_bytes: int = DEFAULT_CHUNK_BYTES) -> ExtendedGraph:
    """Replace Alloc/Decrypt nodes larger than `chunk_bytes` by chains of micro-ops."""
    if chunk_bytes <= 0:
        raise ValueError("chunk_bytes must be positive")
    b = GraphBuilder()
    last = {}  # original label -> label of the node that now completes it
    for n in graph.nodes:
        preds = [last[graph.nodes[p].label] for p in n.preds]
        splittable = n.kind in (ALLOC, DECRYPT) and n.parent is None and n.nbytes > chunk_bytes
        if not splittable:
            b.add(n.label, preds, **_fields(n))
            last[n.label] = n.label
            continue
        prev = None
        for i, off in enumerate(range(0, n.nbytes, chunk_bytes)):
            label = f"{n.label}.{i}"
            fields = _fields(n)
            fields.update(nbytes=min(chunk_bytes, n.nbytes - off), parent=n.label, chunk=i, offset=off)
            b.add(label, preds if prev is None else [prev], **fields)
            prev = label
        last[n.label] = prev
    return b.build(name=graph.name, groups=graph.groups, cached_groups=graph.cached_groups,
                   chunk_bytes=chunk_bytes)


def _fields(n: Node) -> dict:
    return dict(kind=n.kind, hardware=n.hardware, assoc=n.assoc, group=n.group, nbytes=n.nbytes,
                duration=n.duration, parent=n.parent, chunk=n.chunk, offset=n.offset,
                cpu_duration=n.cpu_duration)


def _cumulative_round(values: Sequence[float]) -> list[int]:
    """Integer parts whose prefix sums track the rounded float prefix sums."""
    out, acc, prev = [], 0.0, 0
    for v in values:
        acc += v
        cur = int(round(acc))
        out.append(cur - prev)
        prev = cur
    return out


def alloc_bytes(graph: ExtendedGraph, n: Node) -> int:
    """Bytes of the pages an Alloc (micro-)op newly claims (possibly zero)."""
    return page_align(n.offset + n.nbytes) - page_align(n.offset)


def resolve_durations(graph: ExtendedGraph, hw: HardwareModel,
                      memory: SecureMemoryState | None = None) -> list[int]:
    """Duration in µs of every node.

    Alloc costs come from replaying the allocations, in node order, on a copy
    of `memory` (a fully occupied CMA region when omitted). Costs of the
    micro-ops of one operator are rounded cumulatively so that splitting never
    changes an operator's total.
    """
    if memory is None:
        memory = SecureMemoryState.create(hw, occupancy=1.0)
    mem = memory.copy()
    driver = mem.driver(mem.param_region)
    throughput = hw.migration_throughput()
    raw: list[float] = [0.0] * len(graph.nodes)
    for n in graph.nodes:
        if n.kind == COMPUTE:
            raw[n.nid] = float(n.duration)
        elif n.kind == ALLOC:
            nbytes = alloc_bytes(graph, n)
            raw[n.nid] = driver.region.allocate(nbytes, throughput)[1] if nbytes else 0.0
        elif n.kind == LOAD:
            raw[n.nid] = transfer_us(n.nbytes, hw.io_throughput)
        elif n.kind == DECRYPT:
            raw[n.nid] = transfer_us(n.nbytes, hw.decrypt_throughput)
    out = [0] * len(graph.nodes)
    for nodes in graph.restoration_ops().values():
        for node, d in zip(nodes, _cumulative_round([raw[x.nid] for x in nodes])):
            out[node.nid] = d
    for n in graph.compute_nodes():
        out[n.nid] = n.duration
    return out


def critical_paths(graph: ExtendedGraph, hw: HardwareModel, memory: SecureMemoryState | None = None,
                   durations: Sequence[int] | None = None) -> dict:
    """Per-resource path sums; their maximum bounds TTFT from below.

    With several CPU lanes the CPU sum is spread over them for the bound. The
    compute path is the longest dependency chain of compute work, which is
    the plain sum when the operators form a chain.
    """
    d = durations if durations is not None else resolve_durations(graph, hw, memory)
    io = cpu = 0
    chain = [0] * len(graph.nodes)  # node ids are topological
    for n in graph.nodes:
        before = max((chain[p] for p in n.preds), default=0)
        if n.kind == LOAD:
            io += d[n.nid]
        elif n.kind in (ALLOC, DECRYPT):
            cpu += d[n.nid]
        else:
            before += d[n.nid]
            if n.hardware == CPU:
                cpu += d[n.nid]
        chain[n.nid] = before
    compute = max(chain, default=0)
    return {"io_path": io, "cpu_path": cpu, "compute_path": compute,
            "lower_bound": max(io, -(-cpu // hw.cpu_lanes), compute)}
