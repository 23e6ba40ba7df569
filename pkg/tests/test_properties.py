import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import memory_fuzz
from tzpipe.graph import (ALLOC, COMPUTE, CPU, DECRYPT, LOAD, NPU, ModelSpec, OpSpec,
                          TensorGroupSpec, build_graph, insert_restoration_ops, resolve_durations,
                          split_micro_ops)
from tzpipe.hardware import MIB, HardwareModel
from tzpipe.modelstore import (KEY_SIZE, ContainerError, chunk_count, pack, read_checkpoint,
                               unpack_all, unwrap_model_key, verify)
from tzpipe.npu_codriver import (CodriverError, CoDriverSystem, ShadowJob, dma_audit,
                                 register_invariant_holds)
from tzpipe.simcore import check_timeline, lower_bound_gap, simulate_prefill


@st.composite
def specs(draw, max_ops=10):
    n = draw(st.integers(1, max_ops))
    ops, groups = [], []
    for i in range(n):
        preds = tuple(sorted(draw(st.sets(st.integers(0, i - 1), max_size=3)))) if i else ()
        hw = draw(st.sampled_from([CPU, NPU]))
        uses = draw(st.booleans()) or i == 0
        g = None
        if uses:
            g = len(groups)
            groups.append(TensorGroupSpec(g, draw(st.integers(1, 48 * MIB))))
        ops.append(OpSpec("op", hw, g, preds, draw(st.integers(1, 50_000))))
    return ModelSpec("random", 1, groups, 1, {}, (), tuple(ops))


@st.composite
def extended(draw):
    g = build_graph(draw(specs()))
    k = draw(st.integers(0, len(g.groups)))
    ext = insert_restoration_ops(g, [grp.group_index for grp in g.groups[:k]])
    return g, ext, draw(st.sampled_from([None, 256 * 1024, 3 * MIB + 7, 16 * MIB]))


@given(extended())
def test_extended_graph_is_topological_with_chain_shape(case):
    g, ext, _ = case
    for n in ext.nodes:
        assert all(p < n.nid for p in n.preds)
    lab = ext.by_label
    cached = ext.cached_groups
    for grp in g.groups:
        gi = grp.group_index
        if gi in cached:
            assert f"A{gi}" not in lab
            continue
        a, l, d = lab[f"A{gi}"], lab[f"L{gi}"], lab[f"D{gi}"]
        assert (a.kind, l.kind, d.kind) == (ALLOC, LOAD, DECRYPT)
        assert a.nid in l.preds and l.nid in d.preds
        for c in grp.consumed_by:
            assert d.nid in lab[f"C{c}"].preds


@given(extended())
def test_micro_ops_conserve_bytes_and_work(case):
    _, ext, chunk = case
    if chunk is None:
        return
    hw = HardwareModel()
    split = split_micro_ops(ext, chunk)
    for kind in (ALLOC, LOAD, DECRYPT):
        assert split.total_bytes([kind]) == ext.total_bytes([kind])
    assert sum(resolve_durations(split, hw)) == sum(resolve_durations(ext, hw))
    for n in split.nodes:
        if n.kind in (ALLOC, DECRYPT):
            assert n.nbytes <= chunk
    # compute nodes survive unchanged
    assert [n.label for n in split.compute_nodes()] == [n.label for n in ext.compute_nodes()]


@settings(max_examples=40)
@given(specs(), st.floats(0, 1), st.sampled_from(["GreedyPriority", "GreedyPriorityNoPreempt",
                                                   "TopologicalFifo"]),
       st.integers(1, 3), st.sampled_from([MIB, 8 * MIB]))
def test_timeline_valid_and_above_lower_bound(spec, pressure, policy, lanes, chunk):
    g = build_graph(spec)
    k = len(g.groups) // 2
    hw = HardwareModel(cpu_lanes=lanes)
    tl = simulate_prefill(g, hw, policy, cached_groups=range(k), chunk_bytes=chunk,
                          occupancy=pressure)
    assert check_timeline(tl) == []
    assert tl.ttft >= lower_bound_gap(tl, hw)["lower_bound"]
    rec = tl.memory_trace
    assert all(r["protected"] <= r["allocated"] for r in rec)


@settings(max_examples=100)
@given(st.integers(0, 2**32))
def test_secure_memory_under_adversarial_cma(seed):
    assert memory_fuzz(random.Random(seed), 25) == []


@given(st.lists(st.integers(1, 8 * MIB), min_size=1, max_size=6), st.data())
def test_filo_residency(sizes, data):
    from tzpipe.securemem import FiloViolation, SecureMemoryState, install_cached_groups, release_groups
    s = SecureMemoryState.create(param_capacity=64 * MIB)
    install_cached_groups(s, sizes)
    k = data.draw(st.integers(1, len(sizes)))
    perm = data.draw(st.permutations(range(len(sizes))))
    chosen = list(perm[:k])
    newest = list(range(len(sizes) - 1, len(sizes) - 1 - k, -1))
    if chosen == newest:
        release_groups(s, chosen)
        assert s.resident_groups() == list(range(len(sizes) - k))
    else:
        with pytest.raises(FiloViolation):
            release_groups(s, chosen)
        assert s.resident_groups() == list(range(len(sizes)))
    extents = s.group_extents
    for (_, o1, n1), (_, o2, _) in zip(extents, extents[1:]):
        assert o2 >= o1 + n1
    assert s.param_region.allocated_watermark >= sum(n for _, _, n in extents)


ACTIONS = ["ree_submit", "tee_issue", "schedule", "interrupt", "ree_complete", "replay", "forge",
           "skip_ahead"]


@settings(max_examples=150)
@given(st.lists(st.sampled_from(ACTIONS), max_size=30))
def test_hostile_ree_cannot_break_sequence_discipline(actions):
    s = CoDriverSystem()
    shadows = []
    for act in actions:
        try:
            if act == "ree_submit":
                s.ree_submit(addresses=(0x1000,))
            elif act == "tee_issue":
                shadows.append(s.tee_issue_job(s.tee_init_job(4096)))
            elif act == "schedule":
                s.ree_schedule_next()
            elif act == "interrupt":
                s.secure_interrupt()
            elif act == "ree_complete":
                s.ree_complete()
            elif act == "replay" and shadows:
                s.dispatch_shadow(shadows[0])
            elif act == "forge":
                s.dispatch_shadow(ShadowJob(999, 12345, 0))
            elif act == "skip_ahead" and len(shadows) > 1:
                s.dispatch_shadow(shadows[-1])
        except CodriverError:
            pass
    launched = [r["seq"] for r in s.trace if r["event"] == "launch"]
    assert launched == list(range(len(launched)))
    assert register_invariant_holds(s.trace)
    assert dma_audit(s.device)


MK = bytes(KEY_SIZE)
RK = bytes([7]) * KEY_SIZE


@settings(max_examples=80)
@given(st.lists(st.binary(max_size=300), min_size=1, max_size=4), st.integers(1, 64), st.data())
def test_container_tamper_always_detected(blobs, chunk, data):
    tensors = [(f"t{i}", i, b) for i, b in enumerate(blobs)]
    blob = pack(tensors, MK, RK, chunk, checkpoint=data.draw(st.binary(max_size=50)),
                nonce_seed=b"prop")
    assert verify(blob, RK) == {n: chunk_count(len(b), chunk) for n, _, b in tensors}
    pos = data.draw(st.integers(0, len(blob) - 1))
    bad = bytearray(blob)
    bad[pos] ^= 1 << data.draw(st.integers(0, 7))
    # a flip anywhere in the file breaks the full load path
    with pytest.raises(ContainerError):
        key = unwrap_model_key(bytes(bad), RK)
        unpack_all(bytes(bad), key)
        read_checkpoint(bytes(bad), key)


@given(st.integers(0, 2**32))
def test_chain_graphs_scheduled_optimally(seed):
    from oracles import random_chain_graph
    from tzpipe.scheduler import brute_force_optimal
    from tzpipe.simcore import run_prefill
    g, n = random_chain_graph(random.Random(seed))
    d = [node.duration for node in g.nodes]
    hw = HardwareModel()
    opt = brute_force_optimal(g, hw, durations=d)
    assert opt == sum(d)
    assert run_prefill(g, hw, "GreedyPriorityNoPreempt", durations=d, setup_us=0).makespan == opt
