import pytest

from oracles import idle_while_ready
from tzpipe.experiments import fig5
from tzpipe.graph import (COMPUTE, CPU, IO, NPU, GraphBuilder, ModelSpec, OpSpec, TensorGroupSpec,
                          build_graph, critical_paths, insert_restoration_ops)
from tzpipe.hardware import MIB, HardwareModel
from tzpipe.models import fig5_hardware, fig5_spec, model_spec
from tzpipe.scheduler import Policy
from tzpipe.simcore import (TRACE_HEADER, DeadlockError, caching_threshold, cached_prefix,
                            calibrate_switch_cost, check_timeline, detect_bubbles, lower_bound_gap,
                            restoration_bound, run_decoding, run_prefill, simulate_prefill)

HW = HardwareModel()


def test_strawman_cold_start_components():
    cg = build_graph(model_spec("llama3-8b", 512))
    tl = simulate_prefill(cg, HW, baseline="Strawman", chunk_bytes=None)
    c = {k: v / 1e6 for k, v in tl.components.items()}
    assert c["init_us"] == 2.3
    assert c["alloc_us"] == pytest.approx(4.2, rel=0.1)
    assert c["load_us"] == pytest.approx(4.0, rel=0.1)
    assert c["decrypt_us"] == pytest.approx(0.9, rel=0.1)
    assert c["cold_start_us"] == pytest.approx(11.6, rel=0.1)
    assert tl.policy == "TopologicalFifo"


def test_all_cached_zero_init_ttft_is_compute_path():
    cg = build_graph(model_spec("tinyllama-1.1b", 32))
    ext = insert_restoration_ops(cg, [g.group_index for g in cg.groups])
    tl = run_prefill(ext, HW, setup_us=0)
    assert tl.ttft == critical_paths(ext, HW)["compute_path"]


def fig5_run(policy, cached=()):
    return simulate_prefill(build_graph(fig5_spec()), fig5_hardware(), policy,
                            cached_groups=cached, chunk_bytes=10 * MIB)


def start_of(tl, label):
    return min(iv.start for iv in tl.intervals if iv.label == label)


def test_fig5_extra_wait_before_npu_op0_only_under_fifo():
    fifo, greedy = fig5_run("TopologicalFifo"), fig5_run("GreedyPriority")
    # group 0 alone needs alloc + load + decrypt before op 0 may start
    own = sum(greedy.durations[n.nid] for n in greedy.graph.nodes
              if n.group == 0 and n.kind != COMPUTE)
    assert start_of(greedy, "C0") == own
    assert start_of(fifo, "C0") > own


def test_fig5_cached_prefix_bubble_blamed_on_decrypt2():
    tl = fig5_run("GreedyPriority", (0, 1))
    lane = next(iv.lane for iv in tl.intervals if iv.label == "C2")
    bubbles = [b for b in detect_bubbles(tl) if b.lane == lane]
    assert len(bubbles) == 1
    assert bubbles[0].blocking.split(".")[0] == "D2" and bubbles[0].blocked == "C2"
    assert start_of(tl, "C0") == 0  # the initial bubble is gone


def test_fig5_report_passes():
    assert fig5().passed


def test_packed_lane_has_no_bubbles():
    b = GraphBuilder()
    for i in range(3):
        b.add(f"C{i}", [f"C{i - 1}"] if i else [], kind=COMPUTE, hardware=CPU, assoc=i, duration=5)
    g = b.build(name="packed", groups=())
    assert detect_bubbles(run_prefill(g, HW, setup_us=0)) == []


def test_trailing_idle_is_not_a_bubble():
    b = GraphBuilder()
    b.add("C0", [], kind=COMPUTE, hardware=NPU, assoc=0, duration=3)
    b.add("C1", ["C0"], kind=COMPUTE, hardware=CPU, assoc=1, duration=10)
    tl = run_prefill(b.build(name="tail", groups=()), HW, setup_us=0)
    # the NPU stays idle after its last op; the CPU waits at the start
    assert [(x.lane, x.start, x.end) for x in detect_bubbles(tl)] == [("cpu0", 0, 3)]


class Idle(Policy):
    def pick(self, hw, queue):
        return None


def test_deadlock_when_nothing_can_run():
    b = GraphBuilder()
    b.add("C0", [], kind=COMPUTE, hardware=CPU, assoc=0, duration=3)
    with pytest.raises(DeadlockError, match="1 pending"):
        run_prefill(b.build(name="stuck", groups=()), HW, Idle(), setup_us=0)


def test_timelines_are_consistent_and_work_conserving():
    cg = build_graph(model_spec("qwen2.5-3b", 128))
    for pol in ("GreedyPriority", "GreedyPriorityNoPreempt", "TopologicalFifo"):
        for hw in (HW, HardwareModel(cpu_lanes=2)):
            tl = simulate_prefill(cg, hw, pol, cached_groups=cached_prefix(cg, 0.2), chunk_bytes=8 * MIB)
            assert check_timeline(tl) == []
            assert idle_while_ready(tl, {CPU: hw.cpu_lanes, NPU: 1, IO: 1}) == []
            assert tl.ttft >= lower_bound_gap(tl, hw)["lower_bound"]


def test_preemption_splits_but_never_shrinks():
    cg = build_graph(model_spec("tinyllama-1.1b", 128))
    tl = simulate_prefill(cg, HW, cached_groups=(), chunk_bytes=MIB)
    assert any(iv.resumed for iv in tl.intervals)
    assert any(e["event"] == "preempt" for e in tl.events)
    assert check_timeline(tl) == []


def test_trace_format():
    tl = fig5_run("GreedyPriority")
    rows = tl.to_trace().splitlines()
    assert rows[0] == TRACE_HEADER
    assert len(rows) == len(tl.intervals) + 1
    lane, op, kind, group, start, end, resumed = rows[1].split("\t")
    assert int(end) > int(start) >= 0 and resumed in ("0", "1")


def test_deterministic_trace():
    a = fig5_run("GreedyPriority").to_trace()
    b = fig5_run("GreedyPriority").to_trace()
    assert a == b


def test_memory_trace_follows_pipeline():
    cg = build_graph(fig5_spec())
    tl = simulate_prefill(cg, fig5_hardware(), chunk_bytes=10 * MIB)
    ops = [r["operation"] for r in tl.memory_trace]
    assert ops[0] == "extend_allocated" and "extend_protected" in ops
    times = [r["t_us"] for r in tl.memory_trace]
    assert times == sorted(times)
    assert all(r["protected"] <= r["allocated"] for r in tl.memory_trace)


def test_decode_zero_switch_cost_matches_exclusive():
    spec = model_spec("phi3-3.8b", 1)
    hw0 = HW.replace(npu_world_switch_cost=0)
    shared = run_decoding(spec, hw0, 8, npu_sharing=True)
    alone = run_decoding(spec, hw0, 8, npu_sharing=False)
    assert shared["tokens_per_second"] == alone["tokens_per_second"]
    assert shared["switch_overhead_fraction"] == 0


def test_bundled_switch_band():
    for name in ("tinyllama-1.1b", "qwen2.5-3b", "phi3-3.8b", "llama3-8b"):
        f = run_decoding(model_spec(name, 1), HW, 4)["switch_overhead_fraction"]
        assert 0.023 <= f <= 0.057, name


def npu_only_spec(npu_us, n=10):
    ops = tuple(OpSpec("mm", NPU, None, (i - 1,) if i else (), npu_us) for i in range(n))
    ops = ops + (OpSpec("mm", NPU, 0, (n - 1,), npu_us),)
    return ModelSpec("npu", 1, [TensorGroupSpec(0, MIB)], 1, {}, (), ops)


def test_doubling_npu_compute_halves_overhead():
    hw = HW.replace(npu_world_switch_cost=20)
    f1 = run_decoding(npu_only_spec(4000), hw, 4)["switch_overhead_fraction"]
    f2 = run_decoding(npu_only_spec(8000), hw, 4)["switch_overhead_fraction"]
    # per job: 2s of switching over c of compute -> 2s / (c + 2s)
    assert f1 == pytest.approx(40 / 4040)
    assert f2 == pytest.approx(40 / 8040)
    assert f2 / f1 == pytest.approx(0.5, rel=0.01)


def test_calibrated_switch_cost_gives_x_over_100_plus_x():
    spec = model_spec("llama3-8b", 1)
    for x in (2.0, 5.0, 10.0):
        s = calibrate_switch_cost(spec, HW, x)
        f = run_decoding(spec, HW.replace(npu_world_switch_cost=s), 2)["switch_overhead_fraction"]
        assert f == pytest.approx(x / (100 + x), abs=0.005)


def test_decode_world_switches_counted():
    spec = npu_only_spec(1000)
    r = run_decoding(spec, HW, 3)
    assert r["world_switches"] == 2 * 11 * 3


def test_threshold_bound_matches_full_cache():
    cg = build_graph(model_spec("llama3-8b", 128))
    n = len(cg.groups)
    bound, total = restoration_bound(cg, HW, n)
    assert bound == total
    f = caching_threshold(cg, HW)
    k = round(f * n)
    assert restoration_bound(cg, HW, k)[0] == total
    assert restoration_bound(cg, HW, k - 1)[0] > total


def test_cached_prefix_rounding():
    cg = build_graph(model_spec("tinyllama-1.1b"))
    assert cached_prefix(cg, 0.0) == []
    assert cached_prefix(cg, 0.5) == list(range(11))
    assert cached_prefix(cg, 1.0) == list(range(22))
    with pytest.raises(ValueError):
        cached_prefix(cg, 1.5)


def test_ree_baselines_have_no_setup():
    cg = build_graph(model_spec("tinyllama-1.1b", 32))
    flash = simulate_prefill(cg, HW, baseline="REE-Flash")
    mem = simulate_prefill(cg, HW, baseline="REE-Memory")
    assert flash.setup_us == mem.setup_us == 0
    assert {n.kind for n in flash.graph.restoration_nodes()} == {"load"}
    assert mem.ttft == critical_paths(mem.graph, HW)["compute_path"]
    with pytest.raises(ValueError):
        simulate_prefill(cg, HW, baseline="GPU")
