import json

import pytest

from tzpipe.hardware import MIB
from tzpipe.npu_codriver import (DEFENSE_NAMES, BadContextAddress, CoDriverSystem, ContextOverflow,
                                 Defenses, DeviceMode, InvalidState, JobState, MmioFault,
                                 ReorderDetected, ReplayDetected, ShadowJob, UnauthorizedJob,
                                 attack_explore, dma_audit, format_report, register_invariant_holds)

WINDOW = (0x1_0000_0000, 64 * MIB)


def system(**kw):
    return CoDriverSystem(context_window=WINDOW, **kw)


def test_first_job_at_window_base():
    s = system()
    job = s.tee_init_job(4096)
    assert job.state == JobState.Initialized and job.context_addr == WINDOW[0]


def test_context_window_full():
    s = system()
    s.tee_init_job(WINDOW[1])
    with pytest.raises(ContextOverflow):
        s.tee_init_job(1)


def test_context_address_outside_allowlist_rejected_at_launch():
    s = system()
    job = s.tee_init_job(4096, addresses=(0x10,))
    shadow = s.tee_issue_job(job)
    with pytest.raises(BadContextAddress):
        s.dispatch_shadow(shadow)
    assert job.state == JobState.Rejected
    assert s.device.mode == DeviceMode.NonSecureIdle


def test_issue_assigns_seq_once():
    s = system()
    jobs = [s.tee_init_job(4096) for _ in range(3)]
    shadows = [s.tee_issue_job(j) for j in jobs]
    assert [j.seq for j in jobs] == [0, 1, 2]
    assert [sh.seq for sh in shadows] == [0, 1, 2]
    with pytest.raises(InvalidState):
        s.tee_issue_job(jobs[0])


def test_ree_job_then_shadow_in_queue_order():
    s = system()
    ree = s.ree_submit()
    job = s.tee_init_job(4096)
    s.tee_issue_job(job)
    assert s.ree_schedule_next() == "ree"
    assert s.device.current_origin == "REE"
    assert s.ree_schedule_next() == "shadow"
    # take-over waited for the REE job to finish
    assert ree.state == JobState.Complete
    assert job.state == JobState.Launched
    events = [r["event"] for r in s.trace]
    assert events.index("ree_complete") < events.index("grant_secure_memory")


def test_empty_queue_no_action():
    assert system().ree_schedule_next() is None


def test_out_of_order_dispatch_rejected():
    s = system()
    a, b = s.tee_init_job(4096), s.tee_init_job(4096)
    sa, sb = s.tee_issue_job(a), s.tee_issue_job(b)
    s.queue.clear()
    with pytest.raises(ReorderDetected):
        s.dispatch_shadow(sb)
    assert b.state == JobState.Rejected
    s.dispatch_shadow(sa)
    assert a.state == JobState.Launched


def test_replay_detected():
    s = system()
    job = s.tee_init_job(4096)
    shadow = s.tee_issue_job(job)
    s.queue.clear()
    s.dispatch_shadow(shadow)
    s.secure_interrupt()
    with pytest.raises(ReplayDetected):
        s.dispatch_shadow(shadow)


def test_fabricated_job_unauthorized():
    s = system()
    with pytest.raises(UnauthorizedJob):
        s.dispatch_shadow(ShadowJob(99, 42, 0))
    job = s.tee_init_job(4096)
    with pytest.raises(UnauthorizedJob):  # never issued
        s.dispatch_shadow(ShadowJob(0, job.job_id, 0))


def test_take_over_on_idle_device():
    s = system()
    s.tee_take_over()
    assert s.regs.snapshot() == (True, True, True)
    assert [r["event"] for r in s.trace] == ["secure_mmio_irq", "wait_nonsecure_idle",
                                            "grant_secure_memory"]
    assert s.device.mode == DeviceMode.SecureIdle


def test_ree_mmio_faults_after_take_over():
    s = system()
    ree = s.ree_submit()
    s.tee_take_over()
    with pytest.raises(MmioFault):
        s.ree_mmio_launch(ree)


def test_release_restores_non_secure_and_ree_continues():
    s = system()
    job = s.tee_init_job(4096)
    s.tee_issue_job(job)
    s.ree_schedule_next()
    assert s.regs.snapshot() == (True, True, True)
    s.secure_interrupt()
    assert s.regs.snapshot() == (False, False, False)
    assert s.device.mode == DeviceMode.NonSecureIdle
    nxt = s.ree_submit()
    assert s.ree_schedule_next() == "ree" and nxt.state == JobState.Launched


def test_secure_episode_dma_audit_and_register_invariant():
    s = system()
    s.ree_submit(addresses=(0x2000,))
    for _ in range(3):
        s.tee_issue_job(s.tee_init_job(4096))
    s.ree_submit(addresses=(0x3000,))
    while s.queue:
        kind = s.ree_schedule_next()
        if kind == "shadow":
            s.secure_interrupt()
        else:
            s.ree_complete()
    assert dma_audit(s.device)
    assert register_invariant_holds(s.trace)
    launched = [r["seq"] for r in s.trace if r["event"] == "launch"]
    assert launched == [0, 1, 2]


def test_swapped_ordering_breaks_register_invariant():
    s = system(defenses=Defenses.without("switch_ordering"))
    s.ree_mmio_launch(s.ree_submit())
    job = s.tee_init_job(4096)
    s.tee_issue_job(job)
    s.dispatch_shadow(s.queue.pop())
    assert not register_invariant_holds(s.trace)


def test_spurious_interrupt_dropped():
    s = system()
    assert s.secure_interrupt() is False
    assert s.trace[-1]["event"] == "spurious_interrupt_dropped"


def test_switch_accounting():
    s = system(switch_cost_us=40)
    s.run_secure_job()
    assert s.world_switches == 2 and s.switch_time_us == 80


def test_without_unknown_defense():
    with pytest.raises(ValueError):
        Defenses.without("firewall")


def test_full_defenses_no_violations():
    assert attack_explore(depth=12) == []


def test_seq_check_off_finds_reorder():
    found = attack_explore(depth=12, defenses=Defenses.without("seq_check"))
    assert any(v.predicate == "S2" for v in found)


def test_tzasc_first_finds_s3():
    found = attack_explore(depth=12, defenses=Defenses.without("switch_ordering"))
    assert any(v.predicate == "S3" for v in found)


@pytest.mark.parametrize("name", DEFENSE_NAMES)
def test_each_defense_is_necessary(name):
    assert attack_explore(depth=12, defenses=Defenses.without(name))


def test_violation_report_is_structured():
    found = attack_explore(depth=12, defenses=Defenses.without("load_checksum"))
    rec = json.loads(format_report(found).splitlines()[0])
    assert set(rec) == {"predicate", "component", "length", "steps"}
    assert rec["length"] == len(rec["steps"])
    # breadth-first: the first report is a shortest counterexample
    assert rec["length"] == min(len(v.steps) for v in found)


def test_exploration_bounds():
    with pytest.raises(ValueError):
        attack_explore(tee_jobs=4)
