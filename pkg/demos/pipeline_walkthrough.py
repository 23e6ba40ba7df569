"""Four operators, three policies: watch the NPU wait.

The model has four operators alternating NPU and CPU, each with its own
100 MiB parameter group. One unit is 100 ms. The charts print one row per
lane; letters are A(lloc), L(oad), D(ecrypt), C(ompute), dots are idle time.
"""
from tzpipe.graph import build_graph
from tzpipe.hardware import MIB
from tzpipe.models import fig5_hardware, fig5_spec
from tzpipe.simcore import detect_bubbles, simulate_prefill

UNIT = 100_000
STEP = UNIT // 2  # one character per half unit


def chart(tl):
    width = -(-tl.makespan // STEP)
    rows = {}
    for iv in tl.intervals:
        row = rows.setdefault(iv.lane, ["."] * width)
        for i in range(iv.start // STEP, -(-iv.end // STEP)):
            row[i] = iv.label[0]
    return "\n".join(f"  {lane:>5} |{''.join(rows[lane])}|" for lane in sorted(rows))


def main():
    cg, hw = build_graph(fig5_spec(UNIT)), fig5_hardware(UNIT)
    for cached in ((), (0, 1)):
        print(f"== cached groups: {list(cached) or 'none'} ==")
        for policy in ("TopologicalFifo", "GreedyPriorityNoPreempt", "GreedyPriority"):
            tl = simulate_prefill(cg, hw, policy, cached_groups=cached, chunk_bytes=10 * MIB)
            print(f"{policy}: makespan {tl.makespan / UNIT:.1f} units")
            print(chart(tl))
            for b in detect_bubbles(tl):
                if b.lane == "npu":
                    print(f"    npu idle {b.start / UNIT:.1f}-{b.end / UNIT:.1f}: "
                          f"{b.blocked} waits for {b.blocking}")
        print()


if __name__ == "__main__":
    main()
