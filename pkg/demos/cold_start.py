"""Where a cold start goes, and how much of it pipelining hides.

Runs the sequential baseline and the pipelined one on the 8B model with a
512-token prompt, then prints the restoration components next to TTFT.
"""
from tzpipe.experiments import cold_start_breakdown, prefill
from tzpipe.scenario import load


def main():
    parts = cold_start_breakdown()
    print("sequential restoration of llama3-8b (seconds)")
    for key in ("init_s", "alloc_s", "load_s", "decrypt_s"):
        print(f"  {key[:-2]:<8} {parts[key]:7.3f}")
    print(f"  {'total':<8} {parts['cold_start_s']:7.3f}")

    sc = load("tzllm-llama8b-p512")
    for frac in (0.0, sc.cached_fraction):
        tl, _, _ = prefill(sc, cached_fraction=frac)
        c = tl.components
        exposed = tl.ttft - c["compute_us"]
        print(f"\npipelined, {frac:.0%} of groups cached, pressure {sc.pressure}:")
        print(f"  TTFT {tl.ttft / 1e6:.3f} s, prefill compute {c['compute_us'] / 1e6:.3f} s")
        print(f"  restoration left on the critical path: {max(exposed, 0) / 1e6:.3f} s")


if __name__ == "__main__":
    main()
