"""How much caching is enough?

Sweeps the cached fraction for one model and marks the analytic threshold:
the smallest prefix for which restoring everything else fits under the
remaining compute.
"""
import sys

from tzpipe.experiments import caching_curve
from tzpipe.scenario import load


def main(name="tzllm-llama8b-p128"):
    c = caching_curve(load(name))
    full = c["ttft_us"][-1]
    print(f"{name}: {c['groups']} groups, threshold at {c['threshold']:.3f}")
    for f, t in zip(c["steps"], c["ttft_us"]):
        mark = "  <- beyond threshold" if f > c["threshold"] + 1e-9 else ""
        bar = "#" * int(40 * t / c["ttft_us"][0])
        print(f"  {f:4.0%}  {t / 1e6:8.3f} s  {100 * (t - full) / full:6.2f}%  {bar}{mark}")


if __name__ == "__main__":
    main(*sys.argv[1:])
