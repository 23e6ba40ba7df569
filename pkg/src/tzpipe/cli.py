"""Command-line entry point: `tzpipe run|sweep|figure|pack|verify|attack`.

Exit status is 0 on success, 1 when a check fails and 2 on usage or schema
errors.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import modelstore, scenario
from .npu_codriver import DEFENSE_NAMES, Defenses, attack_explore, format_report

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def write_atomic(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_run(result: scenario.RunResult, out: Path) -> Path:
    d = out / result.scenario.run_id
    write_atomic(d / "summary.json", _dump(result.summary))
    write_atomic(d / "trace.txt", result.trace)
    write_atomic(d / "memory.txt", result.memory)
    return d


def cmd_run(args) -> int:
    sc = scenario.load(args.scenario)
    if args.seed is not None:
        sc = scenario.validate({**sc.to_dict(), "seed": args.seed})
    res = scenario.run(sc)
    d = write_run(res, Path(args.out))
    s = res.summary
    print(f"{sc.name}: TTFT {s['ttft_s']:.3f} s (cold start {s['cold_start_s']:.3f} s), "
          f"lower-bound gap {100 * s['lower_bound_gap']:.2f}%, {s['bubble_count']} bubbles, "
          f"decode {s['decode_tokens_per_s']:.2f} tok/s")
    print(f"wrote {d}")
    return EXIT_OK


def parse_values(param: str, text: str) -> list:
    """Comma list, or start:stop:step (stop inclusive)."""
    kind = scenario.SCHEMA[param][0]
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            if step <= 0:
                raise ValueError("step must be positive")
            n = int(round((stop - start) / step))
            return [kind(round(start + i * step, 10)) for i in range(n + 1)]
        return [kind(float(x)) if kind is int else kind(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise UsageError(f"bad --values {text!r}: {e}") from None


def cmd_sweep(args) -> int:
    sc = scenario.load(args.scenario)
    if args.param not in scenario.SWEEPABLE:
        raise scenario.UnknownParameter(
            f"{args.param!r} is not sweepable; choose from {', '.join(scenario.SWEEPABLE)}")
    values = parse_values(args.param, args.values)
    points = [sc.with_value(args.param, v) for v in values]
    out = Path(args.out) / f"{sc.run_id}-sweep-{args.param}"

    def one(i_point):
        i, p = i_point
        res = scenario.run(p)
        write_atomic(out / f"point{i:03d}" / "summary.json", _dump(res.summary))
        return res.summary

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        rows = list(pool.map(one, enumerate(points)))
    lines = [f"{args.param}\tttft_s"] + [f"{v}\t{r['ttft_s']:.6f}" for v, r in zip(values, rows)]
    write_atomic(out / "plot.tsv", "\n".join(lines) + "\n")
    write_atomic(out / "table.json", _dump([{args.param: v, **r} for v, r in zip(values, rows)]))
    print(f"{args.param:>16}  {'ttft_s':>10}  {'gap_pct':>8}  {'tok/s':>8}")
    for v, r in zip(values, rows):
        print(f"{v!s:>16}  {r['ttft_s']:>10.4f}  {100 * r['lower_bound_gap']:>8.2f}  "
              f"{r['decode_tokens_per_s']:>8.2f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_figure(args) -> int:
    from .experiments import FIGURES

    rep = FIGURES[args.figure]()
    sys.stdout.write(rep.to_text())
    if args.out:
        d = Path(args.out) / args.figure
        write_atomic(d / "report.txt", rep.to_text())
        write_atomic(d / "report.json", rep.to_json())
    return EXIT_OK if rep.passed else EXIT_FAIL


def _root_key(args) -> bytes:
    try:
        return modelstore.load_root_key(args.root_key_file)
    except (LookupError, ValueError, OSError) as e:
        raise UsageError(str(e)) from None


def cmd_pack(args) -> int:
    root = _root_key(args)
    tensors = []
    for i, spec in enumerate(args.tensor):
        name, _, rest = spec.partition("=")
        group, sep, path = rest.partition(":")
        if not sep:
            group, path = str(i), rest
        if not name or not path:
            raise UsageError(f"bad --tensor {spec!r}; expected NAME=GROUP:PATH")
        tensors.append((name, int(group), Path(path).read_bytes()))
    checkpoint = Path(args.checkpoint).read_bytes() if args.checkpoint else b""
    model_key = bytes.fromhex(args.model_key) if args.model_key else os.urandom(modelstore.KEY_SIZE)
    seed = bytes.fromhex(args.nonce_seed) if args.nonce_seed else None
    blob = modelstore.pack(tensors, model_key, root, args.chunk_size, checkpoint, seed)
    write_atomic(Path(args.output), blob)
    print(f"packed {len(tensors)} tensors into {args.output} ({len(blob)} bytes)")
    return EXIT_OK


def cmd_verify(args) -> int:
    root = _root_key(args)
    data = Path(args.container).read_bytes()
    try:
        report = modelstore.verify(data, root)
    except modelstore.ContainerError as e:
        print(f"FAIL: {type(e).__name__}: {e}")
        return EXIT_FAIL
    for name, chunks in report.items():
        print(f"ok  {name}  {chunks} chunks")
    print(f"verified {len(report)} tensors")
    return EXIT_OK


def cmd_attack(args) -> int:
    try:
        defenses = Defenses().without(*args.disable)
    except ValueError as e:
        raise UsageError(str(e)) from None
    violations = attack_explore(depth=args.depth, defenses=defenses)
    text = format_report(violations)
    sys.stdout.write(text)
    off = ", ".join(args.disable) or "none"
    print(f"{len(violations)} violations at depth {args.depth} (disabled defenses: {off})")
    if args.out:
        write_atomic(Path(args.out) / "attack.txt", text)
    # a violation is the expected outcome when a defense is switched off
    return EXIT_FAIL if violations and not args.disable else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tzpipe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("scenario", help="scenario file or bundled scenario name")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", default="out")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a scenario over values of one parameter")
    s.add_argument("scenario")
    s.add_argument("--param", required=True, help="one of " + ", ".join(scenario.SWEEPABLE))
    s.add_argument("--values", required=True, help="comma list or start:stop:step")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", default="out")
    s.set_defaults(func=cmd_sweep)

    f = sub.add_parser("figure", help="reproduce a figure's structural claim")
    f.add_argument("figure", choices=["fig5", "fig9", "fig13", "fig14"])
    f.add_argument("--out")
    f.set_defaults(func=cmd_figure)

    k = sub.add_parser("pack", help="build an encrypted model container")
    k.add_argument("output")
    k.add_argument("--tensor", action="append", default=[], metavar="NAME=GROUP:PATH")
    k.add_argument("--checkpoint", help="init-state blob to embed")
    k.add_argument("--chunk-size", type=int, default=modelstore.DEFAULT_CHUNK_SIZE)
    k.add_argument("--model-key", help="hex model key (random when omitted)")
    k.add_argument("--nonce-seed", help="hex nonce seed for reproducible output")
    k.add_argument("--root-key-file")
    k.set_defaults(func=cmd_pack)

    v = sub.add_parser("verify", help="authenticate every chunk of a container")
    v.add_argument("container")
    v.add_argument("--root-key-file")
    v.set_defaults(func=cmd_verify)

    a = sub.add_parser("attack", help="explore the co-driver protocol for violations")
    a.add_argument("--depth", type=int, default=12)
    a.add_argument("--disable", action="append", default=[], choices=DEFENSE_NAMES)
    a.add_argument("--out")
    a.set_defaults(func=cmd_attack)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return args.func(args)
    except scenario.ScenarioError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (scenario.UnknownParameter, UsageError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
