"""Scenario files: strict TOML schema, loading and execution.

A scenario names a bundled model, a baseline and a policy, plus optional
hardware overrides. Unknown keys are errors, as are missing required ones;
both are reported with the offending field and, where it can be found, the
line it sits on.
"""
from __future__ import annotations

import dataclasses
import json
import re
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .graph import build_graph
from .hardware import HardwareModel
from .models import MODELS, model_spec
from .scheduler import Variant
from .simcore import (BASELINES, cached_prefix, detect_bubbles, lower_bound_gap, run_decoding,
                      simulate_prefill)

# field -> (type, required, description)
SCHEMA = {
    "name": (str, True, "scenario name, used for the output directory"),
    "model": (str, True, "bundled model: " + ", ".join(MODELS)),
    "policy": (str, True, "scheduling policy: " + ", ".join(v.value for v in Variant)),
    "baseline": (str, True, "one of " + ", ".join(BASELINES)),
    "prompt_tokens": (int, False, "prompt length (default 128)"),
    "decode_tokens": (int, False, "generated tokens (default 16)"),
    "cached_fraction": (float, False, "fraction of parameter groups kept resident, 0..1 (default 0)"),
    "pressure": (float, False, "fraction of secure CMA pages held by movable data, 0..1 (default 1)"),
    "chunk_bytes": (int, False, "micro-operator size in bytes (default 33554432)"),
    "npu_sharing": (bool, False, "run NPU jobs through the co-driver protocol (default true)"),
    "seed": (int, False, "random seed (default 0)"),
    "hardware": (dict, False, "overrides for hardware constants"),
}
SWEEPABLE = ("cached_fraction", "prompt_tokens", "chunk_bytes", "pressure")
HARDWARE_FIELDS = {f.name: f.type for f in dataclasses.fields(HardwareModel)}


class ScenarioError(ValueError):
    """Schema or parse error; `field` and `line` locate it when known."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None,
                 source: str | None = None):
        self.field, self.line, self.source = field, line, source
        where = ":".join(str(x) for x in (source, line) if x is not None)
        super().__init__(f"{where}: {message}" if where else message)


class UnknownParameter(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    name: str
    model: str
    policy: str
    baseline: str
    prompt_tokens: int = 128
    decode_tokens: int = 16
    cached_fraction: float = 0.0
    pressure: float = 1.0
    chunk_bytes: int = 32 * 1024 * 1024
    npu_sharing: bool = True
    seed: int = 0
    hardware: dict = field(default_factory=dict)

    @property
    def run_id(self) -> str:
        return f"{self.name}-seed{self.seed}"

    def hardware_model(self) -> HardwareModel:
        return HardwareModel().replace(**self.hardware)

    def with_value(self, param: str, value) -> "Scenario":
        if param not in SWEEPABLE:
            raise UnknownParameter(f"{param!r} is not sweepable; choose from {', '.join(SWEEPABLE)}")
        kind = SCHEMA[param][0]
        out = dataclasses.replace(self, **{param: kind(value)})
        validate(dataclasses.asdict(out))
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _line_of(text: str | None, key: str) -> int | None:
    if not text:
        return None
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for i, line in enumerate(text.splitlines(), 1):
        if pat.match(line):
            return i
    return None


def validate(raw: dict, text: str | None = None, source: str | None = None) -> Scenario:
    def fail(msg, key):
        raise ScenarioError(msg, key, _line_of(text, key), source)

    for key in raw:
        if key not in SCHEMA:
            fail(f"unknown field {key!r}", key)
    for key, (kind, required, desc) in SCHEMA.items():
        if key not in raw:
            if required:
                raise ScenarioError(f"missing required field {key!r} ({desc})", key, None, source)
            continue
        value = raw[key]
        ok = isinstance(value, kind) and not (kind is int and isinstance(value, bool))
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            ok = True
        if not ok:
            fail(f"field {key!r} must be {kind.__name__}, got {type(value).__name__}", key)

    if raw["model"] not in MODELS:
        fail(f"unknown model {raw['model']!r}; expected one of {', '.join(MODELS)}", "model")
    if raw["policy"] not in {v.value for v in Variant}:
        fail(f"unknown policy {raw['policy']!r}", "policy")
    if raw["policy"] == Variant.BruteForceOptimal.value:
        fail("BruteForceOptimal is an oracle for small graphs, not a runnable policy", "policy")
    if raw["baseline"] not in BASELINES:
        fail(f"unknown baseline {raw['baseline']!r}", "baseline")
    for key in ("cached_fraction", "pressure"):
        if key in raw and not 0.0 <= raw[key] <= 1.0:
            fail(f"{key} must be within [0, 1], got {raw[key]}", key)
    for key in ("prompt_tokens", "chunk_bytes"):
        if key in raw and raw[key] <= 0:
            fail(f"{key} must be positive, got {raw[key]}", key)
    if raw.get("decode_tokens", 0) < 0:
        fail("decode_tokens must be >= 0", "decode_tokens")

    hw = raw.get("hardware", {})
    for key, value in hw.items():
        if key not in HARDWARE_FIELDS:
            fail(f"unknown hardware field {key!r}", key)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            fail(f"hardware field {key!r} must be a number", key)
    try:
        HardwareModel().replace(**hw)
    except (ValueError, TypeError) as e:
        raise ScenarioError(str(e), "hardware", _line_of(text, "[hardware]"), source) from None

    values = {k: (float(v) if SCHEMA[k][0] is float else v) for k, v in raw.items()}
    return Scenario(**values)


def loads(text: str, source: str | None = None) -> Scenario:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        m = re.search(r"line (\d+)", str(e))
        raise ScenarioError(f"parse error: {e}", None, int(m.group(1)) if m else None, source) from None
    return validate(raw, text, source)


def load(path) -> Scenario:
    p = Path(path)
    if not p.exists():
        bundled = bundled_path(str(path))
        if bundled is None:
            raise FileNotFoundError(f"no scenario file or bundled scenario named {path!r}")
        p = bundled
    return loads(p.read_text(encoding="utf-8"), str(p))


def bundled_dir() -> Path:
    return Path(str(resources.files("tzpipe") / "data" / "scenarios"))


def bundled_scenarios() -> list[str]:
    return sorted(p.stem for p in bundled_dir().glob("*.toml"))


def bundled_path(name: str) -> Path | None:
    p = bundled_dir() / (name if name.endswith(".toml") else name + ".toml")
    return p if p.exists() else None


# Execution -----------------------------------------------------------------

@dataclass
class RunResult:
    scenario: Scenario
    summary: dict
    trace: str
    memory: str
    timeline: object = field(repr=False, default=None)


def run(sc: Scenario, with_timeline: bool = False) -> RunResult:
    """Run prefill then decode; everything is a pure function of `sc`."""
    hw = sc.hardware_model()
    spec = model_spec(sc.model, sc.prompt_tokens)
    cg = build_graph(spec)
    cached = cached_prefix(cg, sc.cached_fraction) if sc.baseline == "TZLLM" else ()
    tl = simulate_prefill(cg, hw, sc.policy, baseline=sc.baseline, cached_groups=cached,
                          chunk_bytes=sc.chunk_bytes, occupancy=sc.pressure, seed=sc.seed)
    gap = lower_bound_gap(tl, hw)
    bubbles = detect_bubbles(tl)
    sharing = sc.npu_sharing and sc.baseline in ("TZLLM", "Strawman")
    decode = run_decoding(spec, hw, max(sc.decode_tokens, 1), npu_sharing=sharing,
                          cpu_only=sc.baseline == "Strawman")
    comps = tl.components
    summary = {
        "scenario": sc.name,
        "seed": sc.seed,
        "model": sc.model,
        "baseline": sc.baseline,
        "policy": tl.policy,
        "prompt_tokens": sc.prompt_tokens,
        "cached_fraction": sc.cached_fraction,
        "cached_groups": len(cached),
        "pressure": sc.pressure,
        "chunk_bytes": sc.chunk_bytes,
        "ttft_s": tl.ttft / 1e6,
        "cold_start_s": comps["cold_start_us"] / 1e6,
        "components_s": {k[:-3]: v / 1e6 for k, v in comps.items()},
        "prefill_makespan_s": tl.makespan / 1e6,
        "lower_bound_s": gap["lower_bound"] / 1e6,
        "lower_bound_gap": gap["gap"],
        "paths_s": {k: gap[k] / 1e6 for k in ("io_path", "cpu_path", "compute_path")},
        "bubble_count": len(bubbles),
        "decode_tokens": sc.decode_tokens,
        "decode_tokens_per_s": decode["tokens_per_second"],
        "switch_overhead_fraction": decode["switch_overhead_fraction"],
    }
    memory = "".join(json.dumps(r, sort_keys=True) + "\n" for r in tl.memory_trace)
    return RunResult(sc, summary, tl.to_trace(), memory, tl if with_timeline else None)
