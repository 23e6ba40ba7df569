"""Bundled synthetic model specs and the helper that derives their duration tables.

Per-operator durations are not measured; they are spread from whole-model
aggregates. For a model of `gb` gigabytes:

* one decode step (prompt of 1) takes ``decode_base + decode_per_gb * gb`` seconds;
* a prefill of T tokens takes that plus ``T * prefill_per_token_8b * gb / 7.9`` seconds;
* a fixed share runs on the CPU, the rest on the NPU;
* CPU-only execution (the sequential baseline) scales NPU work so that the
  whole pass is `npu_prefill_speedup` (prefill) or `npu_decode_speedup`
  (decode) times slower than the NPU-assisted one.
"""
from __future__ import annotations

from dataclasses import dataclass

from .graph import COMPUTE, CPU, NPU, ModelSpec, OpSpec, OpTemplate, TensorGroupSpec
from .hardware import GB, MB, MIB, US_PER_S

PROMPT_BUCKETS = (1, 32, 128, 512)
LAYER_OPS = (
    OpTemplate("attn_norm", CPU),
    OpTemplate("qkv_proj", NPU, uses_params=True),
    OpTemplate("attention", CPU),
    OpTemplate("out_proj", NPU, uses_params=True),
    OpTemplate("ffn_norm", CPU),
    OpTemplate("ffn", NPU, uses_params=True),
)
# share of a layer's CPU (resp. NPU) time taken by each operator
OP_SPLIT = {
    "attn_norm": 0.2, "attention": 0.6, "ffn_norm": 0.2,
    "qkv_proj": 0.25, "out_proj": 1 / 12, "ffn": 2 / 3,
}


@dataclass(frozen=True)
class Calibration:
    decode_base_s: float = 0.061
    decode_per_gb_s: float = 0.029
    prefill_per_token_8b_s: float = 0.02502
    prefill_cpu_share: float = 0.25
    decode_cpu_share: float = 0.4
    npu_prefill_speedup: float = 12.5
    npu_decode_speedup: float = 1.3

    def pass_seconds(self, gb: float, tokens: int) -> float:
        decode = self.decode_base_s + self.decode_per_gb_s * gb
        if tokens <= 1:
            return decode
        return decode + tokens * self.prefill_per_token_8b_s * gb / 7.9

    def cpu_share(self, tokens: int) -> float:
        return self.decode_cpu_share if tokens <= 1 else self.prefill_cpu_share

    def npu_slowdown_on_cpu(self, tokens: int) -> float:
        """Factor applied to NPU work when it runs on the CPU instead."""
        share = self.cpu_share(tokens)
        speedup = self.npu_decode_speedup if tokens <= 1 else self.npu_prefill_speedup
        return (speedup - share) / (1 - share)


@dataclass(frozen=True)
class ModelProfile:
    name: str
    param_gb: float
    layers: int
    kv_bytes_per_token: int

    @property
    def param_bytes(self) -> int:
        return int(round(self.param_gb * GB))


MODELS = {
    "tinyllama-1.1b": ModelProfile("tinyllama-1.1b", 1.0, 22, 22_528),
    "qwen2.5-3b": ModelProfile("qwen2.5-3b", 3.3, 36, 36_864),
    "phi3-3.8b": ModelProfile("phi3-3.8b", 3.7, 32, 393_216),
    "llama3-8b": ModelProfile("llama3-8b", 7.9, 32, 131_072),
}
DEFAULT_FIXED_BYTES = 256 * MB


def derive_durations(profile: ModelProfile, calibration: Calibration = Calibration(),
                     buckets=PROMPT_BUCKETS) -> tuple[dict, dict]:
    """Per-op durations (µs) keyed (kind, hardware, bucket), plus CPU-only ones."""
    durations, cpu_durations = {}, {}
    for t in buckets:
        total = calibration.pass_seconds(profile.param_gb, t) * US_PER_S
        share = calibration.cpu_share(t)
        cpu_layer = total * share / profile.layers
        npu_layer = total * (1 - share) / profile.layers
        slow = calibration.npu_slowdown_on_cpu(t)
        for op in LAYER_OPS:
            if op.hardware == CPU:
                durations[(op.kind, CPU, t)] = max(1, round(cpu_layer * OP_SPLIT[op.kind]))
            else:
                d = npu_layer * OP_SPLIT[op.kind]
                durations[(op.kind, NPU, t)] = max(1, round(d))
                cpu_durations[(op.kind, CPU, t)] = max(1, round(d * slow))
    return durations, cpu_durations


def model_spec(name: str, prompt_tokens: int = 128, calibration: Calibration = Calibration()) -> ModelSpec:
    try:
        profile = MODELS[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; bundled: {', '.join(MODELS)}") from None
    durations, cpu_durations = derive_durations(profile, calibration)
    spec = ModelSpec.uniform(profile.name, profile.layers, profile.param_bytes, LAYER_OPS,
                             {**durations, **cpu_durations}, prompt_tokens)
    return spec


def fig5_spec(unit_us: int = 100_000) -> ModelSpec:
    """Four-operator pipeline with alternating NPU and CPU compute, one group each.

    Durations are in abstract units; pair it with `fig5_hardware` so that an
    alloc, load and decrypt of one group take 1, 2.5 and 1 units.
    """
    hw_of = [NPU, CPU, NPU, CPU]
    width = [2, 2, 2, 2]
    ops = tuple(OpSpec(COMPUTE, hw_of[i], i, (i - 1,) if i else (), width[i] * unit_us)
                for i in range(4))
    groups = [TensorGroupSpec(i, FIG5_GROUP_BYTES) for i in range(4)]
    return ModelSpec("fig5", 4, groups, 0, {}, (), ops)


FIG5_GROUP_BYTES = 100 * MIB


def fig5_hardware(unit_us: int = 100_000):
    from .hardware import HardwareModel

    per_unit = FIG5_GROUP_BYTES * US_PER_S / unit_us  # bytes/s that moves one group per unit
    return HardwareModel(io_throughput=per_unit / 2.5, decrypt_throughput=per_unit,
                         cma_migration_throughput_pressured=per_unit,
                         cma_migration_throughput_multi=2 * per_unit)
