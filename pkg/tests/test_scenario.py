import pytest

from tzpipe.scenario import (SCHEMA, Scenario, ScenarioError, UnknownParameter, bundled_scenarios,
                             load, loads, run, validate)

BASE = """
name = "t"
model = "tinyllama-1.1b"
policy = "GreedyPriority"
baseline = "TZLLM"
"""


def test_defaults():
    sc = loads(BASE)
    assert sc == Scenario("t", "tinyllama-1.1b", "GreedyPriority", "TZLLM")
    assert sc.run_id == "t-seed0"


def test_missing_required_field_named():
    text = BASE.replace('policy = "GreedyPriority"\n', "")
    with pytest.raises(ScenarioError) as e:
        loads(text)
    assert e.value.field == "policy" and "policy" in str(e.value)


def test_unknown_field_with_line():
    with pytest.raises(ScenarioError) as e:
        loads(BASE + "colour = 3\n")
    assert e.value.field == "colour" and e.value.line == 6


@pytest.mark.parametrize("extra,field", [
    ('prompt_tokens = "many"', "prompt_tokens"),
    ("cached_fraction = 1.5", "cached_fraction"),
    ("pressure = -0.1", "pressure"),
    ("chunk_bytes = 0", "chunk_bytes"),
    ("npu_sharing = 1", "npu_sharing"),
    ("[hardware]\nwarp_drive = 1", "warp_drive"),
    ("[hardware]\nio_throughput = 0", "hardware"),
])
def test_bad_values(extra, field):
    with pytest.raises(ScenarioError) as e:
        loads(BASE + extra + "\n")
    assert e.value.field == field


@pytest.mark.parametrize("key,value", [("model", "gpt-5"), ("baseline", "GPU"),
                                       ("policy", "Random"), ("policy", "BruteForceOptimal")])
def test_unknown_names(key, value):
    raw = {**loads(BASE).to_dict(), key: value}
    with pytest.raises(ScenarioError, match=key):
        validate(raw)


def test_parse_error_has_line():
    with pytest.raises(ScenarioError) as e:
        loads(BASE + "x = = 1\n")
    assert e.value.line == 6


def test_int_accepted_for_float():
    assert loads(BASE + "cached_fraction = 1\n").cached_fraction == 1.0


def test_with_value():
    sc = loads(BASE)
    assert sc.with_value("prompt_tokens", 32).prompt_tokens == 32
    with pytest.raises(UnknownParameter):
        sc.with_value("color", 1)
    with pytest.raises(ScenarioError):
        sc.with_value("cached_fraction", 2.0)


def test_schema_descriptions():
    assert all(desc for _, _, desc in SCHEMA.values())


def test_bundled_scenarios_load():
    names = bundled_scenarios()
    assert "strawman-llama8b" in names and len(names) == 15
    for n in names:
        assert load(n).name == n


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load("no-such-scenario")


def test_run_is_pure():
    sc = load("tzllm-tinyllama-p32")
    a, b = run(sc), run(sc)
    assert a.summary == b.summary and a.trace == b.trace and a.memory == b.memory
    assert a.summary["cached_groups"] == 4


def test_ree_scenarios_skip_sharing():
    s = run(load("ree-memory-llama8b")).summary
    assert s["switch_overhead_fraction"] == 0
    assert s["components_s"]["init"] == 0
