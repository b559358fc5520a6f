import csv
import json
from pathlib import Path

import pytest

from velos.scenarios import SCENARIOS, ConfigError, MetricsRow, ScenarioConfig, run_scenario

GOLDEN = Path(__file__).parent / "golden"


def run(tmp_path, name="out", **kw):
    out = tmp_path / name
    return run_scenario(ScenarioConfig(**kw), out), out


def test_golden_metrics_and_trace(tmp_path):
    res, out = run(tmp_path, scenario="common-case", seed=1, slots=3)
    assert res.ok
    assert (out / "metrics.csv").read_text() == (GOLDEN / "common_case_metrics.csv").read_text()
    assert (out / "trace.jsonl").read_text() == (GOLDEN / "common_case_trace.jsonl").read_text()


def test_metrics_format(tmp_path):
    res, out = run(tmp_path, scenario="common-case", seed=3, slots=20)
    rows = list(csv.reader((out / "metrics.csv").open()))
    assert rows[0] == MetricsRow.HEADER
    body = rows[1:]
    assert [int(r[0]) for r in body] == list(range(20))
    decide = [float(r[3]) for r in body]
    assert decide == sorted(decide)
    header = json.loads((out / "trace.jsonl").read_text().splitlines()[0])
    assert header["kind"] == "HEADER"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["time_unit"].startswith("us-equivalent")


@pytest.mark.parametrize("name,extra", [
    ("common-case", {"slots": 50}),
    ("write-baseline", {"slots": 50}),
    ("failover", {"slots": 120, "crash_time": 60.0}),
    ("overflow", {"slots": 50}),
    ("recovery", {"trials": 5}),
])
def test_equal_seeds_byte_identical(tmp_path, name, extra):
    a, out_a = run(tmp_path, "a", scenario=name, seed=7, **extra)
    b, out_b = run(tmp_path, "b", scenario=name, seed=7, **extra)
    assert a.ok and b.ok
    files = sorted(p.name for p in out_a.iterdir())
    assert files == sorted(p.name for p in out_b.iterdir())
    for f in files:
        assert (out_a / f).read_bytes() == (out_b / f).read_bytes(), f


def test_different_seeds_differ_under_jitter(tmp_path):
    _, a = run(tmp_path, "a", scenario="common-case", seed=1, slots=30, jitter=0.5)
    _, b = run(tmp_path, "b", scenario="common-case", seed=2, slots=30, jitter=0.5)
    assert (a / "metrics.csv").read_bytes() != (b / "metrics.csv").read_bytes()


@pytest.mark.parametrize("kw,msg", [
    ({"scenario": "common-case"}, "seed"),
    ({"scenario": "common-case", "seed": 1, "n": 4}, "odd"),
    ({"scenario": "common-case", "seed": 1, "mode": "threaded"}, "threaded"),
    ({"scenario": "stress"}, "threaded"),
    ({"scenario": "nope", "seed": 1}, "unknown scenario"),
    ({"scenario": "common-case", "seed": 1, "piggyback": True, "indirection": False}, "indirection"),
])
def test_config_validation(kw, msg):
    with pytest.raises(ConfigError, match=msg):
        run_scenario(ScenarioConfig(**kw))


def test_unknown_config_key():
    with pytest.raises(ConfigError, match="unknown config key"):
        ScenarioConfig.from_mapping({"scenario": "common-case", "bogus": 1})


def test_zero_latency_is_local_overhead():
    res = run_scenario(ScenarioConfig(scenario="common-case", seed=1, slots=50, zero_latency=True, trace=False))
    assert res.summary["median_latency_us"] == pytest.approx(0.3)


def test_failover_summary_fields():
    res = run_scenario(ScenarioConfig(scenario="failover", seed=1, trace=False))
    assert res.ok
    s = res.summary
    assert s["new_leader"] == 1
    parts = s["breakdown_us"]
    assert sum(parts.values()) == pytest.approx(s["gap_us"])
    assert parts["detection"] == pytest.approx(30.0)


def test_failover_throughput_file(tmp_path):
    res, out = run(tmp_path, scenario="failover", seed=2, trace=False)
    rows = list(csv.reader((out / "throughput.csv").open()))
    assert rows[0][0].startswith("bucket")
    assert sum(int(r[-1]) for r in rows[1:]) == res.summary["decided"]


def test_scenario_catalog():
    assert set(SCENARIOS) == {"common-case", "write-baseline", "failover", "overflow", "recovery", "stress"}


def test_threaded_stress():
    res = run_scenario(ScenarioConfig(scenario="stress", mode="threaded", slots=60, seed=1))
    assert res.ok, res.violations
