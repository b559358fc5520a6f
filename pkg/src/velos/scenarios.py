"""Calibrated virtual-time experiments over the replicated log.

All times are virtual and reported in µs-equivalents. Outputs go to an
output directory: ``metrics.csv`` (one row per decided slot), ``trace.jsonl``
(fabric and protocol events), ``summary.json``, plus ``throughput.csv`` for
failover runs. Files are written with fixed float formatting so equal config
and seed give byte-identical outputs.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import random
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .core import majority, unpack
from .election import Detector
from .fabric import LatencyModel, SimFabric
from .smr import (NOT_DECIDED, PIGGYBACK_HEADER, OP_COLUMNS, Cluster, SmrConfig, build_cluster, recover_value,
                  threshold_defaults)

SCENARIOS = ("common-case", "write-baseline", "failover", "overflow", "recovery", "stress")
TIME_UNIT = "us-equivalent (virtual)"


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    scenario: str = "common-case"
    seed: Optional[int] = None
    n: int = 3
    slots: Optional[int] = None
    window: int = 16
    payload_size: int = 1
    indirection: bool = True
    piggyback: bool = False
    mode: str = "virtual"
    # latency model, one-way
    cas: float = 0.8
    write: float = 0.475
    read: float = 0.475
    msg: float = 1.0
    local_delay: float = 0.05
    local_overhead: float = 0.3
    jitter: float = 0.0
    zero_latency: bool = False
    # leader behaviour
    think_time: float = 0.5
    detection_delay: float = 30.0
    takeover_delay: float = 30.0
    cold_penalty: float = 1.0
    cold_decisions: int = 5
    crash_time: Optional[float] = None
    crash_pid: int = 0
    bucket: float = 100.0
    threshold_acceptors: tuple = ()
    trials: int = 1000
    trace: bool = True
    max_events: int = 50_000_000

    DEFAULT_SLOTS = {"common-case": 1000, "write-baseline": 1000, "failover": 200, "overflow": 200,
                     "recovery": 8, "stress": 200}

    @classmethod
    def from_mapping(cls, data: dict[str, Any]) -> "ScenarioConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in data.items():
            key = key.replace("-", "_")
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
            if key == "threshold_acceptors":
                if isinstance(value, int):
                    value = (value,)
                elif isinstance(value, str):
                    value = tuple(int(x) for x in value.replace(",", " ").split())
                value = tuple(value or ())
            kwargs[key] = value
        return cls(**kwargs)

    def resolved(self) -> "ScenarioConfig":
        cfg = dataclasses.replace(self)
        if cfg.slots is None:
            cfg.slots = self.DEFAULT_SLOTS.get(cfg.scenario, 100)
        if cfg.scenario == "failover" and cfg.crash_time is None:
            cfg.crash_time = 200.0
        if cfg.scenario == "overflow" and not cfg.threshold_acceptors:
            cfg.threshold_acceptors = (cfg.n - 1,)
        return cfg

    def validate(self) -> "ScenarioConfig":
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {', '.join(SCENARIOS)}")
        if self.mode not in ("virtual", "threaded"):
            raise ConfigError("mode must be 'virtual' or 'threaded'")
        if self.mode == "threaded" and self.scenario != "stress":
            raise ConfigError("threaded mode only runs the stress scenario (no virtual-time metrics)")
        if self.scenario == "stress" and self.mode != "threaded":
            raise ConfigError("the stress scenario needs --mode threaded")
        if self.mode == "virtual" and self.seed is None:
            raise ConfigError("a seed is mandatory in virtual mode")
        if self.n < 1:
            raise ConfigError("n must be positive")
        if self.n % 2 == 0:
            raise ConfigError("n must be odd")
        if self.slots is not None and self.slots < 1:
            raise ConfigError("slots must be positive")
        if self.scenario == "failover" and not 0 <= self.crash_pid < self.n:
            raise ConfigError("crash_pid out of range")
        try:
            self.smr().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def latency(self) -> LatencyModel:
        if self.zero_latency:
            return LatencyModel.zero(self.local_overhead)
        return LatencyModel(self.cas, self.write, self.read, self.msg, self.local_delay,
                            self.local_overhead, self.jitter)

    def smr(self) -> SmrConfig:
        return SmrConfig(
            n=self.n, window=self.window, slots=self.slots or 1, payload_size=self.payload_size,
            indirection=self.indirection, piggyback=self.piggyback,
            mode="write-baseline" if self.scenario == "write-baseline" else "velos",
            think_time=self.think_time, takeover_delay=self.takeover_delay,
            cold_penalty=self.cold_penalty, cold_decisions=self.cold_decisions,
            detection_delay=self.detection_delay, threshold_acceptors=tuple(self.threshold_acceptors),
        )

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["threshold_acceptors"] = list(self.threshold_acceptors)
        return d


@dataclass
class MetricsRow:
    slot: int
    leader: int
    start: float
    decide: float
    critical_rounds: int
    adopted: bool
    ops: tuple

    HEADER = ["slot", "leader", "start_us", "decide_us", "latency_us", "critical_rounds", "adopted"] + [
        f"{k.value.lower()}_issued" for k in OP_COLUMNS]

    def cells(self) -> list[str]:
        return [str(self.slot), str(self.leader), _f(self.start), _f(self.decide),
                _f(self.decide - self.start), str(self.critical_rounds), str(int(self.adopted))] + [
            str(x) for x in self.ops]


@dataclass
class ScenarioResult:
    scenario: str
    summary: dict
    violations: list = field(default_factory=list)
    files: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations

    def as_dict(self) -> dict:
        return {"scenario": self.scenario, "ok": self.ok, "summary": self.summary,
                "violations": self.violations, "files": self.files}


def _f(x: float) -> str:
    return f"{x:.6f}"


def _round(obj):
    if isinstance(obj, float):
        return round(obj, 6)
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(_round(data), indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _cluster(cfg: ScenarioConfig, *, trace: bool) -> Cluster:
    smr = cfg.smr()
    fabric = SimFabric(cfg.n, cfg.latency(), seed=cfg.seed, trace=trace,
                       default_words=threshold_defaults(smr))
    Detector(fabric, cfg.detection_delay)
    return build_cluster(smr, fabric, seed=cfg.seed)


def _metrics(cluster: Cluster) -> list[MetricsRow]:
    return [MetricsRow(r.slot, r.leader, r.start, r.decide, r.critical_rounds, r.adopted, r.ops)
            for r in cluster.leader_records()]


def _latency_stats(rows: list[MetricsRow]) -> dict:
    lat = [r.decide - r.start for r in rows]
    if not lat:
        return {"decided": 0}
    lat_sorted = sorted(lat)
    return {
        "decided": len(lat),
        "median_latency_us": statistics.median(lat),
        "mean_latency_us": statistics.fmean(lat),
        "p99_latency_us": lat_sorted[min(len(lat) - 1, int(0.99 * len(lat)))],
        "min_latency_us": lat_sorted[0],
        "max_latency_us": lat_sorted[-1],
    }


def _counter_stats(cluster: Cluster) -> dict:
    c = cluster.fabric.counters
    decided = max(1, len(cluster.leader_records()))
    return {
        "critical_rounds_per_slot": sum(c.critical_rounds) / decided,
        "cas_rounds_per_slot": sum(c.cas_rounds) / decided,
        "counters": c.export(),
    }


def _finish(cfg: ScenarioConfig, cluster: Cluster, out: Optional[Path], summary: dict,
            extra_files: Optional[dict] = None) -> ScenarioResult:
    problems = cluster.audit()
    rows = _metrics(cluster)
    summary = dict(summary)
    summary["time_unit"] = TIME_UNIT
    summary["audit"] = problems or "ok"
    summary["applied"] = [r.applied for r in cluster.replicas]
    summary["rpc_mode_acceptors"] = sorted(r.pid for r in cluster.replicas if r.acceptor.mode == "rpc")
    summary["config"] = cfg.as_dict()
    files = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "metrics.csv", MetricsRow.HEADER, [r.cells() for r in rows])
        files["metrics"] = str(out / "metrics.csv")
        if cfg.trace:
            cluster.fabric.dump_trace(out / "trace.jsonl")
            files["trace"] = str(out / "trace.jsonl")
        for name, (header, body) in (extra_files or {}).items():
            _write_csv(out / name, header, body)
            files[name.split(".")[0]] = str(out / name)
        _write_json(out / "summary.json", summary)
        files["summary"] = str(out / "summary.json")
    return ScenarioResult(cfg.scenario, _round(summary), problems, files)


def run_common_case(cfg: ScenarioConfig, out: Optional[Path] = None) -> ScenarioResult:
    cluster = _cluster(cfg, trace=cfg.trace and out is not None)
    cluster.fabric.run(max_events=cfg.max_events)
    rows = _metrics(cluster)
    summary = {**_latency_stats(rows), **_counter_stats(cluster)}
    summary["decision_period_us"] = _period(rows)
    return _finish(cfg, cluster, out, summary)


def _period(rows: list[MetricsRow]) -> Optional[float]:
    gaps = [b.decide - a.decide for a, b in zip(rows, rows[1:]) if a.leader == b.leader]
    return statistics.median(gaps) if gaps else None


def run_failover(cfg: ScenarioConfig, out: Optional[Path] = None) -> ScenarioResult:
    cluster = _cluster(cfg, trace=cfg.trace and out is not None)
    fabric = cluster.fabric
    crash_t = cfg.crash_time
    fabric.crash_at(cfg.crash_pid, crash_t)
    fabric.run(max_events=cfg.max_events)
    replicas = cluster.replicas
    survivors = [r for r in replicas if r.pid != cfg.crash_pid]
    new = next((r for r in survivors if r.active), None)
    # the observer is a surviving replica that does not lead after the crash
    observer = next((r for r in reversed(survivors) if r is not new), new)
    rows = _metrics(cluster)
    summary: dict = {**_latency_stats(rows), "crash_time_us": crash_t, "crashed": cfg.crash_pid,
                     "observer": None if observer is None else observer.pid,
                     "new_leader": None if new is None else new.pid}
    buckets_body = []
    problems_extra = []
    if observer is not None:
        learned = sorted(observer.learned_at.values())
        end = max(learned) if learned else 0.0
        nb = int(end // cfg.bucket) + 1
        counts = [0] * nb
        for t in learned:
            counts[int(t // cfg.bucket)] += 1
        for i, c in enumerate(counts):
            buckets_body.append([_f(i * cfg.bucket), _f((i + 1) * cfg.bucket), str(c)])
        steady = [counts[i] for i in range(nb) if (i + 1) * cfg.bucket <= crash_t]
        summary["throughput_per_bucket"] = counts
        summary["steady_throughput_per_100us"] = (
            statistics.fmean(steady) * 100.0 / cfg.bucket if steady else None)
        pre = [r for r in rows if r.leader == cfg.crash_pid]
        summary["decision_period_us"] = _period(pre)
    if new is not None and observer is not None:
        fresh = [r for r in new.records if r.slot in observer.learned_at
                 and observer.learned_at[r.slot] > crash_t]
        if fresh:
            first = min(fresh, key=lambda r: observer.learned_at[r.slot])
            seen = observer.learned_at[first.slot]
            summary["gap_us"] = seen - crash_t
            summary["first_new_slot"] = first.slot
            summary["breakdown_us"] = {
                "detection": new.trusted_at - crash_t,
                "takeover": new.active_at - new.trusted_at,
                "re_prepare": (new.first_prepared_at or new.active_at) - new.active_at,
                "accept": first.decide - (new.first_prepared_at or new.active_at),
                "learn": seen - first.decide,
            }
        else:
            problems_extra.append("no decision after the crash")
    else:
        problems_extra.append("no new leader took over")
    summary.update(_counter_stats(cluster))
    res = _finish(cfg, cluster, out, summary,
                  {"throughput.csv": (["bucket_start_us", "bucket_end_us", "decisions"], buckets_body)})
    res.violations.extend(problems_extra)
    return res


def run_overflow(cfg: ScenarioConfig, out: Optional[Path] = None) -> ScenarioResult:
    res = run_common_case(cfg, out)
    want = sorted(cfg.threshold_acceptors)
    got = res.summary["rpc_mode_acceptors"]
    if not set(want) <= set(got):
        res.violations.append(f"acceptors {want} expected in RPC mode, found {got}")
    if res.summary.get("decided", 0) < cfg.slots:
        res.violations.append(f"only {res.summary.get('decided', 0)} of {cfg.slots} slots decided")
    return res


def recovery_trial(cfg: ScenarioConfig, seed: int) -> dict:
    """Crash the leader right after some slot's accept reached a majority, then recover every decided slot."""
    rng = random.Random(seed)
    trial = dataclasses.replace(cfg, seed=seed, jitter=cfg.jitter or 0.5, trace=False)
    cluster = _cluster(trial, trace=False)
    fabric = cluster.fabric
    leader = cluster.replicas[0]
    target = rng.randrange(trial.slots)
    extra = rng.uniform(0.0, 1.5)
    q = majority(trial.n)
    bits = trial.smr().value_bits

    def accepted_at_majority() -> bool:
        hits = 0
        for a in range(trial.n):
            st = unpack(fabric.regions[a].read(target), bits)
            if st.accepted_proposal > 0 and st.accepted_value == leader.pid:
                hits += 1
        return hits >= q

    fabric.run(predicate=accepted_at_majority, max_events=cfg.max_events)
    crash_at = fabric.now() + extra
    fabric.crash_at(leader.pid, crash_at)
    fabric.run(max_events=cfg.max_events)
    survivors = [r for r in cluster.replicas if r.pid != leader.pid]
    decided: dict[int, int] = {target: leader.pid}
    for r in survivors:
        decided.update(r.decided)
    for r in cluster.replicas:
        for rec in r.records:
            decided.setdefault(rec.slot, rec.leader)
    failures = []
    reader = survivors[-1]
    for slot, writer in sorted(decided.items()):
        want = cluster.workload.requests[cluster.workload.history[(slot, writer)]]
        got = recover_value(fabric, reader, slot)
        if cfg.piggyback and isinstance(got, bytes):
            got = got[PIGGYBACK_HEADER:]
        if got is NOT_DECIDED or got != want:
            failures.append(f"seed {seed} slot {slot}: recovered {got!r}, wanted {want!r}")
    return {"seed": seed, "target": target, "crash_at": crash_at, "slots": len(decided),
            "failures": failures, "audit": cluster.audit()}


def run_recovery(cfg: ScenarioConfig, out: Optional[Path] = None) -> ScenarioResult:
    rows = []
    violations = []
    recovered = 0
    for i in range(cfg.trials):
        r = recovery_trial(cfg, cfg.seed * 100_003 + i)
        recovered += r["slots"] - len(r["failures"])
        violations.extend(r["failures"])
        violations.extend(f"seed {r['seed']}: {p}" for p in r["audit"])
        rows.append([str(r["seed"]), str(r["target"]), _f(r["crash_at"]), str(r["slots"]),
                     str(len(r["failures"]))])
    total = sum(int(row[3]) for row in rows)
    summary = {"trials": cfg.trials, "decided_slots": total, "recovered_slots": recovered,
               "recovered_fraction": recovered / total if total else 1.0, "time_unit": TIME_UNIT,
               "config": cfg.as_dict()}
    files = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "metrics.csv", ["seed", "crash_slot", "crash_us", "decided_slots", "failures"], rows)
        _write_json(out / "summary.json", summary)
        files = {"metrics": str(out / "metrics.csv"), "summary": str(out / "summary.json")}
    return ScenarioResult("recovery", _round(summary), violations, files)


def run_stress(cfg: ScenarioConfig, out: Optional[Path] = None) -> ScenarioResult:
    from .threaded import run_stress as stress

    summary = stress(cfg.n, cfg.slots, cfg.seed or 0)
    violations = list(summary.pop("violations"))
    if not summary["finished"]:
        violations.append("stress run did not finish before the timeout")
    if not summary["counters_sane"]:
        violations.append("counters: completed exceeds issued")
    summary["config"] = cfg.as_dict()
    files = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "summary.json", summary)
        files = {"summary": str(out / "summary.json")}
    return ScenarioResult("stress", summary, violations, files)


RUNNERS = {
    "common-case": run_common_case,
    "write-baseline": run_common_case,
    "failover": run_failover,
    "overflow": run_overflow,
    "recovery": run_recovery,
    "stress": run_stress,
}


def run_scenario(cfg: ScenarioConfig, out_dir=None) -> ScenarioResult:
    cfg = cfg.resolved().validate()
    out = None if out_dir is None else Path(out_dir)
    return RUNNERS[cfg.scenario](cfg, out)
