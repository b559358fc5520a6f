"""Property suites with fixed seeds: lemmas, safety, smr."""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import casrpc
from .casrpc import Aborted, Reply
from .checker import DEFAULT_BUDGET, CheckConfig, explore
from .core import Abort, AcceptorState, Decide, pack, unpack
from .election import ConsensusNode, Detector
from .fabric import LatencyModel, SimFabric
from .node import Mutation
from .velos import DirectProposer, StreamlinedProposer

SUITES = ("lemmas", "safety", "smr", "all")


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""
    seconds: float = 0.0


@dataclass
class SuiteReport:
    name: str
    checks: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def add(self, name: str, fn: Callable[[], tuple[bool, str]]) -> Check:
        t = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"error: {exc!r}"
        c = Check(name, ok, detail, round(time.perf_counter() - t, 3))
        self.checks.append(c)
        return c

    def as_dict(self) -> dict:
        return {"suite": self.name, "ok": self.ok,
                "checks": [c.__dict__ for c in self.checks]}

    def text(self) -> str:
        lines = [f"[{'PASS' if c.ok else 'FAIL'}] {self.name}/{c.name}: {c.detail} ({c.seconds}s)"
                 for c in self.checks]
        return "\n".join(lines)


# -- randomized cas-rpc cases --------------------------------------------------

def random_state(rng: random.Random, hi: int = 12) -> AcceptorState:
    mp = rng.randrange(hi)
    ap = rng.randrange(mp + 1)
    return AcceptorState(mp, ap, None if ap == 0 else rng.randrange(4))


def random_input(rng: random.Random, spec: casrpc.RpcSpec, hi: int = 12):
    proposal = rng.randrange(1, hi + 1)
    return proposal if spec is casrpc.PREPARE_SPEC else (proposal, rng.randrange(4))


class _Bench:
    """One initiator and one target word on a zero-latency fabric."""

    def __init__(self):
        self.fabric = SimFabric(2, LatencyModel.zero(0.0))

    def set(self, state: AcceptorState):
        self.fabric.regions[1].words[0] = pack(state)

    def word(self) -> int:
        return self.fabric.regions[1].read(0)

    def call(self, spec, x, fetch=None, between=None):
        return casrpc.cas_rpc(self.fabric, 0, 1, 0, spec, x, fetch=fetch, between=between)


def casrpc_matches_rpc(cases: int = 100_000, seed: int = 1) -> tuple[bool, str]:
    """Non-aborting cas-rpc replies and final states match the atomic RPC."""
    rng = random.Random(seed)
    bench = _Bench()
    mismatches = 0
    per_spec = {"prepare": 0, "accept": 0}
    for i in range(cases):
        spec = casrpc.PREPARE_SPEC if i % 2 == 0 else casrpc.ACCEPT_SPEC
        state = random_state(rng)
        x = random_input(rng, spec)
        bench.set(state)
        got = bench.call(spec, x)
        want_state, want = casrpc.rpc(spec, x, state)
        if got is Aborted or got != want or unpack(bench.word()) != want_state:
            mismatches += 1
        per_spec[spec.name] += 1
    return mismatches == 0, f"{cases} cases {per_spec}, {mismatches} mismatches"


def abort_leaves_word(cases: int = 100_000, seed: int = 2) -> tuple[bool, str]:
    """Every Aborted cas-rpc leaves the word exactly as the interference left it."""
    rng = random.Random(seed)
    bench = _Bench()
    aborted = changed = 0
    for i in range(cases):
        spec = casrpc.PREPARE_SPEC if i % 2 == 0 else casrpc.ACCEPT_SPEC
        state = random_state(rng)
        x = random_input(rng, spec)
        bench.set(state)
        seen: list = []
        if rng.random() < 0.5:
            # concurrent update lands between fetch and CAS
            other = random_state(rng)

            def interfere(other=other):
                bench.set(other)
                seen.append(bench.word())

            got = bench.call(spec, x, between=interfere)
        else:
            # stale prediction instead of a fetch
            stale = random_state(rng)
            got = bench.call(spec, x, fetch=lambda stale=stale: pack(stale))
            seen.append(pack(state))
        if got is Aborted:
            aborted += 1
            if bench.word() != seen[-1]:
                changed += 1
    ok = changed == 0 and aborted > 0
    return ok, f"{cases} cases, {aborted} aborted, {changed} changed the word"


def solo_never_aborts(runs: int = 2000, seed: int = 3) -> tuple[bool, str]:
    """Solo schedules never abort: single cas-rpc calls and whole solo proposals."""
    rng = random.Random(seed)
    bench = _Bench()
    aborts = 0
    for i in range(runs * 10):
        spec = casrpc.PREPARE_SPEC if i % 2 == 0 else casrpc.ACCEPT_SPEC
        bench.set(random_state(rng))
        if bench.call(spec, random_input(rng, spec)) is Aborted:
            aborts += 1
    proposals = 0
    for i in range(runs):
        n = rng.choice([1, 3, 5])
        cls = DirectProposer if i % 2 == 0 else StreamlinedProposer
        fabric = SimFabric(n, LatencyModel(jitter=1.0), seed=seed * 7919 + i)
        p = cls(0, n, list(range(n)), 0).bind(fabric)

        class _Holder:
            pid = 0

            def on_complete(self, t, r):
                p.on_complete(t, r)

            def on_message(self, s, m):
                p.on_reply(s, m)

            def on_local_update(self, slot):
                pass

        fabric.attach(_Holder())
        p.propose(1)
        fabric.run(max_events=10_000)
        proposals += 1
        if p.outcomes != [Decide(1)]:
            aborts += 1
    return aborts == 0, f"{runs * 10} solo cas-rpc calls, {proposals} solo proposals, {aborts} aborts"


def streamlined_wrong_predictions(seed: int = 4) -> tuple[bool, str]:
    """A solo proposer starting from any wrong predictions decides within n+1 attempts."""
    pool = [AcceptorState(), AcceptorState(5, 0, None), AcceptorState(9, 4, 1), AcceptorState(2, 2, 3)]
    actual = [AcceptorState(7, 3, 2), AcceptorState(1, 0, None), AcceptorState(4, 4, 0)]
    n = 3
    worst = 0
    failures = 0
    combos = 0
    for a in pool:
        for b in pool:
            for c in pool:
                combos += 1
                fabric = SimFabric(n, LatencyModel(), seed=seed)
                for i, st in enumerate(actual):
                    fabric.regions[i].words[0] = pack(st)
                p = StreamlinedProposer(0, n, list(range(n)), 0, predicted=[a, b, c]).bind(fabric)
                p.retries = 10

                class _Holder:
                    pid = 0

                    def on_complete(self, t, r):
                        p.on_complete(t, r)

                    def on_message(self, s, m):
                        pass

                    def on_local_update(self, slot):
                        pass

                fabric.attach(_Holder())
                p.propose(1)
                fabric.run(max_events=100_000)
                used = len(p.outcomes)
                worst = max(worst, used)
                if not p.decided or used > n + 1:
                    failures += 1
    return failures == 0, f"{combos} prediction assignments, worst case {worst} attempts, {failures} over bound"


def run_lemmas(cases: int = 100_000) -> SuiteReport:
    rep = SuiteReport("lemmas")
    rep.add("equivalence", lambda: casrpc_matches_rpc(cases))
    rep.add("abort-leaves-word", lambda: abort_leaves_word(cases))
    rep.add("solo-never-aborts", lambda: solo_never_aborts(max(10, cases // 50)))
    rep.add("wrong-predictions-bound", streamlined_wrong_predictions)
    return rep


# -- safety via the checker ------------------------------------------------------

SAFETY_PROTOCOLS = ("refpaxos", "velos-direct", "velos-streamlined", "smr-single-slot")
MUTATION_PROTOCOLS = ("velos-streamlined", "velos-direct", "refpaxos")


def run_safety(budget: int = DEFAULT_BUDGET, attempts: int = 2, crashes: int = 1,
               protocols=SAFETY_PROTOCOLS, mutations: bool = True) -> SuiteReport:
    rep = SuiteReport("safety")
    for proto in protocols:
        def one(proto=proto):
            r = explore(CheckConfig(protocol=proto, attempts=attempts, crashes=crashes, budget=budget))
            s = r.summary()
            cover = "complete" if r.complete else "partial (budget reached)"
            return r.ok, (f"{s['states']} states, {s['explored_schedules']} explored schedules, {cover}, "
                          f"{s['violations']} violations {s['violation_kinds']}, outcomes {s['outcomes']}")
        rep.add(proto, one)
    if mutations:
        for proto in MUTATION_PROTOCOLS:
            for m in Mutation:
                if proto == "refpaxos" and m is Mutation.DROP_CAS_ABORT:
                    continue

                def mut(proto=proto, m=m):
                    r = explore(CheckConfig(protocol=proto, attempts=attempts, crashes=crashes, mutation=m,
                                            budget=budget, stop_on_first=True))
                    kinds = r.summary()["violation_kinds"]
                    return bool(kinds), f"found {kinds or 'nothing'} after {r.states} states"
                rep.add(f"{proto}+{m.value}", mut)
    return rep


# -- replicated log and election ---------------------------------------------------

def _scenario(**kw):
    from .scenarios import ScenarioConfig, run_scenario

    return run_scenario(ScenarioConfig(**kw))


def smr_random_schedules(seeds: int = 20) -> tuple[bool, str]:
    """Jittered latencies and a leader crash: logs agree and applied prefixes hash equal."""
    bad = []
    for s in range(seeds):
        r = _scenario(scenario="failover", seed=s, jitter=0.8, slots=60, crash_time=40.0 + s, trace=False)
        if not r.ok:
            bad.append((s, r.violations[:2]))
    return not bad, f"{seeds} seeds, {len(bad)} with problems {bad[:2]}"


def smr_amortized(slots: int = 2000) -> tuple[bool, str]:
    r = _scenario(scenario="common-case", seed=1, slots=slots, trace=False)
    crit = r.summary["critical_rounds_per_slot"]
    total = r.summary["cas_rounds_per_slot"]
    return r.ok and crit == 1.0 and total <= 2.0, f"critical {crit:.3f}/slot, total {total:.3f}/slot"


def smr_recovery(trials: int = 100) -> tuple[bool, str]:
    r = _scenario(scenario="recovery", seed=5, trials=trials)
    return r.ok and r.summary["recovered_fraction"] == 1.0, (
        f"{r.summary['decided_slots']} decided slots, {r.summary['recovered_slots']} recovered")


def smr_overflow() -> tuple[bool, str]:
    r = _scenario(scenario="overflow", seed=3, slots=100, trace=False)
    return r.ok, f"rpc-mode acceptors {r.summary['rpc_mode_acceptors']}, problems {r.violations[:2]}"


def smr_piggyback() -> tuple[bool, str]:
    r = _scenario(scenario="common-case", seed=2, slots=200, piggyback=True, trace=False)
    applied = r.summary["applied"]
    return r.ok and min(applied) >= 199, f"applied {applied}"


def consensus_under_churn(seeds: int = 20) -> tuple[bool, str]:
    """Consensus wrapper: a leader crash mid-run still yields one decision everywhere."""
    bad = []
    for s in range(seeds):
        rng = random.Random(s)
        fabric = SimFabric(3, LatencyModel(jitter=1.0), seed=s)
        Detector(fabric, 30.0)
        nodes = [ConsensusNode(i, 3, [0, 1, 2], [0, 1, 2], acceptor_role=True).bind(fabric) for i in range(3)]
        for node in nodes:
            node.propose(node.pid + 1)
        fabric.crash_at(0, rng.uniform(0.0, 3.0))
        fabric.run(max_events=200_000)
        values = {n.decision for n in nodes[1:]}
        if len(values) != 1 or None in values or not all(n.decided for n in nodes[1:]):
            bad.append(s)
    return not bad, f"{seeds} crash schedules, {len(bad)} without a unique decision"


def transient_leaders(seeds: int = 20) -> tuple[bool, str]:
    """Two processes lead until a stabilization time; aborts may occur, divergence may not."""
    bad = []
    aborts = 0
    for s in range(seeds):
        fabric = SimFabric(3, LatencyModel(jitter=1.0), seed=s)
        nodes = [ConsensusNode(i, 3, [0, 1, 2], [0, 1, 2], acceptor_role=True).bind(fabric) for i in range(3)]
        nodes[1].on_trust(1)
        for node in nodes:
            node.propose(node.pid + 1)
        fabric.call_at(1, 8.0, lambda: nodes[1].on_trust(0))
        fabric.run(max_events=200_000)
        aborts += sum(1 for n in nodes for o in n.abortable.outcomes if o is Abort)
        values = {n.decision for n in nodes}
        if len(values) != 1 or None in values:
            bad.append(s)
    return not bad, f"{seeds} runs, {aborts} aborts, {len(bad)} divergent or undecided"


def run_smr() -> SuiteReport:
    rep = SuiteReport("smr")
    rep.add("random-schedules", smr_random_schedules)
    rep.add("amortized-rounds", smr_amortized)
    rep.add("recoverability", smr_recovery)
    rep.add("overflow-fallback", smr_overflow)
    rep.add("piggyback", smr_piggyback)
    rep.add("consensus-churn", consensus_under_churn)
    rep.add("transient-leaders", transient_leaders)
    return rep


def run_suite(name: str, *, budget: int = DEFAULT_BUDGET, cases: int = 100_000) -> list[SuiteReport]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    out = []
    if name in ("lemmas", "all"):
        out.append(run_lemmas(cases))
    if name in ("safety", "all"):
        out.append(run_safety(budget))
    if name in ("smr", "all"):
        out.append(run_smr())
    return out
