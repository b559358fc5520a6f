"""Bounded exhaustive exploration of protocol interleavings.

Every non-deterministic choice of the fabric is a branch: which link head is
applied at its target, which response is delivered to its initiator, and
(optionally) which process crashes. Worlds are hashed so interleavings that
reach the same global state are explored once; commuting operations on
distinct words therefore collapse into one state. The number of maximal
schedules covered is still counted exactly (paths through the state DAG).

Safety is checked in every reached state: agreement, validity, integrity and
monotonicity of every acceptor word.

The budget caps explored schedules: root-to-leaf paths of the search, where a
leaf is a terminal state, a violating state, or a state whose subtree was
already covered. Hitting it yields an explicitly partial report.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field
from typing import Optional

from .core import AcceptorState, Decide, fallback_threshold, pack, unpack
from .fabric import ChoiceFabric, OpKind
from .node import Mutation, Node
from .refpaxos import Acceptor, RefProposer
from .velos import DirectProposer, StreamlinedProposer

PROTOCOLS = ("refpaxos", "velos-direct", "velos-streamlined", "smr-single-slot")
DEFAULT_BUDGET = 5_000_000


class BudgetExceeded(RuntimeError):
    pass


@dataclass
class CheckConfig:
    protocol: str = "velos-streamlined"
    proposers: int = 2
    acceptors: int = 3
    attempts: int = 2
    crashes: int = 1
    mutation: Optional[Mutation] = None
    budget: int = DEFAULT_BUDGET
    # acceptors whose words start at the CAS fallback threshold
    threshold_acceptors: tuple = ()
    stop_on_first: bool = False
    max_violations: int = 10

    def validate(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if not (1 <= self.proposers <= 2 and 1 <= self.acceptors <= 3 and 1 <= self.attempts <= 2
                and 0 <= self.crashes <= 1):
            raise ValueError("config outside the bounded envelope "
                             "(proposers<=2, acceptors<=3, attempts<=2, crashes<=1)")


@dataclass
class Violation:
    kind: str
    detail: str
    witness: list

    def as_dict(self):
        return {"kind": self.kind, "detail": self.detail, "witness": [list(e) for e in self.witness]}


@dataclass
class Report:
    protocol: str
    config: dict
    states: int = 0
    explored: int = 0
    transitions: int = 0
    terminal_states: int = 0
    schedules: int = 0
    complete: bool = True
    stopped: bool = False
    violations: list = field(default_factory=list)
    outcomes: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> dict:
        return {
            "protocol": self.protocol, "states": self.states, "explored_schedules": self.explored,
            "transitions": self.transitions,
            "terminal_states": self.terminal_states, "schedules": self.schedules,
            "complete": self.complete, "stopped_at_first_violation": self.stopped, "violations": len(self.violations),
            "violation_kinds": sorted({v.kind for v in self.violations}),
            "outcomes": dict(sorted(self.outcomes.items())), "seconds": round(self.seconds, 3),
        }

    def _coverage(self) -> str:
        if self.stopped:
            return "PARTIAL (stopped at first violation)"
        return "complete" if self.complete else "PARTIAL (budget exceeded)"

    def text(self) -> str:
        s = self.summary()
        lines = [f"protocol        {s['protocol']}",
                 f"states          {s['states']}",
                 f"transitions     {s['transitions']}",
                 f"explored        {s['explored_schedules']}",
                 f"terminal states {s['terminal_states']}",
                 f"schedules       {s['schedules']}",
                 f"coverage        {self._coverage()}",
                 f"outcomes        {s['outcomes']}",
                 f"violations      {s['violations']} {s['violation_kinds']}"]
        for v in self.violations[:3]:
            lines.append(f"  {v.kind}: {v.detail} (witness {len(v.witness)} events)")
        return "\n".join(lines)


def payload_of(pid: int) -> bytes:
    return f"request-from-{pid}".encode()


class World:
    def __init__(self, cfg: CheckConfig, trace: bool = False):
        cfg.validate()
        self.cfg = cfg
        n_procs = max(cfg.proposers, cfg.acceptors)
        self.n_procs = n_procs
        acceptors = list(range(cfg.acceptors))
        threshold_word = pack(AcceptorState(fallback_threshold(n_procs)))
        defaults = {a: threshold_word for a in cfg.threshold_acceptors}
        self.fabric = ChoiceFabric(n_procs, default_words=defaults, trace=trace)
        self.inputs = {p: p for p in range(cfg.proposers)}
        self.crashes_used = 0
        self.violations: list = []
        self.nodes = []
        proto = cfg.protocol
        for pid in range(n_procs):
            prop = acc = None
            if pid < cfg.proposers:
                cls = {"refpaxos": RefProposer, "velos-direct": DirectProposer}.get(proto, StreamlinedProposer)
                prop = cls(pid, n_procs, acceptors, 0, mutation=cfg.mutation)
                prop.retries = cfg.attempts - 1
                if proto == "smr-single-slot":
                    prop.payload = payload_of(pid)
            if pid < cfg.acceptors:
                if proto == "refpaxos":
                    acc = Acceptor(pid, n_procs, "rpc", mutation=cfg.mutation, strict=False)
                elif proto == "smr-single-slot":
                    acc = Acceptor(pid, n_procs, "cas", strict=False)
            node = Node(pid, prop, acc)
            self.fabric.attach(node)
            self.nodes.append(node)
        for node in self.nodes:
            if node.proposer is not None:
                node.proposer.bind(self.fabric)
            if node.acceptor is not None:
                node.acceptor.bind(self.fabric)
        for node in self.nodes:
            if node.proposer is not None:
                node.proposer.propose(self.inputs[node.pid])
        self._node_keys = [None] * n_procs
        self._owned = set(range(n_procs))

    def clone(self) -> "World":
        w = World.__new__(World)
        w.cfg = self.cfg
        w.n_procs = self.n_procs
        w.inputs = self.inputs
        w.crashes_used = self.crashes_used
        w.violations = self.violations
        w.fabric = self.fabric.clone()
        w.nodes = list(self.nodes)
        w._node_keys = list(self._node_keys)
        w._owned = set()
        return w

    def _own(self, pid: int):
        if pid in self._owned:
            return
        node = self.nodes[pid].clone(self.fabric)
        self.nodes[pid] = node
        self.fabric.procs[pid] = node
        self._node_keys[pid] = None
        self._owned.add(pid)

    def key(self):
        keys = self._node_keys
        for i, k in enumerate(keys):
            if k is None:
                keys[i] = hash(self.nodes[i].key())
        return hash((self.fabric.key(), tuple(keys), self.crashes_used, len(self.violations)))

    def enabled(self) -> list:
        evs = self.fabric.enabled()
        for ev in evs:
            # a delivery its receiver ignores commutes with everything: take it alone
            if ev[0] == "c" or self.fabric.head(ev).kind is OpKind.MSG:
                dst = ev[2]
                if self.nodes[dst].inert(ev[0], self.fabric.head(ev)):
                    return [ev]
        if self.crashes_used < self.cfg.crashes:
            evs.extend(("x", p, p) for p in range(self.n_procs) if p not in self.fabric.crashed)
        return evs

    def fire(self, ev):
        kind, x, y = ev
        if kind == "x":
            self.crashes_used += 1
            self.fabric.crash(x)
            return
        if kind == "c":
            self._own(y)
            self.fabric.fire(ev)
            return
        t = self.fabric.requests[(x, y)][0]
        if t.kind is OpKind.MSG or self.nodes[y].acceptor is not None:
            self._own(y)
        if t.kind in (OpKind.CAS, OpKind.WRITE_CAS):
            before = self.fabric.regions[y].read(t.slot)
            self.fabric.fire(ev)
            after = self.fabric.regions[y].read(t.slot)
            if before != after:
                b, a = unpack(before), unpack(after)
                if a.min_proposal < b.min_proposal or a.accepted_proposal < b.accepted_proposal:
                    self.violations = self.violations + [("Monotonicity", f"acceptor {y}: {b} -> {a}")]
            return
        self.fabric.fire(ev)

    def decisions(self) -> dict:
        out = {}
        for n in self.nodes:
            if n.proposer is not None:
                out[n.pid] = [o.value for o in n.proposer.outcomes if isinstance(o, Decide)]
        return out

    def safety(self) -> list:
        found = list(self.violations)
        for n in self.nodes:
            if n.acceptor is not None and n.acceptor.violations:
                found.append(("Monotonicity", n.acceptor.violations[0]))
        decided = self.decisions()
        values = {v for vs in decided.values() for v in vs}
        if len(values) > 1:
            found.append(("Agreement", f"decided values {sorted(values)}"))
        for v in values:
            if v not in self.inputs.values():
                found.append(("Validity", f"decided {v} is nobody's input"))
        for pid, vs in decided.items():
            if len(vs) > 1:
                found.append(("Integrity", f"proposer {pid} decided {len(vs)} times"))
        return found

    def terminal_checks(self) -> list:
        if self.cfg.protocol != "smr-single-slot":
            return []
        found = []
        values = {v for vs in self.decisions().values() for v in vs}
        for v in values:
            want = payload_of(v)
            holders = [
                a for a in range(self.cfg.acceptors)
                if a not in self.fabric.crashed and self.fabric.regions[a].payload(0, v) == want
            ]
            if not holders:
                found.append(("Recoverability", f"payload of writer {v} lost"))
        return found

    def outcome_label(self) -> str:
        parts = []
        for n in self.nodes:
            if n.proposer is not None:
                parts.append("".join("D" if isinstance(o, Decide) else "A" for o in n.proposer.outcomes) or "-")
        return "/".join(parts)


def explore(cfg: CheckConfig) -> Report:
    """Enumerate every maximal schedule of ``cfg`` (bounded by cfg.budget explored schedules)."""
    started = time.perf_counter()
    report = Report(cfg.protocol, {k: (v.value if hasattr(v, "value") else v) for k, v in cfg.__dict__.items()})
    memo: dict = {}
    seen_violation_keys: set = set()
    path: list = []
    stop = False

    def leaf():
        report.explored += 1
        if report.explored > cfg.budget:
            raise BudgetExceeded

    def visit(world: World) -> int:
        nonlocal stop
        k = world.key()
        hit = memo.get(k)
        if hit is not None:
            leaf()
            return hit
        report.states += 1
        problems = world.safety()
        evs = [] if problems else world.enabled()
        if not evs and not problems:
            problems = world.terminal_checks()
        if problems:
            for kind, detail in problems:
                sig = (kind, detail)
                if sig not in seen_violation_keys and len(report.violations) < cfg.max_violations:
                    seen_violation_keys.add(sig)
                    report.violations.append(Violation(kind, detail, list(path)))
            if cfg.stop_on_first:
                stop = True
            memo[k] = 1
            leaf()
            return 1
        if not evs:
            report.terminal_states += 1
            label = world.outcome_label()
            report.outcomes[label] = report.outcomes.get(label, 0) + 1
            memo[k] = 1
            leaf()
            return 1
        total = 0
        for ev in evs:
            if stop:
                break
            child = world.clone()
            child.fire(ev)
            report.transitions += 1
            path.append(ev)
            total += visit(child)
            path.pop()
        memo[k] = total
        return total

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 20000))
    try:
        report.schedules = visit(World(cfg))
    except BudgetExceeded:
        report.complete = False
        report.explored = cfg.budget
    finally:
        sys.setrecursionlimit(limit)
    if stop:
        report.stopped = True
        report.complete = False
    report.seconds = time.perf_counter() - started
    return report


def replay(cfg: CheckConfig, witness: list) -> tuple[list, list]:
    """Re-execute a schedule with tracing on. Returns (trace records, violations found)."""
    world = World(cfg, trace=True)
    for ev in witness:
        ev = tuple(ev)
        if ev not in world.enabled():
            raise ValueError(f"event {ev} not enabled during replay")
        world.fire(ev)
    problems = world.safety()
    if not problems and not world.enabled():
        problems = world.terminal_checks()
    return world.fabric.trace, problems
