"""Replicated log on top of the streamlined one-sided consensus.

Each process is a Replica hosting three roles: an acceptor (its memory region
holds one packed word per slot plus per-writer payload buffers), a learner
that applies decided slots in order to a deterministic service, and, while it
is the trusted leader, a proposer that owns one StreamlinedProposer per slot.

The leader pre-prepares a window of slots off the critical path so a request
costs a single accept round. Payloads travel by indirection: the request
bytes go into the leader's write-exclusive buffer at each acceptor, posted
ahead of the accept CAS on the same link, and the slot decides the writer id.
"""

from __future__ import annotations

import hashlib
import json
import random
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .core import AcceptorState, Decide, fallback_threshold, majority, pack, unpack
from .election import FailureView, current_leader
from .fabric import OpKind, Process, SimFabric, Ticket
from .refpaxos import CRASHED, DECIDED, QUERY, STATE, Acceptor, Msg, decode, encode, is_request
from .velos import StreamlinedProposer

DEFAULT_BUFFER_SIZE = 4096
OP_COLUMNS = (OpKind.READ, OpKind.READ_BUF, OpKind.CAS, OpKind.WRITE, OpKind.WRITE_CAS, OpKind.MSG)
_PREV = struct.Struct(">qq")
PIGGYBACK_HEADER = _PREV.size


class NotDecided:
    """Returned by recovery when no acceptor in the read majority accepted anything."""

    def __repr__(self):
        return "NOT_DECIDED"


NOT_DECIDED = NotDecided()


class RegisterService:
    """Append-only register; the state hash chains every applied entry."""

    def __init__(self):
        self.entries: list[bytes] = []
        self.digest = bytes(32)

    def apply(self, data: bytes) -> str:
        self.entries.append(bytes(data))
        self.digest = hashlib.sha256(self.digest + bytes(data)).digest()
        return self.digest.hex()

    @property
    def state_hash(self) -> str:
        return self.digest.hex()


@dataclass
class SmrConfig:
    n: int = 3
    window: int = 16
    slots: int = 100
    payload_size: int = 1
    buffer_size: int = DEFAULT_BUFFER_SIZE
    indirection: bool = True
    piggyback: bool = False
    value_bits: int = 2
    mode: str = "velos"  # or "write-baseline"
    think_time: float = 0.5
    takeover_delay: float = 30.0
    cold_penalty: float = 1.0
    cold_decisions: int = 5
    detection_delay: float = 30.0
    threshold_acceptors: tuple = ()

    def validate(self):
        if self.n < 1:
            raise ValueError("need at least one replica")
        if self.window < 1:
            raise ValueError("window must be positive")
        if not 0 < self.payload_size <= self.buffer_size:
            raise ValueError(f"payload size must be in 1..{self.buffer_size}")
        if self.n > 1 << self.value_bits and self.indirection:
            raise ValueError("replica ids do not fit the inline value field")
        if not self.indirection and self.payload_size != 1:
            raise ValueError("without indirection the payload must fit the inline value field")
        if self.piggyback and not self.indirection:
            raise ValueError("piggybacked decisions ride in the payload buffer; enable indirection")
        if self.mode not in ("velos", "write-baseline"):
            raise ValueError(f"unknown replication mode {self.mode!r}")
        return self


class Workload:
    """Deterministic request stream shared by whoever leads.

    Requests handed to a leader stay outstanding until some leader decides
    them; a new leader replays outstanding requests first.
    """

    def __init__(self, count: int, size: int, seed: int = 0, inline_bits: Optional[int] = None):
        rng = random.Random(seed)
        if inline_bits is not None:
            self.requests = [bytes([rng.randrange(1 << inline_bits)]) for _ in range(count)]
        else:
            self.requests = [rng.randbytes(size) for _ in range(count)]
        self.next_index = 0
        self.outstanding: dict[tuple, int] = {}  # (slot, writer) -> request index
        self.history: dict[tuple, int] = {}
        self.replay: deque = deque()
        self.committed: set[int] = set()

    def take(self) -> Optional[int]:
        while self.replay:
            i = self.replay.popleft()
            if i not in self.committed:
                return i
        if self.next_index >= len(self.requests):
            return None
        self.next_index += 1
        return self.next_index - 1

    def bind(self, slot: int, writer: int, index: int):
        self.outstanding[(slot, writer)] = index
        self.history[(slot, writer)] = index

    def commit(self, slot: int, writer: int):
        i = self.outstanding.pop((slot, writer), None)
        if i is not None:
            self.committed.add(i)

    def release(self, slot: int, writer: int):
        """The slot decided someone else's value; the request goes back in line."""
        i = self.outstanding.pop((slot, writer), None)
        if i is not None and i not in self.committed:
            self.replay.appendleft(i)

    def requeue_all(self):
        # bindings stay: a successor re-deciding an adopted slot still commits it
        pending = sorted(i for i in self.outstanding.values() if i not in self.committed)
        self.replay = deque(sorted(set(pending) | set(self.replay)))

    def done(self) -> bool:
        return len(self.committed) >= len(self.requests)


@dataclass
class SlotRecord:
    slot: int
    leader: int
    start: float
    decide: float
    critical_rounds: int
    adopted: bool
    ops: tuple = ()


@dataclass
class PrepareWindow:
    size: int
    next_slot: int = 0
    prepared_upto: int = 0

    def refill_range(self, limit: int) -> range:
        """Slots to pre-prepare now: refill to a full window once half is consumed."""
        if self.prepared_upto - self.next_slot > self.size // 2:
            return range(0)
        hi = min(self.next_slot + self.size, limit)
        lo = max(self.prepared_upto, self.next_slot)
        self.prepared_upto = max(self.prepared_upto, hi)
        return range(lo, hi)


class Recovery:
    """Read a majority of slot words, then fetch the named writer's payload."""

    def __init__(self, replica: "Replica", slot: int, done: Callable, known_writer: Optional[int] = None):
        self.r = replica
        self.slot = slot
        self.done = done
        self.states: dict[int, AcceptorState] = {}
        self.writer = known_writer
        self.holders: list[int] = []
        self.finished = False
        self.asked = 0

    def start(self):
        r = self.r
        if self.writer is not None:
            self._fetch([a for a in range(r.n) if a != r.pid])
            return
        for a in range(r.n):
            if a in r.rpc_acceptors:
                r.net.post_message(r.pid, a, encode(Msg(QUERY, self.slot)))
            else:
                r.net.post_read(r.pid, a, self.slot, tag=("R", self.slot, "word"))

    def on_word(self, a: int, word: int):
        st = unpack(word, self.r.cfg.value_bits)
        if st.min_proposal >= fallback_threshold(self.r.n):
            self.r.rpc_acceptors.add(a)
            self.r.net.post_message(self.r.pid, a, encode(Msg(QUERY, self.slot)))
            return
        self.on_state(a, st)

    def on_state(self, a: int, st: AcceptorState):
        if self.finished or self.writer is not None or a in self.states:
            return
        self.states[a] = st
        if len(self.states) < majority(self.r.n):
            return
        accepted = [(s.accepted_proposal, s.accepted_value, a) for a, s in self.states.items()
                    if s.accepted_proposal > 0]
        if not accepted:
            self._finish(NOT_DECIDED)
            return
        ap, w, _ = max(accepted)
        self.writer = w
        if not self.r.cfg.indirection:
            self._finish(bytes([w]))
            return
        holders = [a for a, s in self.states.items() if s.accepted_value == w and s.accepted_proposal > 0]
        self._fetch(holders + [a for a in range(self.r.n) if a not in holders])

    def _fetch(self, order: list[int]):
        r = self.r
        local = r.net.regions[r.pid].payload(self.slot, self.writer)
        if local is not None:
            self._finish(local)
            return
        self.holders = [a for a in order if a != r.pid]
        self._next()

    def _next(self):
        r = self.r
        while self.holders:
            a = self.holders.pop(0)
            if r.view.alive(a):
                r.net.post_read_buffer(r.pid, a, self.slot, self.writer, tag=("R", self.slot, "buf"))
                return
        self._finish(None)

    def on_buffer(self, data: Optional[bytes]):
        if self.finished:
            return
        if data is None:
            self._next()
        else:
            self._finish(data)

    def _finish(self, result):
        self.finished = True
        self.done(self.slot, self.writer, result)


class Replica(Process):
    def __init__(self, pid: int, cfg: SmrConfig, workload: Workload,
                 service_factory: Callable[[], RegisterService] = RegisterService):
        self.pid = pid
        self.cfg = cfg
        self.n = cfg.n
        self.workload = workload
        self.acceptor = Acceptor(pid, cfg.n, "cas", value_bits=cfg.value_bits)
        self.view = FailureView(list(range(cfg.n)), cfg.detection_delay)
        self.service = service_factory()
        self.decided: dict[int, int] = {}
        self.learned_at: dict[int, float] = {}
        self.applied = 0
        self.apply_hashes: list[str] = []
        self.payload_of: dict[int, bytes] = {}
        self.conflicts: list[str] = []
        self.rpc_acceptors: set[int] = set()
        self.recoveries: dict[int, Recovery] = {}
        # leader side
        self.leader = False
        self.active = False
        self.takeover = False
        self.trusted_at: Optional[float] = None
        self.active_at: Optional[float] = None
        self.window = PrepareWindow(cfg.window)
        self.proposers: dict[int, StreamlinedProposer] = {}
        self.adopted: dict[int, Optional[int]] = {}
        self.inflight: Optional[int] = None
        self.inflight_request: Optional[int] = None
        self.inflight_start = 0.0
        self.inflight_rounds = 0
        self.cold_left = 0
        self.records: list[SlotRecord] = []
        self.first_prepared_at: Optional[float] = None
        self.baseline_acks: dict[int, set] = {}
        self.net: Optional[SimFabric] = None

    def bind(self, net: SimFabric):
        self.net = net
        net.attach(self)
        self.acceptor.bind(net)
        self._trust(current_leader(self.view), initial=True)
        return self

    # -- leadership ---------------------------------------------------------
    def _trust(self, leader: Optional[int], initial: bool = False):
        self.net.note(self.pid, "TRUST", leader=leader)
        was = self.leader
        self.leader = leader == self.pid
        if self.leader and not was:
            self.trusted_at = self.net.now()
            if initial:
                self._activate(takeover=False)
            else:
                self.net.call_later(self.pid, self.cfg.takeover_delay, lambda: self._activate(takeover=True))

    def _activate(self, takeover: bool):
        if not self.leader or self.active:
            return
        self.active = True
        self.takeover = takeover
        self.active_at = self.net.now()
        self.cold_left = self.cfg.cold_decisions if takeover else 0
        start = 0
        while start in self.decided:
            start += 1
        self.window = PrepareWindow(self.cfg.window, start, start)
        self.proposers = {s: p for s, p in self.proposers.items() if s < start}
        if takeover:
            self.workload.requeue_all()
        self.net.note(self.pid, "LEADER_ACTIVE", from_slot=start, takeover=takeover)
        self._pump()

    def _prediction(self, slot: int) -> list:
        """Remote words are predicted to match the local one (fresh, or prepared by the failed leader)."""
        st = unpack(self.net.local_read(self.pid, slot), self.cfg.value_bits)
        if st.min_proposal >= fallback_threshold(self.n):
            st = AcceptorState()
        return [st] * self.n

    def _proposer(self, slot: int) -> StreamlinedProposer:
        p = self.proposers.get(slot)
        if p is None:
            predicted = self._prediction(slot) if self.takeover else None
            p = StreamlinedProposer(self.pid, self.n, list(range(self.n)), slot,
                                    value_bits=self.cfg.value_bits, predicted=predicted)
            p.rpc = frozenset(self.rpc_acceptors)
            p.listener = self
            p.bind(self.net)
            self.proposers[slot] = p
        return p

    def pre_prepare(self, slots) -> None:
        for s in slots:
            p = self._proposer(s)
            if not p.prepared and not p.busy and not p.decided:
                p.critical = False
                p.prepare_only()

    def _pump(self):
        if not self.active or self.inflight is not None or self.cfg.mode != "velos":
            if self.active and self.inflight is None and self.cfg.mode == "write-baseline":
                self._pump_baseline()
            return
        w = self.window
        while w.next_slot in self.decided:
            w.next_slot += 1
        s = w.next_slot
        if s >= self.cfg.slots:
            return
        self.pre_prepare(w.refill_range(self.cfg.slots))
        p = self._proposer(s)
        if p.busy:
            return  # on_prepared resumes
        if not p.prepared:
            p.critical = True
            p.prepare_only()
            return
        adopted = self.adopted.get(s)
        if adopted is not None:
            self._start_accept(s, None, adopted)
            return
        i = self.workload.take()
        if i is None:
            return
        self._start_accept(s, i, None)

    def _start_accept(self, slot: int, request: Optional[int], adopted: Optional[int]):
        self.inflight = slot
        self.inflight_request = request
        self.inflight_start = self.net.now()
        self.inflight_rounds = self.net.counters.critical_rounds[self.pid]
        delay = self.net.latency.local_overhead
        if self.cold_left > 0:
            delay += self.cfg.cold_penalty
            self.cold_left -= 1
        p = self._proposer(slot)
        if request is not None:
            data = self.workload.requests[request]
            self.workload.bind(slot, self.pid, request)
            if self.cfg.indirection:
                if self.cfg.piggyback:
                    prev = self.decided.get(slot - 1, -1) if slot > 0 else -1
                    data = _PREV.pack(slot - 1, prev) + data
                p.payload = data
                value = self.pid
            else:
                value = data[0]
        else:
            value = adopted

        def go():
            if not self.leader:
                return
            p.critical = True
            p.accept(value)

        self.net.call_later(self.pid, delay, go)

    def on_prepared(self, p: StreamlinedProposer):
        if self.first_prepared_at is None and self.takeover:
            self.first_prepared_at = self.net.now()
        if p.proposed_value is not None and p.payload is None:
            self.adopted[p.slot] = p.proposed_value
        if p.slot == self.window.next_slot:
            self._pump()

    def on_outcome(self, p: StreamlinedProposer, outcome):
        s = p.slot
        if isinstance(outcome, Decide):
            v = outcome.value
            if self.cfg.indirection:
                self.workload.commit(s, v)
                if v != self.pid:
                    self.workload.release(s, self.pid)
            else:
                self.workload.commit(s, self.pid)
            self._learn(s, v)
            if not self.cfg.piggyback:
                for q in range(self.n):
                    if q != self.pid:
                        self.net.post_message(self.pid, q, encode(Msg(DECIDED, s, value=v)))
            if self.inflight == s:
                now = self.net.now()
                self.records.append(SlotRecord(
                    s, self.pid, self.inflight_start, now,
                    self.net.counters.critical_rounds[self.pid] - self.inflight_rounds,
                    self.inflight_request is None, self._ops()))
                self.inflight = None
                self.net.call_later(self.pid, self.cfg.think_time, self._pump)
            return
        # Abort
        if not self.leader:
            return
        if self.inflight == s:
            # contested: rerun the full protocol on this slot with the same value
            p.critical = True
            p.propose(p.proposed_value)
        elif p.slot == self.window.next_slot:
            self._pump()

    def _ops(self) -> tuple:
        return tuple(self.net.counters.total("issued", k) for k in OP_COLUMNS)

    # -- write-only baseline -------------------------------------------------
    def _pump_baseline(self):
        w = self.window
        s = w.next_slot
        if s >= self.cfg.slots:
            return
        i = self.workload.take()
        if i is None:
            return
        self.inflight = s
        self.inflight_request = i
        self.inflight_start = self.net.now()
        self.inflight_rounds = self.net.counters.critical_rounds[self.pid]
        self.workload.bind(s, self.pid, i)
        data = self.workload.requests[i]

        def go():
            self.net.counters.round(self.pid, True)
            self.baseline_acks[s] = set()
            for a in range(self.n):
                self.net.post_write(self.pid, a, s, data, tag=("B", s))

        self.net.call_later(self.pid, self.net.latency.local_overhead, go)

    def _baseline_ack(self, ticket: Ticket):
        s = ticket.tag[1]
        acks = self.baseline_acks.get(s)
        if acks is None:
            return
        acks.add(ticket.target)
        if len(acks) == majority(self.n):
            del self.baseline_acks[s]
            self.workload.commit(s, self.pid)
            self._learn(s, self.pid)
            for q in range(self.n):
                if q != self.pid:
                    self.net.post_message(self.pid, q, encode(Msg(DECIDED, s, value=self.pid)))
            now = self.net.now()
            self.records.append(SlotRecord(s, self.pid, self.inflight_start, now,
                                           self.net.counters.critical_rounds[self.pid] - self.inflight_rounds,
                                           False, self._ops()))
            self.inflight = None
            self.window.next_slot = s + 1
            self.net.call_later(self.pid, self.cfg.think_time, self._pump)

    # -- learning and apply ---------------------------------------------------
    def _learn(self, slot: int, value: int):
        if slot in self.decided:
            if self.decided[slot] != value:
                self.conflicts.append(f"slot {slot}: {self.decided[slot]} vs {value}")
            return
        self.decided[slot] = value
        self.learned_at[slot] = self.net.now()
        self.net.note(self.pid, "LEARN", slot=slot, value=value)
        self.apply_loop()

    def _resolve(self, slot: int) -> Optional[bytes]:
        v = self.decided[slot]
        if slot in self.payload_of:
            return self.payload_of[slot]
        if not self.cfg.indirection:
            return bytes([v])
        data = self.net.regions[self.pid].payload(slot, v)
        if data is None and slot not in self.recoveries:
            rec = Recovery(self, slot, self._recovered, known_writer=v)
            self.recoveries[slot] = rec
            rec.start()
        return data

    def _recovered(self, slot, writer, data):
        self.recoveries.pop(slot, None)
        if isinstance(data, bytes):
            self.payload_of[slot] = data
            self.apply_loop()

    def apply_loop(self) -> int:
        while self.applied in self.decided:
            data = self._resolve(self.applied)
            if data is None:
                break
            if self.cfg.piggyback:
                data = data[_PREV.size:]
            self.apply_hashes.append(self.service.apply(data))
            self.applied += 1
        return self.applied

    def recover(self, slot: int, done: Callable):
        rec = Recovery(self, slot, done)
        self.recoveries[("user", slot)] = rec
        rec.start()
        return rec

    # -- fabric callbacks -------------------------------------------------------
    def on_complete(self, ticket: Ticket, result):
        tag = ticket.tag
        if not tag:
            return
        if tag[0] == "P":
            p = self.proposers.get(tag[1])
            if p is not None:
                p.on_complete(ticket, result)
                if ticket.target in p.rpc and ticket.target not in self.rpc_acceptors:
                    self.rpc_acceptors.add(ticket.target)
        elif tag[0] == "R":
            for rec in self._recoveries_for(tag[1]):
                if tag[2] == "word":
                    rec.on_word(ticket.target, result)
                else:
                    rec.on_buffer(result)
        elif tag[0] == "B":
            self._baseline_ack(ticket)

    def _recoveries_for(self, slot):
        return [r for k, r in list(self.recoveries.items()) if r.slot == slot and not r.finished]

    def on_message(self, src: int, data):
        m = decode(data)
        if m.kind == CRASHED:
            self.view.suspect(m.value)
            self._trust(current_leader(self.view))
        elif m.kind == DECIDED:
            self._learn(m.slot, m.value)
        elif is_request(m):
            self.acceptor.on_request(src, m)
        elif m.kind == STATE:
            for rec in self._recoveries_for(m.slot):
                rec.on_state(src, AcceptorState(m.mp, m.ap, m.av))
        else:
            p = self.proposers.get(m.slot)
            if p is not None:
                p.on_reply(src, m)

    def on_local_update(self, slot):
        self.acceptor.on_local_update(slot)
        if not self.cfg.piggyback or slot is None or self.acceptor.mode != "cas":
            return
        st = unpack(self.net.local_read(self.pid, slot), self.cfg.value_bits)
        if st.accepted_proposal == 0:
            return
        data = self.net.regions[self.pid].payload(slot, st.accepted_value)
        if data is None or len(data) < _PREV.size:
            return
        prev_slot, prev_value = _PREV.unpack(data[:_PREV.size])
        if prev_slot >= 0 and prev_value >= 0:
            self._learn(prev_slot, prev_value)

    # -- export -------------------------------------------------------------------
    def snapshot(self) -> list[dict]:
        region = self.net.regions[self.pid]
        slots = sorted(set(region.words) | {s for s, _ in region.payloads} | set(self.decided))
        out = []
        for s in slots:
            v = self.decided.get(s)
            payload = None
            if v is not None:
                payload = self.payload_of.get(s)
                if payload is None and self.cfg.indirection:
                    payload = region.payload(s, v)
            out.append({"slot": s, "word": region.read(s), "decided": v,
                        "payload": None if payload is None else payload.hex()})
        return out

    def export_snapshot(self, path):
        with open(path, "w") as fh:
            for row in self.snapshot():
                fh.write(json.dumps(row, sort_keys=True) + "\n")


@dataclass
class Cluster:
    cfg: SmrConfig
    fabric: SimFabric
    replicas: list
    workload: Workload

    def audit(self) -> list[str]:
        """Decided-log agreement across replicas, applied-prefix agreement, counter sanity."""
        problems = []
        merged: dict[int, int] = {}
        for r in self.replicas:
            problems.extend(f"replica {r.pid}: {c}" for c in r.conflicts)
            for s, v in r.decided.items():
                if merged.setdefault(s, v) != v:
                    problems.append(f"slot {s}: replicas decided {merged[s]} and {v}")
        for r in self.replicas:
            for q in self.replicas:
                k = min(r.applied, q.applied)
                if k and r.apply_hashes[k - 1] != q.apply_hashes[k - 1]:
                    problems.append(f"replicas {r.pid},{q.pid} diverge within applied prefix {k}")
        for r in self.replicas:
            problems.extend(f"replica {r.pid} acceptor: {v}" for v in r.acceptor.violations)
        if not self.fabric.counters.sane():
            problems.append("counters: completed exceeds issued")
        return problems

    def leader_records(self) -> list[SlotRecord]:
        recs = [rec for r in self.replicas for rec in r.records]
        return sorted(recs, key=lambda x: (x.decide, x.slot))


def build_cluster(cfg: SmrConfig, fabric: SimFabric, seed: int = 0) -> Cluster:
    cfg.validate()
    inline = None if cfg.indirection else cfg.value_bits
    workload = Workload(cfg.slots, cfg.payload_size, seed, inline_bits=inline)
    replicas = [Replica(i, cfg, workload) for i in range(cfg.n)]
    for r in replicas:
        r.bind(fabric)
    return Cluster(cfg, fabric, replicas, workload)


def threshold_defaults(cfg: SmrConfig) -> dict[int, int]:
    word = pack(AcceptorState(fallback_threshold(cfg.n), 0, None), cfg.value_bits)
    return {a: word for a in cfg.threshold_acceptors}


def recover_value(fabric: SimFabric, replica: Replica, slot: int, max_events: int = 100_000):
    """Run recovery of ``slot`` from ``replica`` to completion on the fabric."""
    box: list = []
    replica.recover(slot, lambda s, w, data: box.append(data))
    fabric.run(predicate=lambda: bool(box), max_events=max_events)
    if not box:
        raise RuntimeError(f"recovery of slot {slot} did not finish")
    return box[0]
