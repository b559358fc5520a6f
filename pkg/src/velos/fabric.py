"""Simulated remote-memory and message fabric.

Every process owns a MemoryRegion holding one packed word per consensus slot
plus one write-exclusive payload buffer per (slot, writer). Other processes
touch it only through posted operations: READ, CAS, WRITE, WRITE+CAS (write
applied strictly before the CAS, one completion) and two-sided messages.

Each posted operation travels on the FIFO link (initiator, target). It is
*applied* at the target and later *completed* back at the initiator on the
reverse link. Operations toward a crashed process are never applied, so their
tickets stay pending forever.

Two schedulers share this core:

* SimFabric: virtual time; events ordered by (time, sequence number).
* ChoiceFabric: no time; the caller picks which enabled link head fires next.
  Used by the interleaving checker; the whole fabric is cheaply cloneable.
"""

from __future__ import annotations

import heapq
import json
import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, NamedTuple, Optional

TRACE_FORMAT_VERSION = 1


class OpKind(str, Enum):
    READ = "READ"
    CAS = "CAS"
    WRITE = "WRITE"
    WRITE_CAS = "WRITE_CAS"
    READ_BUF = "READ_BUF"
    MSG = "MSG"


class Ticket(NamedTuple):
    id: tuple
    kind: OpKind
    initiator: int
    target: int
    slot: Any = None
    expected: Optional[int] = None
    desired: Optional[int] = None
    payload: Optional[bytes] = None
    tag: Any = None
    issue_time: float = 0.0


class MemoryRegion:
    __slots__ = ("owner", "words", "payloads", "default_word", "_key")

    def __init__(self, owner: int, default_word: int = 0):
        self.owner = owner
        self.words: dict = {}
        self.payloads: dict = {}
        self.default_word = default_word
        self._key = None

    def read(self, slot) -> int:
        return self.words.get(slot, self.default_word)

    def cas(self, slot, expected: int, desired: int) -> int:
        old = self.words.get(slot, self.default_word)
        if old == expected:
            self.words[slot] = desired
            self._key = None
        return old

    def write(self, slot, writer: int, payload: bytes):
        self.payloads[(slot, writer)] = payload
        self._key = None

    def set_default(self, word: int):
        self.default_word = word
        self._key = None

    def payload(self, slot, writer: int) -> Optional[bytes]:
        return self.payloads.get((slot, writer))

    def clone(self) -> "MemoryRegion":
        r = MemoryRegion(self.owner, self.default_word)
        r.words = dict(self.words)
        r.payloads = dict(self.payloads)
        r._key = self._key
        return r

    def key(self):
        if self._key is None:
            self._key = hash((
                self.default_word,
                tuple(sorted(self.words.items())),
                tuple(sorted(self.payloads.items())),
            ))
        return self._key


@dataclass
class LatencyModel:
    """One-way delays per operation kind, in µs-equivalent virtual time units.

    A CAS round to a majority costs local_overhead + 2 * cas, so the defaults
    give 1.9 for a CAS round and 1.25 for a WRITE round.
    """

    cas: float = 0.8
    write: float = 0.475
    read: float = 0.475
    msg: float = 1.0
    local_delay: float = 0.05
    local_overhead: float = 0.3
    jitter: float = 0.0

    @classmethod
    def zero(cls, local_overhead: float = 0.3) -> "LatencyModel":
        return cls(cas=0.0, write=0.0, read=0.0, msg=0.0, local_delay=0.0, local_overhead=local_overhead)

    def one_way(self, kind: OpKind, rng: random.Random, self_link: bool = False) -> float:
        if kind is OpKind.MSG:
            base = self.local_delay if self_link else self.msg
        elif kind is OpKind.READ or kind is OpKind.READ_BUF:
            base = self.read
        elif kind is OpKind.WRITE:
            base = self.write
        else:
            base = self.cas
        if self.jitter:
            base += rng.uniform(0.0, self.jitter * base)
        if base < 0:
            raise ValueError("negative delay")
        return base


class Counters:
    def __init__(self, n: int):
        self.n = n
        self.issued = [{k: 0 for k in OpKind} for _ in range(n)]
        self.completed = [{k: 0 for k in OpKind} for _ in range(n)]
        self.cas_rounds = [0] * n
        self.critical_rounds = [0] * n

    def issue(self, pid: int, kind: OpKind):
        self.issued[pid][kind] += 1

    def complete(self, pid: int, kind: OpKind):
        self.completed[pid][kind] += 1

    def round(self, pid: int, critical: bool):
        self.cas_rounds[pid] += 1
        if critical:
            self.critical_rounds[pid] += 1

    def total(self, table: str, kind: Optional[OpKind] = None) -> int:
        rows = getattr(self, table)
        if kind is None:
            return sum(sum(r.values()) for r in rows)
        return sum(r[kind] for r in rows)

    def sane(self) -> bool:
        return all(
            self.completed[p][k] <= self.issued[p][k] for p in range(self.n) for k in OpKind
        )

    def export(self) -> dict[str, int]:
        out = {}
        for p in range(self.n):
            for k in OpKind:
                out[f"p{p}.{k.value}.issued"] = self.issued[p][k]
                out[f"p{p}.{k.value}.completed"] = self.completed[p][k]
            out[f"p{p}.cas_rounds"] = self.cas_rounds[p]
            out[f"p{p}.critical_rounds"] = self.critical_rounds[p]
        return out

    def clone(self) -> "Counters":
        c = Counters.__new__(Counters)
        c.n = self.n
        c.issued = [dict(r) for r in self.issued]
        c.completed = [dict(r) for r in self.completed]
        c.cas_rounds = list(self.cas_rounds)
        c.critical_rounds = list(self.critical_rounds)
        return c


class NullCounters(Counters):
    """Counters that record nothing (exhaustive exploration does not need them)."""

    def __init__(self, n: int = 0):
        super().__init__(0)

    def issue(self, pid, kind):
        pass

    def complete(self, pid, kind):
        pass

    def round(self, pid, critical):
        pass

    def clone(self):
        return self


class Process:
    """Base class for anything attached to a fabric endpoint."""

    pid: int

    def on_complete(self, ticket: Ticket, result: Optional[int]) -> None:
        pass

    def on_message(self, src: int, msg: Any) -> None:
        pass

    def on_local_update(self, slot) -> None:
        """Hook run after this process's own region word changed."""


class Fabric:
    def __init__(self, n: int, *, default_words: Optional[dict[int, int]] = None, trace: bool = False):
        self.n = n
        default_words = default_words or {}
        self.regions = [MemoryRegion(i, default_words.get(i, 0)) for i in range(n)]
        self.procs: list[Optional[Process]] = [None] * n
        self.crashed: set[int] = set()
        self.crash_time: dict[int, float] = {}
        self.counters = Counters(n)
        self._seq = [0] * n
        self.trace: Optional[list] = [] if trace else None
        # per-word apply order: (slot, target) -> list of (time, kind, old, new)
        self.apply_log: Optional[dict] = {} if trace else None

    # -- clock -----------------------------------------------------------
    def now(self) -> float:
        return 0.0

    # -- wiring ----------------------------------------------------------
    def attach(self, proc: Process):
        self.procs[proc.pid] = proc

    def alive(self, pid: int) -> bool:
        return pid not in self.crashed

    def local_read(self, pid: int, slot) -> int:
        return self.regions[pid].read(slot)

    def writable_region(self, pid: int) -> MemoryRegion:
        return self.regions[pid]

    def local_cas(self, pid: int, slot, expected: int, desired: int) -> int:
        old = self.writable_region(pid).cas(slot, expected, desired)
        self._record("LOCAL_CAS", pid, pid, slot, old, self.regions[pid].read(slot))
        return old

    # -- posting ---------------------------------------------------------
    def _ticket(self, kind, initiator, target, **kw) -> Ticket:
        seq = self._seq[initiator]
        self._seq[initiator] = seq + 1
        t = Ticket((initiator, seq), kind, initiator, target, issue_time=self.now(), **kw)
        self.counters.issue(initiator, kind)
        return t

    def post_read(self, initiator: int, target: int, slot, tag=None) -> Ticket:
        t = self._ticket(OpKind.READ, initiator, target, slot=slot, tag=tag)
        self._submit(t)
        return t

    def post_read_buffer(self, initiator: int, target: int, slot, writer: int, tag=None) -> Ticket:
        """Read the payload buffer (slot, writer) at target; completes with bytes or None."""
        t = self._ticket(OpKind.READ_BUF, initiator, target, slot=slot, expected=writer, tag=tag)
        self._submit(t)
        return t

    def post_cas(self, initiator: int, target: int, slot, expected: int, desired: int, tag=None) -> Ticket:
        t = self._ticket(OpKind.CAS, initiator, target, slot=slot, expected=expected, desired=desired, tag=tag)
        self._submit(t)
        return t

    def post_write(self, initiator: int, target: int, slot, payload: bytes, tag=None) -> Ticket:
        t = self._ticket(OpKind.WRITE, initiator, target, slot=slot, payload=bytes(payload), tag=tag)
        self._submit(t)
        return t

    def post_write_then_cas(
        self, initiator: int, target: int, slot, payload: bytes, expected: int, desired: int, tag=None
    ) -> Ticket:
        t = self._ticket(
            OpKind.WRITE_CAS, initiator, target, slot=slot, payload=bytes(payload),
            expected=expected, desired=desired, tag=tag,
        )
        self._submit(t)
        return t

    def post_message(self, src: int, dst: int, msg: Any, tag=None) -> Ticket:
        t = self._ticket(OpKind.MSG, src, dst, payload=msg, tag=tag)
        self._submit(t)
        return t

    def _submit(self, t: Ticket):
        raise NotImplementedError

    # -- delivery --------------------------------------------------------
    def _apply(self, t: Ticket) -> Optional[int]:
        """Apply t at its target. Caller guarantees the target is alive."""
        kind = t.kind
        region = self.regions[t.target] if kind in (OpKind.READ, OpKind.READ_BUF, OpKind.MSG) \
            else self.writable_region(t.target)
        if kind is OpKind.MSG:
            self.counters.complete(t.initiator, kind)
            self._record("MSG", t.initiator, t.target, None, None, None, msg=t.payload)
            proc = self.procs[t.target]
            if proc is not None:
                proc.on_message(t.initiator, t.payload)
            return None
        if kind is OpKind.READ:
            old = region.read(t.slot)
            self._record("READ", t.initiator, t.target, t.slot, old, old)
            return old
        if kind is OpKind.READ_BUF:
            self._record("READ_BUF", t.initiator, t.target, t.slot, None, None)
            return region.payload(t.slot, t.expected)
        if kind is OpKind.WRITE:
            region.write(t.slot, t.initiator, t.payload)
            self._record("WRITE", t.initiator, t.target, t.slot, None, None)
            return None
        if kind is OpKind.WRITE_CAS:
            region.write(t.slot, t.initiator, t.payload)
        old = region.cas(t.slot, t.expected, t.desired)
        new = region.read(t.slot)
        self._record(kind.value, t.initiator, t.target, t.slot, old, new)
        if old != new:
            self._local_update(t.target, t.slot)
        return old

    def _local_update(self, pid: int, slot):
        owner = self.procs[pid]
        if owner is not None:
            owner.on_local_update(slot)

    def _complete(self, t: Ticket, result: Optional[int]):
        self.counters.complete(t.initiator, t.kind)
        proc = self.procs[t.initiator]
        if proc is not None:
            proc.on_complete(t, result)

    def crash(self, pid: int):
        if pid in self.crashed:
            return
        self.crashed.add(pid)
        self.crash_time[pid] = self.now()
        self._record("CRASH", pid, pid, None, None, None)

    # -- tracing ---------------------------------------------------------
    def _record(self, kind, process, target, slot, old, new, msg=None):
        if self.trace is None:
            return
        rec = {"time": round(self.now(), 6), "process": process, "target": target, "kind": kind, "slot": slot,
               "old": old, "new": new}
        if msg is not None:
            rec["msg"] = _jsonable(msg)
        self.trace.append(rec)
        if slot is not None and old is not None:
            self.apply_log.setdefault((target, slot), []).append((self.now(), kind, old, new))

    def note(self, process: int, kind: str, **fields):
        """Protocol-level trace record (phase results, decisions, handoffs)."""
        if self.trace is None:
            return
        rec = {"time": round(self.now(), 6), "process": process, "kind": kind}
        rec.update({k: _jsonable(v) for k, v in fields.items()})
        self.trace.append(rec)

    def dump_trace(self, path):
        with open(path, "w") as fh:
            fh.write(json.dumps({"kind": "HEADER", "trace_format": TRACE_FORMAT_VERSION,
                                 "msg_format": MSG_FORMAT_VERSION}, sort_keys=True) + "\n")
            for rec in self.trace or ():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


MSG_FORMAT_VERSION = 1


def _jsonable(v):
    if isinstance(v, bytes):
        return v.hex()
    if isinstance(v, Enum):
        return v.value
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if hasattr(v, "_asdict"):
        return _jsonable(v._asdict())
    return v


class SimFabric(Fabric):
    """Deterministic virtual-time fabric."""

    def __init__(self, n: int, latency: Optional[LatencyModel] = None, seed: int = 0, **kw):
        super().__init__(n, **kw)
        self.latency = latency or LatencyModel()
        self.rng = random.Random(seed)
        self.time = 0.0
        self._events: list = []
        self._evseq = 0
        self._link_apply: dict = {}
        self._link_complete: dict = {}
        self.events_run = 0
        self.crash_hooks: list[Callable[[int], None]] = []

    def now(self) -> float:
        return self.time

    def _push(self, when: float, action: str, *args):
        self._evseq += 1
        heapq.heappush(self._events, (when, self._evseq, action, args))

    def _submit(self, t: Ticket):
        link = (t.initiator, t.target)
        d = self.latency.one_way(t.kind, self.rng, self_link=t.initiator == t.target)
        when = max(self.time + d, self._link_apply.get(link, 0.0))
        self._link_apply[link] = when
        self._push(when, "apply", t)

    def call_at(self, pid: int, when: float, fn: Callable[[], None]):
        self._push(max(when, self.time), "timer", pid, fn)

    def call_later(self, pid: int, delay: float, fn: Callable[[], None]):
        self.call_at(pid, self.time + delay, fn)

    def deliver_at(self, dst: int, when: float, src: int, msg: Any):
        """Out-of-band delivery (crash notifications) at an absolute time."""
        self._push(max(when, self.time), "oob", dst, src, msg)

    def crash_at(self, pid: int, when: float):
        self._push(when, "crash", pid)

    def step(self) -> bool:
        if not self._events:
            return False
        when, _, action, args = heapq.heappop(self._events)
        self.time = when
        self.events_run += 1
        if action == "apply":
            t = args[0]
            if t.target in self.crashed:
                return True
            result = self._apply(t)
            if t.kind is not OpKind.MSG:
                back = (t.target, t.initiator)
                d = self.latency.one_way(t.kind, self.rng, self_link=t.initiator == t.target)
                done = max(self.time + d, self._link_complete.get(back, 0.0))
                self._link_complete[back] = done
                self._push(done, "complete", t, result)
        elif action == "complete":
            t, result = args
            if t.initiator not in self.crashed:
                self._complete(t, result)
        elif action == "timer":
            pid, fn = args
            if pid not in self.crashed:
                fn()
        elif action == "oob":
            dst, src, msg = args
            if dst not in self.crashed and self.procs[dst] is not None:
                self._record("OOB", src, dst, None, None, None, msg=msg)
                self.procs[dst].on_message(src, msg)
        elif action == "crash":
            self.crash(args[0])
            for hook in self.crash_hooks:
                hook(args[0])
        return True

    def add_crash_hook(self, fn: Callable[[int], None]):
        self.crash_hooks.append(fn)

    def run(self, until: Optional[float] = None, predicate: Optional[Callable[[], bool]] = None,
            max_events: Optional[int] = None) -> float:
        count = 0
        while self._events:
            if predicate is not None and predicate():
                break
            if until is not None and self._events[0][0] > until:
                self.time = max(self.time, until)
                break
            if max_events is not None and count >= max_events:
                break
            self.step()
            count += 1
        return self.time


class ChoiceFabric(Fabric):
    """Fabric whose next event is chosen externally (exhaustive exploration).

    Enabled events:
      ("a", i, t)  apply the head request on link i -> t   (t alive)
      ("c", t, i)  complete the head response on link t -> i (i alive)

    Link queues are tuples and regions are copy-on-write, so clone() is cheap
    and clones never observe each other's mutations.
    """

    def __init__(self, n: int, **kw):
        super().__init__(n, **kw)
        self.requests: dict = {}
        self.responses: dict = {}
        self._owned: set = set(range(n))
        self.counters = NullCounters()

    def writable_region(self, pid: int) -> MemoryRegion:
        if pid not in self._owned:
            self.regions[pid] = self.regions[pid].clone()
            self._owned.add(pid)
        return self.regions[pid]

    def _submit(self, t: Ticket):
        link = (t.initiator, t.target)
        self.requests[link] = self.requests.get(link, ()) + (t,)

    def enabled(self) -> list:
        out = []
        crashed = self.crashed
        for (i, t), q in self.requests.items():
            if q and t not in crashed:
                out.append(("a", i, t))
        for (t, i), q in self.responses.items():
            if q and i not in crashed:
                out.append(("c", t, i))
        out.sort()
        return out

    def fire(self, ev):
        kind, x, y = ev
        if kind == "a":
            q = self.requests[(x, y)]
            t = q[0]
            self.requests[(x, y)] = q[1:]
            result = self._apply(t)
            if t.kind is not OpKind.MSG and x not in self.crashed:
                link = (y, x)
                self.responses[link] = self.responses.get(link, ()) + ((t, result),)
        elif kind == "c":
            q = self.responses[(x, y)]
            t, result = q[0]
            self.responses[(x, y)] = q[1:]
            self._complete(t, result)
        else:
            raise ValueError(f"unknown event {ev!r}")

    def crash(self, pid: int):
        super().crash(pid)
        for link in list(self.responses):
            if link[1] == pid:
                self.responses[link] = ()

    def head(self, ev) -> Ticket:
        kind, x, y = ev
        if kind == "a":
            return self.requests[(x, y)][0]
        return self.responses[(x, y)][0][0]

    def clone(self) -> "ChoiceFabric":
        f = ChoiceFabric.__new__(ChoiceFabric)
        f.n = self.n
        f.regions = list(self.regions)
        f._owned = set()
        f.procs = list(self.procs)
        f.crashed = set(self.crashed)
        f.crash_time = dict(self.crash_time)
        f.counters = self.counters.clone()
        f._seq = list(self._seq)
        f.trace = None if self.trace is None else list(self.trace)
        f.apply_log = None if self.apply_log is None else {k: list(v) for k, v in self.apply_log.items()}
        f.requests = {k: v for k, v in self.requests.items() if v}
        f.responses = {k: v for k, v in self.responses.items() if v}
        return f

    def key(self):
        return (
            tuple(r.key() for r in self.regions),
            tuple(sorted(self.crashed)),
            tuple(sorted((k, v) for k, v in self.requests.items() if v)),
            tuple(sorted((k, v) for k, v in self.responses.items() if v)),
        )


def _tkey(t: Ticket):
    return (t.id, t.kind.value, t.slot, t.expected, t.desired, t.payload, t.tag)
