"""Wall-clock fabric with real threads, for stress runs.

One worker thread per target applies posted operations in arrival order
(so every link stays FIFO) while holding that word's lock; one loop thread
per process drains its inbox of completions, messages and timers, so
protocol handlers stay single-threaded per process. No timing claims are
made in this mode.
"""

from __future__ import annotations

import queue
import random
import threading
import time
from typing import Callable, Optional

from .core import Abort, Decide
from .fabric import Counters, Fabric, OpKind, Ticket
from .refpaxos import DECIDED, Msg, decode, encode
from .velos import StreamlinedProposer


class _LockedCounters(Counters):
    def __init__(self, n: int):
        super().__init__(n)
        self._lock = threading.Lock()

    def issue(self, pid, kind):
        with self._lock:
            super().issue(pid, kind)

    def complete(self, pid, kind):
        with self._lock:
            super().complete(pid, kind)

    def round(self, pid, critical):
        with self._lock:
            super().round(pid, critical)


class ThreadFabric(Fabric):
    def __init__(self, n: int, **kw):
        super().__init__(n, **kw)
        self.counters = _LockedCounters(n)
        self._word_locks: dict = {}
        self._locks_guard = threading.Lock()
        self._seq_lock = threading.Lock()
        self._targets = [queue.Queue() for _ in range(n)]
        self.inboxes = [queue.Queue() for _ in range(n)]
        self._threads: list[threading.Thread] = []
        self._running = False
        self._start = time.monotonic()
        self.errors: list[BaseException] = []

    def now(self) -> float:
        return time.monotonic() - self._start

    def _ticket(self, kind, initiator, target, **kw) -> Ticket:
        with self._seq_lock:
            return super()._ticket(kind, initiator, target, **kw)

    def _word_lock(self, target, slot) -> threading.Lock:
        key = (target, slot)
        lock = self._word_locks.get(key)
        if lock is None:
            with self._locks_guard:
                lock = self._word_locks.setdefault(key, threading.Lock())
        return lock

    def _submit(self, t: Ticket):
        self._targets[t.target].put(t)

    def _local_update(self, pid, slot):
        self.inboxes[pid].put(("local", slot))

    def call_later(self, pid: int, delay: float, fn: Callable[[], None]):
        timer = threading.Timer(delay, lambda: self.inboxes[pid].put(("timer", fn)))
        timer.daemon = True
        timer.start()

    def _worker(self, target: int):
        q = self._targets[target]
        while True:
            t = q.get()
            if t is None:
                return
            if target in self.crashed:
                continue
            if t.kind is OpKind.MSG:
                self.counters.complete(t.initiator, t.kind)
                self.inboxes[target].put(("msg", t.initiator, t.payload))
                continue
            with self._word_lock(target, t.slot):
                result = self._apply(t)
            self.inboxes[t.initiator].put(("complete", t, result))

    def _loop(self, pid: int):
        inbox = self.inboxes[pid]
        while True:
            item = inbox.get()
            if item is None:
                return
            if pid in self.crashed:
                continue
            proc = self.procs[pid]
            try:
                if item[0] == "complete":
                    self._complete(item[1], item[2])
                elif item[0] == "msg":
                    proc.on_message(item[1], item[2])
                elif item[0] == "timer":
                    item[1]()
                elif item[0] == "local":
                    proc.on_local_update(item[1])
            except BaseException as exc:  # surfaced by stop()
                self.errors.append(exc)

    def start(self):
        self._running = True
        for pid in range(self.n):
            for fn in (self._worker, self._loop):
                th = threading.Thread(target=fn, args=(pid,), daemon=True)
                th.start()
                self._threads.append(th)

    def stop(self):
        for q in self._targets:
            q.put(None)
        for q in self.inboxes:
            q.put(None)
        for th in self._threads:
            th.join(timeout=5)
        self._running = False


class StressNode:
    """Proposes its own id on every slot, retrying with random backoff until it learns a decision."""

    def __init__(self, pid: int, n: int, slots: int, seed: int, max_backoff: float = 0.002):
        self.pid = pid
        self.n = n
        self.slots = slots
        self.rng = random.Random(seed * 1000 + pid)
        self.max_backoff = max_backoff
        self.proposers = {s: StreamlinedProposer(pid, n, list(range(n)), s) for s in range(slots)}
        self.decided: dict[int, int] = {}
        self.outcomes: dict[int, list] = {s: [] for s in range(slots)}
        self.aborts = 0
        self.done = threading.Event()
        self.net: Optional[ThreadFabric] = None

    def bind(self, net: ThreadFabric):
        self.net = net
        net.attach(self)
        for p in self.proposers.values():
            p.listener = self
            p.bind(net)
        return self

    def kick(self):
        self.net.inboxes[self.pid].put(("timer", lambda: self._next(0)))

    def _next(self, slot: int):
        while slot < self.slots and slot in self.decided:
            slot += 1
        if slot >= self.slots:
            self.done.set()
            return
        self.proposers[slot].propose(self.pid)

    def on_outcome(self, p, outcome):
        self.outcomes[p.slot].append(outcome)
        if isinstance(outcome, Decide):
            for q in range(self.n):
                self.net.post_message(self.pid, q, encode(Msg(DECIDED, p.slot, value=outcome.value)))
            self._learn(p.slot, outcome.value)
        else:
            self.aborts += 1
            slot = p.slot
            self.net.call_later(self.pid, self.rng.uniform(0, self.max_backoff), lambda: self._retry(slot))

    def _retry(self, slot):
        if slot not in self.decided:
            self.proposers[slot].propose(self.pid)

    def _learn(self, slot, value):
        if slot not in self.decided:
            self.decided[slot] = value
            self._next(slot + 1)

    def on_prepared(self, p):
        pass

    def on_complete(self, ticket, result):
        tag = ticket.tag
        if tag and tag[0] == "P":
            self.proposers[tag[1]].on_complete(ticket, result)

    def on_message(self, src, data):
        m = decode(data)
        if m.kind == DECIDED:
            self._learn(m.slot, m.value)
        else:
            self.proposers[m.slot].on_reply(src, m)

    def on_local_update(self, slot):
        pass


def run_stress(n: int = 3, slots: int = 200, seed: int = 0, timeout: float = 60.0) -> dict:
    """All processes contend on every slot; returns agreement findings and counts."""
    fabric = ThreadFabric(n)
    nodes = [StressNode(i, n, slots, seed).bind(fabric) for i in range(n)]
    fabric.start()
    for node in nodes:
        node.kick()
    deadline = time.monotonic() + timeout
    for node in nodes:
        node.done.wait(max(0.0, deadline - time.monotonic()))
    fabric.stop()
    violations = []
    for s in range(slots):
        values = {o.value for node in nodes for o in node.outcomes[s] if isinstance(o, Decide)}
        values |= {node.decided[s] for node in nodes if s in node.decided}
        if len(values) > 1:
            violations.append(f"slot {s}: decided {sorted(values)}")
    for node in nodes:
        for s, outs in node.outcomes.items():
            if sum(isinstance(o, Decide) for o in outs) > 1:
                violations.append(f"process {node.pid} decided slot {s} twice")
    violations.extend(f"handler error: {e!r}" for e in fabric.errors)
    finished = all(node.done.is_set() for node in nodes)
    return {
        "slots": slots, "processes": n, "finished": finished,
        "decided_slots": min(len(node.decided) for node in nodes),
        "aborts": sum(node.aborts for node in nodes),
        "cas_issued": fabric.counters.total("issued", OpKind.CAS),
        "counters_sane": fabric.counters.sane(),
        "violations": violations,
    }
