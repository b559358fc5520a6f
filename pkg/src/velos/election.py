"""Leader election from crash notifications, and consensus on top of it.

A crashed process is announced to every live process after the detection
delay. There are no false suspicions, so the view converges once the last
notification lands; the leader is the lowest-id proposer not suspected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .core import Abort, Decide
from .fabric import Process, SimFabric
from .refpaxos import CRASHED, DECIDED, Acceptor, Msg, RefProposer, decode, encode, is_request
from .velos import DirectProposer, StreamlinedProposer


@dataclass
class FailureView:
    proposers: list
    detection_delay: float = 30.0
    suspected: set = field(default_factory=set)

    def suspect(self, pid: int):
        self.suspected.add(pid)

    def alive(self, pid: int) -> bool:
        return pid not in self.suspected


def current_leader(view: FailureView) -> Optional[int]:
    for p in sorted(view.proposers):
        if p not in view.suspected:
            return p
    return None


def crash_notice(pid: int) -> bytes:
    return encode(Msg(CRASHED, value=pid))


class Detector:
    """Schedules crash notifications on a SimFabric.

    ``jitter`` in [0, 1] spreads each delivery uniformly over
    [delay * (1 - jitter), delay]; delivery never exceeds the delay.
    """

    def __init__(self, fabric: SimFabric, delay: float = 30.0, jitter: float = 0.0):
        self.fabric = fabric
        self.delay = delay
        self.jitter = jitter
        fabric.add_crash_hook(self._crashed)

    def _crashed(self, pid: int):
        now = self.fabric.now()
        self.fabric.note(pid, "CRASHED", detection_delay=self.delay)
        for q in range(self.fabric.n):
            if q == pid or not self.fabric.alive(q):
                continue
            d = self.delay
            if self.jitter:
                d = self.fabric.rng.uniform(self.delay * (1 - self.jitter), self.delay)
            self.fabric.deliver_at(q, now + d, pid, crash_notice(pid))


ENGINES = {"refpaxos": RefProposer, "direct": DirectProposer, "streamlined": StreamlinedProposer}


class ConsensusNode(Process):
    """Consensus from abortable consensus plus a leader oracle (one instance).

    While this process trusts itself it keeps re-proposing after every Abort;
    a Decide is broadcast and every process decides the first DECIDED it hears.
    """

    def __init__(self, pid: int, n: int, proposers: list, acceptors: list, *,
                 engine: str = "streamlined", detection_delay: float = 30.0,
                 retry_delay: float = 0.0, acceptor_role: bool = False):
        self.pid = pid
        self.n = n
        self.view = FailureView(list(proposers), detection_delay)
        self.leader = False
        self.proposed = False
        self.decided = False
        self.decision: Optional[int] = None
        self.decided_at: Optional[float] = None
        self.proposed_value: Optional[int] = None
        self.retry_delay = retry_delay
        self.attempts = 0
        self.abortable = None
        if pid in proposers:
            self.abortable = ENGINES[engine](pid, n, acceptors, 0)
            self.abortable.listener = self
        self.acceptor = Acceptor(pid, n, "rpc") if acceptor_role or engine == "refpaxos" else None
        self.net: Optional[SimFabric] = None

    def bind(self, net: SimFabric):
        self.net = net
        net.attach(self)
        if self.abortable is not None:
            self.abortable.bind(net)
        if self.acceptor is not None:
            self.acceptor.bind(net)
        self.on_trust(current_leader(self.view))
        return self

    # -- Alg: consensus wrapper --------------------------------------------
    def propose(self, value: int):
        self.proposed_value = value
        self._poll()

    def on_trust(self, leader: Optional[int]):
        self.leader = leader == self.pid
        self.net.note(self.pid, "TRUST", leader=leader)
        self._poll()

    def _poll(self):
        if self.leader and not self.proposed and not self.decided and self.proposed_value is not None \
                and self.abortable is not None and not self.abortable.decided:
            self.proposed = True
            self.attempts += 1
            self.abortable.propose(self.proposed_value)

    def on_outcome(self, proposer, outcome):
        if isinstance(outcome, Decide):
            for q in range(self.n):
                self.net.post_message(self.pid, q, encode(Msg(DECIDED, value=outcome.value)))
        elif outcome is Abort:
            self.proposed = False
            if self.retry_delay:
                self.net.call_later(self.pid, self.retry_delay, self._poll)
            else:
                self._poll()

    def on_prepared(self, proposer):
        pass

    # -- fabric callbacks ---------------------------------------------------
    def on_complete(self, ticket, result):
        if self.abortable is not None:
            self.abortable.on_complete(ticket, result)

    def on_message(self, src, data):
        m = decode(data)
        if m.kind == CRASHED:
            self.view.suspect(m.value)
            self.on_trust(current_leader(self.view))
        elif m.kind == DECIDED:
            if not self.decided:
                self.decided = True
                self.decision = m.value
                self.decided_at = self.net.now()
                self.net.note(self.pid, "DECIDE", value=m.value)
        elif is_request(m):
            if self.acceptor is not None:
                self.acceptor.on_request(src, m)
        elif self.abortable is not None:
            self.abortable.on_reply(src, m)
