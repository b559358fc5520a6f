"""Process container and the bookkeeping shared by all single-slot proposers."""

from __future__ import annotations

from enum import Enum
from typing import Any, Optional

from .core import Abort, Decide, majority
from .fabric import Fabric, Process, Ticket


class Mutation(str, Enum):
    """Deliberate protocol bugs used to confirm the checker is sensitive."""

    DROP_CAS_ABORT = "drop-cas-abort"
    SKIP_ADOPTION = "skip-adoption"
    ACCEPT_BELOW_MIN = "accept-below-min"


class ProposerBase:
    """One consensus instance seen from one proposer.

    Subclasses implement _start_prepare/_start_accept and feed results into
    the per-phase ``results`` dict. ``outcomes`` records every Decide/Abort in
    order. With ``retries`` > 0 an Abort immediately starts a new attempt.
    """

    def __init__(self, pid: int, n_procs: int, acceptors: list[int], slot=0, *,
                 value_bits: int = 2, mutation: Optional[Mutation] = None):
        self.pid = pid
        self.n_procs = n_procs
        self.acceptors = list(acceptors)
        self.slot = slot
        self.value_bits = value_bits
        self.mutation = mutation
        self.quorum = majority(len(self.acceptors))
        self.decided = False
        self.proposal = pid
        self.proposed_value: Optional[int] = None
        self.phase: Optional[str] = None
        self.attempt = 0
        self.results: dict = {}
        self.outcomes: list = []
        self.retries = 0
        self.listener: Any = None
        self.net: Optional[Fabric] = None
        self.critical = True

    # -- public ------------------------------------------------------------
    def bind(self, net: Fabric):
        self.net = net
        return self

    def propose(self, value: int):
        self.proposed_value = value
        if self.decided or self.phase is not None:
            return
        self.attempt += 1
        self.results = {}
        self.phase = "prepare"
        self._start_prepare()

    @property
    def busy(self) -> bool:
        return self.phase is not None

    def decision(self) -> Optional[int]:
        for o in self.outcomes:
            if isinstance(o, Decide):
                return o.value
        return None

    # -- helpers for subclasses -------------------------------------------
    def _tag(self, *rest):
        return ("P", self.slot, self.attempt) + rest

    def _record(self, acceptor: int, result) -> bool:
        """Store a phase result; True once a majority is in for the first time."""
        if self.phase is None or acceptor in self.results:
            return False
        self.results[acceptor] = result
        return len(self.results) == self.quorum

    def _count_round(self):
        self.net.counters.round(self.pid, self.critical)

    def _finish(self, outcome):
        self.phase = None
        self.outcomes.append(outcome)
        if isinstance(outcome, Decide):
            self.decided = True
        self.net.note(self.pid, "OUTCOME", slot=self.slot, attempt=self.attempt,
                      proposal=self.proposal,
                      outcome="ABORT" if outcome is Abort else ["DECIDE", outcome.value])
        if self.listener is not None:
            self.listener.on_outcome(self, outcome)
        elif outcome is Abort and self.retries > 0:
            self.retries -= 1
            self.propose(self.proposed_value)

    def _copy_into(self, other: "ProposerBase", net: Fabric):
        other.__dict__.update(self.__dict__)
        other.acceptors = self.acceptors
        other.results = dict(self.results)
        other.outcomes = list(self.outcomes)
        other.listener = None
        other.net = net

    def clone(self, net: Fabric) -> "ProposerBase":
        other = self.__class__.__new__(self.__class__)
        self._copy_into(other, net)
        return other

    def key(self):
        return (self.decided, self.proposal, self.proposed_value, self.phase, self.attempt,
                tuple(sorted(self.results.items())), tuple(self.outcomes), self.retries)

    # -- protocol hooks ----------------------------------------------------
    def _start_prepare(self):
        raise NotImplementedError

    def on_complete(self, ticket: Ticket, result):
        pass

    def wants(self, ticket: Ticket) -> bool:
        """False when delivering this completion would not change anything."""
        return True

    def wants_reply(self, src: int, msg) -> bool:
        return True

    def on_reply(self, src: int, msg):
        pass


class Node(Process):
    """A process that may host a proposer and/or an acceptor role."""

    def __init__(self, pid: int, proposer=None, acceptor=None):
        self.pid = pid
        self.proposer = proposer
        self.acceptor = acceptor

    def on_complete(self, ticket, result):
        if self.proposer is not None:
            self.proposer.on_complete(ticket, result)

    def on_message(self, src, msg):
        from .refpaxos import decode, is_request

        m = decode(msg)
        if is_request(m):
            if self.acceptor is not None:
                self.acceptor.on_request(src, m)
        elif self.proposer is not None:
            self.proposer.on_reply(src, m)

    def on_local_update(self, slot):
        if self.acceptor is not None:
            self.acceptor.on_local_update(slot)

    def inert(self, kind: str, ticket) -> bool:
        """True when delivering ``ticket`` here is a no-op (used for reduction)."""
        if kind == "c":
            return self.proposer is None or not self.proposer.wants(ticket)
        from .refpaxos import decode, is_request

        m = decode(ticket.payload)
        if is_request(m):
            return False
        return self.proposer is None or not self.proposer.wants_reply(ticket.initiator, m)

    def clone(self, net: Fabric) -> "Node":
        return Node(
            self.pid,
            None if self.proposer is None else self.proposer.clone(net),
            None if self.acceptor is None else self.acceptor.clone(net),
        )

    def key(self):
        return (
            None if self.proposer is None else self.proposer.key(),
            None if self.acceptor is None else self.acceptor.key(),
        )
