"""One-sided abortable consensus over CAS.

DirectProposer fetches every acceptor word before each CAS. Streamlined
proposers keep a predicted copy of each remote word instead, bump their
proposal above every predicted min_proposal up front, and CAS
predicted -> move_to in parallel, updating predictions from whatever each
CAS returns. Wrong predictions only cost an extra abort.
"""

from __future__ import annotations

from typing import Optional

from . import casrpc
from .casrpc import Aborted, Reply
from .core import (Abort, AcceptorState, Decide, ProposalOverflow, fallback_threshold,
                   next_proposal, pack, unpack)
from .fabric import OpKind, Ticket
from .node import Mutation, ProposerBase
from .refpaxos import ACCEPT, ACCEPTED, PREPARE, PREPARED, Msg, encode


class TieError(AssertionError):
    pass


def highest_accepted(states) -> Optional[tuple[int, int]]:
    """(accepted_proposal, value) with the highest accepted_proposal, or None."""
    best = None
    for ap, av in states:
        if ap <= 0:
            continue
        if best is not None and ap == best[0] and av != best[1]:
            raise TieError(f"two values accepted under proposal {ap}")
        if best is None or ap > best[0]:
            best = (ap, av)
    return best


class DirectProposer(ProposerBase):
    """Fetch-then-CAS proposer: every remote call is a full cas-rpc."""

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.inflight: dict = {}

    def _spec(self):
        if self.phase == "prepare":
            return casrpc.PREPARE_SPEC
        if self.mutation is Mutation.ACCEPT_BELOW_MIN:
            return casrpc.PERMISSIVE_ACCEPT_SPEC
        return casrpc.ACCEPT_SPEC

    def _x(self):
        return self.proposal if self.phase == "prepare" else (self.proposal, self.proposed_value)

    def _fan_out(self):
        self.inflight = {}
        self._count_round()
        for a in self.acceptors:
            self.net.post_read(self.pid, a, self.slot, tag=self._tag(self.phase, "read"))

    def _start_prepare(self):
        self.proposal += self.n_procs
        self._fan_out()

    def wants(self, ticket: Ticket) -> bool:
        tag = ticket.tag
        return bool(tag) and tag[0] == "P" and tag[2] == self.attempt and tag[3] == self.phase

    def on_complete(self, ticket: Ticket, result):
        tag = ticket.tag
        if not tag or tag[0] != "P" or tag[2] != self.attempt or tag[3] != self.phase:
            return
        a = ticket.target
        spec = self._spec()
        if tag[4] == "read":
            step = casrpc.plan(spec, self._x(), unpack(result, self.value_bits))
            if isinstance(step, Reply):
                self._got(a, step)
                return
            desired = pack(step, self.value_bits)
            self.inflight[a] = (result, step)
            self.net.post_cas(self.pid, a, self.slot, result, desired, tag=self._tag(self.phase, "cas"))
        else:
            expected_word, move_to = self.inflight.pop(a)
            res = casrpc.finish(spec, expected_word, move_to, result)
            if res is Aborted and self.mutation is Mutation.DROP_CAS_ABORT:
                res = Reply(True, spec.projection(move_to))
            self._got(a, res)

    def _got(self, acceptor, res):
        if self._record(acceptor, res):
            if self.phase == "prepare":
                self._prepared()
            else:
                self._accepted()

    def _prepared(self):
        results = list(self.results.values())
        replies = [r for r in results if r is not Aborted]
        best = highest_accepted((r.value[0], r.value[1]) for r in replies)
        if best is not None and self.mutation is not Mutation.SKIP_ADOPTION:
            self.proposed_value = best[1]
        if any(r is Aborted or not r.ok for r in results):
            self._finish(Abort)
            return
        self.phase = "accept"
        self.results = {}
        self._fan_out()

    def _accepted(self):
        if any(r is Aborted or r.value > self.proposal for r in self.results.values()):
            self._finish(Abort)
        else:
            self._finish(Decide(self.proposed_value))

    def clone(self, net):
        other = super().clone(net)
        other.inflight = dict(self.inflight)
        return other

    def key(self):
        return super().key() + (tuple(sorted(self.inflight.items())),)


class StreamlinedProposer(ProposerBase):
    """Prediction-driven proposer issuing one CAS per acceptor per phase.

    Optional extras used by the replicated log:
      * ``payload``: bytes written to this proposer's write-exclusive buffer
        ahead of its own accept CAS (value indirection).
      * prepare-only runs (``prepare_only``) for pre-preparation, followed by
        ``accept`` once a request is available.
      * per-acceptor message-passing fallback once proposal numbers reach
        the CAS threshold.
    """

    def __init__(self, *args, predicted: Optional[list] = None, **kw):
        super().__init__(*args, **kw)
        if predicted is None:
            predicted = [AcceptorState()] * len(self.acceptors)
        self.predicted: list = list(predicted)
        self.pending: dict = {}
        self.move_to: dict = {}
        self.payload: Optional[bytes] = None
        self.rpc: frozenset = frozenset()
        self.threshold = fallback_threshold(self.n_procs)
        self.prepared = False
        self.then_accept = True
        self.cas_failed = False

    # -- entry points -----------------------------------------------------
    def prepare_only(self):
        if self.decided or self.phase is not None:
            return
        self.then_accept = False
        self.attempt += 1
        self.results = {}
        self.phase = "prepare"
        self._start_prepare()

    def propose(self, value):
        self.then_accept = True
        super().propose(value)

    def accept(self, value):
        """Run the accept phase on a slot this proposer already prepared."""
        if self.proposed_value is None:
            self.proposed_value = value
        self.attempt += 1
        self.phase = "accept"
        self._start_accept()

    # -- phases -----------------------------------------------------------
    def _idx(self, acceptor):
        return self.acceptors.index(acceptor)

    def _start_prepare(self):
        self.prepared = False
        self.results = {}
        self.cas_failed = False
        self.move_to = {}
        if self.mutation is Mutation.ACCEPT_BELOW_MIN:
            # ignores observed min_proposals, so it may write below them
            self.proposal += self.n_procs
        else:
            mins = [p.min_proposal for p in self.predicted]
            try:
                self.proposal = next_proposal(self.proposal, mins, self.n_procs)
            except ProposalOverflow as exc:
                self.proposal = exc.proposal
        self._count_round()
        for i, a in enumerate(self.acceptors):
            pred = self.predicted[i]
            self._send(a, pred, AcceptorState(self.proposal, pred.accepted_proposal, pred.accepted_value))

    def _start_accept(self):
        self.results = {}
        self.cas_failed = False
        self.move_to = {}
        self._count_round()
        target = AcceptorState(self.proposal, self.proposal, self.proposed_value)
        for i, a in enumerate(self.acceptors):
            self._send(a, self.predicted[i], target)

    def _send(self, a, expected: AcceptorState, move_to: AcceptorState):
        self.move_to[a] = move_to
        if a not in self.rpc and move_to.min_proposal >= self.threshold:
            self.rpc = self.rpc | {a}
            self.net.note(self.pid, "RPC_MODE", acceptor=a, slot=self.slot)
        if a in self.rpc:
            if self.phase == "prepare":
                msg = Msg(PREPARE, self.slot, self.proposal)
            else:
                msg = Msg(ACCEPT, self.slot, self.proposal, self.proposed_value)
            self.pending[a] = ("msg", self.attempt, self.phase, self.proposal, expected, move_to)
            self.net.post_message(self.pid, a, encode(msg))
            return
        exp_w = pack(expected, self.value_bits)
        new_w = pack(move_to, self.value_bits)
        tag = self._tag(self.phase)
        own_value = self.phase == "accept" and self.payload is not None and move_to.accepted_value == self.pid
        if own_value:
            t = self.net.post_write_then_cas(self.pid, a, self.slot, self.payload, exp_w, new_w, tag=tag)
        else:
            t = self.net.post_cas(self.pid, a, self.slot, exp_w, new_w, tag=tag)
        self.pending[a] = (t.id, self.attempt, self.phase, self.proposal, expected, move_to)

    # -- completions ------------------------------------------------------
    def wants(self, ticket: Ticket) -> bool:
        p = self.pending.get(ticket.target)
        return p is not None and p[0] == ticket.id

    def wants_reply(self, src, m: Msg) -> bool:
        p = self.pending.get(src)
        return p is not None and p[0] == "msg" and m.proposal == p[3] and m.slot == self.slot

    def on_complete(self, ticket: Ticket, result):
        a = ticket.target
        p = self.pending.get(a)
        if p is None or p[0] != ticket.id:
            return
        del self.pending[a]
        _, attempt, phase, _, expected, move_to = p
        read = unpack(result, self.value_bits)
        ok = result == pack(expected, self.value_bits)
        if not ok and read.min_proposal >= self.threshold:
            # acceptor handed off to message mode; its real state is unknown
            self.rpc = self.rpc | {a}
            self.net.note(self.pid, "RPC_MODE", acceptor=a, slot=self.slot)
            read = AcceptorState()
        self._observe(a, attempt, phase, ok, move_to if ok else read)

    def on_reply(self, src, m: Msg):
        p = self.pending.get(src)
        if p is None or p[0] != "msg" or m.proposal != p[3] or m.slot != self.slot:
            return
        _, attempt, phase, proposal, expected, move_to = p
        if (phase == "prepare") != (m.kind == PREPARED):
            return
        del self.pending[src]
        if m.kind == PREPARED:
            ok = m.ack
            seen = AcceptorState(m.mp, m.ap, m.av)
        else:
            ok = m.mp <= proposal
            seen = move_to if ok else AcceptorState(m.mp)
        self._observe(src, attempt, phase, ok, seen)

    def _observe(self, a, attempt, phase, ok, seen: AcceptorState):
        current = attempt == self.attempt and phase == self.phase
        if not current:
            # straggler from a finished phase; optimistic move_to was already installed
            self.predicted[self._idx(a)] = seen
            return
        self.predicted[self._idx(a)] = seen
        if not ok:
            self.cas_failed = True
        if self._record(a, ok):
            for b in self.acceptors:
                if b not in self.results and b in self.move_to:
                    self.predicted[self._idx(b)] = self.move_to[b]
            if self.phase == "prepare":
                self._prepared()
            else:
                self._accepted()

    def _failed(self) -> bool:
        if self.mutation is Mutation.DROP_CAS_ABORT:
            return False
        return self.cas_failed

    def _prepared(self):
        if self._failed():
            self._finish(Abort)
            return
        best = highest_accepted((p.accepted_proposal, p.accepted_value) for p in self.predicted)
        if best is not None and self.mutation is not Mutation.SKIP_ADOPTION:
            self.proposed_value = best[1]
        self.prepared = True
        if not self.then_accept:
            self.phase = None
            self.net.note(self.pid, "PREPARED", slot=self.slot, proposal=self.proposal,
                          adopted=None if best is None else best[1])
            if self.listener is not None:
                self.listener.on_prepared(self)
            return
        self.phase = "accept"
        self._start_accept()

    def _accepted(self):
        if self._failed():
            self._finish(Abort)
        else:
            self._finish(Decide(self.proposed_value))

    def clone(self, net):
        other = super().clone(net)
        other.predicted = list(self.predicted)
        other.pending = dict(self.pending)
        other.move_to = dict(self.move_to)
        return other

    def key(self):
        return super().key() + (
            tuple(self.predicted),
            tuple(sorted(self.pending.items())),
            self.rpc, self.prepared, self.cas_failed, self.then_accept,
        )
