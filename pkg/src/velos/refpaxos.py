"""Message-passing abortable consensus: the reference protocol.

Serves as the oracle for the one-sided variants and as the engine an
acceptor switches to once its proposal numbers no longer fit a CAS word.
"""

from __future__ import annotations

import struct
from typing import NamedTuple, Optional

from .core import (DEFAULT_VALUE_BITS, PROPOSAL_LIMIT, Abort, AcceptorState, Decide,
                   fallback_threshold, pack, unpack)
from .fabric import Fabric
from .node import Mutation, ProposerBase

PREPARE, PREPARED, ACCEPT, ACCEPTED, DECIDED, CRASHED, QUERY, STATE = range(1, 9)
KIND_NAMES = {PREPARE: "PREPARE", PREPARED: "PREPARED", ACCEPT: "ACCEPT",
              ACCEPTED: "ACCEPTED", DECIDED: "DECIDED", CRASHED: "CRASHED",
              QUERY: "QUERY", STATE: "STATE"}

WIRE_VERSION = 1
_WIRE = struct.Struct(">BBqqqBqqq")
_NONE = -1


class Msg(NamedTuple):
    kind: int
    slot: int = 0
    proposal: int = 0
    value: Optional[int] = None
    ack: bool = False
    ap: int = 0
    av: Optional[int] = None
    mp: int = 0


def encode(m: Msg) -> bytes:
    return _WIRE.pack(
        WIRE_VERSION, m.kind, m.slot, m.proposal, _NONE if m.value is None else m.value,
        int(m.ack), m.ap, _NONE if m.av is None else m.av, m.mp,
    )


def decode(data) -> Msg:
    if isinstance(data, Msg):
        return data
    version, kind, slot, proposal, value, ack, ap, av, mp = _WIRE.unpack(data)
    if version != WIRE_VERSION:
        raise ValueError(f"unsupported wire version {version}")
    return Msg(kind, slot, proposal, None if value == _NONE else value, bool(ack), ap,
               None if av == _NONE else av, mp)


def is_request(m: Msg) -> bool:
    return m.kind in (PREPARE, ACCEPT, QUERY)


class PreparedReply(NamedTuple):
    ack: bool
    accepted_proposal: int
    accepted_value: Optional[int]
    min_proposal: int


class AcceptedReply(NamedTuple):
    min_proposal: int


def handle_prepare(state: AcceptorState, proposal: int) -> tuple[AcceptorState, PreparedReply]:
    ack = proposal > state.min_proposal
    if ack:
        state = AcceptorState(proposal, state.accepted_proposal, state.accepted_value)
    return state, PreparedReply(ack, state.accepted_proposal, state.accepted_value, state.min_proposal)


def handle_accept(state: AcceptorState, proposal: int, value: int,
                  permissive: bool = False) -> tuple[AcceptorState, AcceptedReply]:
    if proposal >= state.min_proposal or permissive:
        state = AcceptorState(proposal, proposal, value)
    return state, AcceptedReply(state.min_proposal)


class MonotonicityError(AssertionError):
    pass


def check_monotone(before: AcceptorState, after: AcceptorState):
    if after.min_proposal < before.min_proposal or after.accepted_proposal < before.accepted_proposal:
        raise MonotonicityError(f"acceptor state regressed {before} -> {after}")


class Acceptor:
    """Acceptor role answering PREPARE/ACCEPT messages.

    In "cas" mode the authoritative state is the packed word in the owner's
    memory region and this role is idle until a handoff: the first request
    message, or a local word at or above the fallback threshold, freezes every
    word to a sentinel (so stale CASes fail) and seeds message-mode state from
    the words.
    """

    def __init__(self, pid: int, n_procs: int, mode: str = "rpc", *, value_bits: int = DEFAULT_VALUE_BITS,
                 mutation: Optional[Mutation] = None, strict: bool = True):
        self.pid = pid
        self.n_procs = n_procs
        self.mode = mode
        self.value_bits = value_bits
        self.mutation = mutation
        self.strict = strict
        self.states: dict = {}
        self.default = AcceptorState()
        self.violations: list = []
        self.net: Optional[Fabric] = None

    def bind(self, net: Fabric):
        self.net = net
        if self.mode == "cas":
            self.on_local_update(None)
        return self

    @property
    def sentinel(self) -> int:
        return pack(AcceptorState(PROPOSAL_LIMIT - 1, 0, None), self.value_bits)

    def handoff(self):
        if self.mode == "rpc":
            return
        region = self.net.writable_region(self.pid)
        self.default = unpack(region.default_word, self.value_bits)
        for slot, word in list(region.words.items()):
            self.states[slot] = unpack(word, self.value_bits)
        sentinel = self.sentinel
        region.set_default(sentinel)
        for slot in list(region.words):
            self.net.local_cas(self.pid, slot, region.words[slot], sentinel)
        self.mode = "rpc"
        self.net.note(self.pid, "HANDOFF", slots=len(self.states))

    def on_local_update(self, slot):
        if self.mode != "cas":
            return
        region = self.net.regions[self.pid]
        threshold = fallback_threshold(self.n_procs)
        words = [region.default_word] + list(region.words.values()) if slot is None else [region.read(slot)]
        if any(unpack(w, self.value_bits).min_proposal >= threshold for w in words):
            self.handoff()

    def state(self, slot) -> AcceptorState:
        return self.states.get(slot, self.default)

    def on_request(self, src: int, m: Msg):
        if m.kind == QUERY:
            # read-only; never triggers a handoff
            if self.mode == "cas":
                st = unpack(self.net.regions[self.pid].read(m.slot), self.value_bits)
            else:
                st = self.state(m.slot)
            self.net.post_message(self.pid, src, encode(
                Msg(STATE, m.slot, m.proposal, ap=st.accepted_proposal, av=st.accepted_value, mp=st.min_proposal)))
            return
        if self.mode == "cas":
            self.handoff()
        before = self.state(m.slot)
        if m.kind == PREPARE:
            after, r = handle_prepare(before, m.proposal)
            reply = Msg(PREPARED, m.slot, m.proposal, ack=r.ack, ap=r.accepted_proposal,
                        av=r.accepted_value, mp=r.min_proposal)
        else:
            permissive = self.mutation is Mutation.ACCEPT_BELOW_MIN
            after, r = handle_accept(before, m.proposal, m.value, permissive)
            reply = Msg(ACCEPTED, m.slot, m.proposal, value=m.value, mp=r.min_proposal)
        try:
            check_monotone(before, after)
        except MonotonicityError as exc:
            if self.strict:
                raise
            self.violations.append(str(exc))
        self.states[m.slot] = after
        self.net.post_message(self.pid, src, encode(reply))

    def clone(self, net: Fabric) -> "Acceptor":
        other = Acceptor.__new__(Acceptor)
        other.__dict__.update(self.__dict__)
        other.states = dict(self.states)
        other.violations = list(self.violations)
        other.net = net
        return other

    def key(self):
        return (self.mode, tuple(sorted(self.states.items())), self.default, len(self.violations))


class RefProposer(ProposerBase):
    """Proposer side of the message-passing protocol."""

    def _start_prepare(self):
        self.proposal += self.n_procs
        self._count_round()
        for a in self.acceptors:
            self.net.post_message(self.pid, a, encode(Msg(PREPARE, self.slot, self.proposal)))

    def _start_accept(self):
        self.phase = "accept"
        self.results = {}
        self._count_round()
        for a in self.acceptors:
            self.net.post_message(
                self.pid, a, encode(Msg(ACCEPT, self.slot, self.proposal, self.proposed_value)))

    def wants_reply(self, src: int, m: Msg) -> bool:
        if m.slot != self.slot or m.proposal != self.proposal or src in self.results:
            return False
        return (m.kind == PREPARED and self.phase == "prepare") or (m.kind == ACCEPTED and self.phase == "accept")

    def on_reply(self, src: int, m: Msg):
        if m.slot != self.slot or m.proposal != self.proposal:
            return
        if m.kind == PREPARED and self.phase == "prepare":
            if self._record(src, m):
                self._prepared()
        elif m.kind == ACCEPTED and self.phase == "accept":
            if self._record(src, m):
                self._accepted()

    def _prepared(self):
        replies = list(self.results.values())
        accepted = [r for r in replies if r.ap > 0]
        if accepted and self.mutation is not Mutation.SKIP_ADOPTION:
            best = max(accepted, key=lambda r: r.ap)
            self.proposed_value = best.av
        if self.mutation is not Mutation.DROP_CAS_ABORT and not all(r.ack for r in replies):
            self._finish(Abort)
            return
        self._start_accept()

    def _accepted(self):
        if any(r.mp > self.proposal for r in self.results.values()):
            self._finish(Abort)
        else:
            self._finish(Decide(self.proposed_value))
