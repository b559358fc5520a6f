"""Domain types shared by every protocol module.

An acceptor's whole state for one consensus slot is the triple
(min_proposal, accepted_proposal, accepted_value). It is packed into a
single 64-bit word so that a remote compare-and-swap can update it atomically:

    bits 63..33  min_proposal       (31 bits)
    bits 32..2   accepted_proposal  (31 bits)
    bits  1..0   accepted value id  (value_bits, default 2)

The all-zero word is the initial state. "No accepted value" is encoded by
accepted_proposal == 0, so every value id is usable for payload.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional

PROPOSAL_BITS = 31
PROPOSAL_LIMIT = 1 << PROPOSAL_BITS
DEFAULT_VALUE_BITS = 2
WORD_BITS = 64


class FieldOverflow(ValueError):
    pass


class MalformedState(ValueError):
    pass


class ProposalOverflow(OverflowError):
    """Raised when a proposal number would reach the CAS fallback threshold."""

    def __init__(self, proposal: int, threshold: int):
        super().__init__(f"proposal {proposal} reached threshold {threshold}")
        self.proposal = proposal
        self.threshold = threshold


class _State(NamedTuple):
    min_proposal: int
    accepted_proposal: int
    accepted_value: Optional[int]


class AcceptorState(_State):
    """(min_proposal, accepted_proposal, accepted_value); accepted_value None means ⊥."""

    __slots__ = ()

    def __new__(cls, min_proposal: int = 0, accepted_proposal: int = 0, accepted_value: Optional[int] = None):
        if accepted_proposal > min_proposal:
            raise MalformedState(f"accepted_proposal {accepted_proposal} > min_proposal {min_proposal}")
        if (accepted_proposal == 0) != (accepted_value is None):
            raise MalformedState("accepted_value must be None exactly when accepted_proposal is 0")
        return _State.__new__(cls, min_proposal, accepted_proposal, accepted_value)

    def __repr__(self):
        return f"AcceptorState({self.min_proposal}, {self.accepted_proposal}, {self.accepted_value})"

    def __str__(self):
        av = "⊥" if self.accepted_value is None else self.accepted_value
        return f"<{self.min_proposal}, {self.accepted_proposal}, {av}>"


INITIAL_STATE = AcceptorState()


def _layout(value_bits: int) -> tuple[int, int]:
    # (shift of accepted_proposal, shift of min_proposal)
    if value_bits < 1 or value_bits + 2 * PROPOSAL_BITS > WORD_BITS:
        raise ValueError(f"value_bits must be in [1, {WORD_BITS - 2 * PROPOSAL_BITS}]")
    return value_bits, value_bits + PROPOSAL_BITS


def pack(state: AcceptorState, value_bits: int = DEFAULT_VALUE_BITS) -> int:
    ap_shift, mp_shift = _layout(value_bits)
    if not 0 <= state.min_proposal < PROPOSAL_LIMIT:
        raise FieldOverflow(f"min_proposal {state.min_proposal} does not fit {PROPOSAL_BITS} bits")
    if not 0 <= state.accepted_proposal < PROPOSAL_LIMIT:
        raise FieldOverflow(f"accepted_proposal {state.accepted_proposal} does not fit {PROPOSAL_BITS} bits")
    vid = 0 if state.accepted_value is None else state.accepted_value
    if not 0 <= vid < (1 << value_bits):
        raise FieldOverflow(f"value id {vid} does not fit {value_bits} bits")
    return (state.min_proposal << mp_shift) | (state.accepted_proposal << ap_shift) | vid


def unpack(word: int, value_bits: int = DEFAULT_VALUE_BITS) -> AcceptorState:
    ap_shift, mp_shift = _layout(value_bits)
    if not 0 <= word < (1 << WORD_BITS):
        raise FieldOverflow(f"word {word:#x} is not a 64-bit unsigned integer")
    mask = PROPOSAL_LIMIT - 1
    mp = (word >> mp_shift) & mask
    ap = (word >> ap_shift) & mask
    vid = word & ((1 << value_bits) - 1)
    if ap > mp:
        raise MalformedState(f"word {word:#x}: accepted_proposal {ap} > min_proposal {mp}")
    if ap == 0:
        if vid:
            raise MalformedState(f"word {word:#x}: value id set without an accepted proposal")
        return AcceptorState(mp, 0, None)
    return AcceptorState(mp, ap, vid)


def fallback_threshold(n_processes: int) -> int:
    """min_proposal at which proposers stop using CAS toward an acceptor."""
    return PROPOSAL_LIMIT - n_processes


def next_proposal(current: int, predicted_mins: Iterable[int], n: int) -> int:
    """Smallest proposal >= current, same residue mod n, above every predicted min.

    Raises ProposalOverflow when the result reaches 2**31 - n. The returned
    value is still available on the exception for callers that fall back to
    message-passing.
    """
    if n < 1:
        raise ValueError("n must be positive")
    top = max(predicted_mins, default=-1)
    proposal = current
    if proposal <= top:
        steps = (top - proposal) // n + 1
        proposal += steps * n
    threshold = fallback_threshold(n)
    if proposal >= threshold:
        raise ProposalOverflow(proposal, threshold)
    return proposal


def majority(n: int) -> int:
    return n // 2 + 1


class Decide(NamedTuple):
    value: int


class _Abort:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "Abort"

    def __reduce__(self):
        return (_Abort, ())


Abort = _Abort()
