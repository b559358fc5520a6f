"""Turning a simple atomic RPC into a fetch + compare-and-swap.

An RPC here is (compare, f, projection): the callee runs
``if compare(x, state): state = f(state, x)`` atomically and returns
``projection(state)``. When the callee's state lives in one remotely
CAS-able word, the caller can run the same RPC itself:

    expected = fetch()
    if not compare(x, expected): reply projection(expected)
    move_to = f(expected, x)
    old = cas(expected -> move_to)
    old == expected ? reply projection(move_to) : abort

The reply also carries the compare outcome (``ok``) since Paxos prepare acks
are exactly that outcome.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, NamedTuple, Optional, Union

from .core import DEFAULT_VALUE_BITS, AcceptorState, pack, unpack
from .fabric import SimFabric


@dataclass(frozen=True)
class RpcSpec:
    name: str
    compare: Callable[[Any, AcceptorState], bool]
    f: Callable[[AcceptorState, Any], AcceptorState]
    projection: Callable[[AcceptorState], Any]


class Reply(NamedTuple):
    ok: bool
    value: Any


class _Aborted:
    def __repr__(self):
        return "Aborted"

    def __reduce__(self):
        return (_aborted, ())


Aborted = _Aborted()


def _aborted():
    return Aborted


CasRpcResult = Union[Reply, _Aborted]


def _prepare_compare(proposal, s: AcceptorState) -> bool:
    return proposal > s.min_proposal


def _prepare_f(s: AcceptorState, proposal) -> AcceptorState:
    return AcceptorState(proposal, s.accepted_proposal, s.accepted_value)


def _prepare_projection(s: AcceptorState):
    # widened with min_proposal so an aborting proposer can bump past it
    return (s.accepted_proposal, s.accepted_value, s.min_proposal)


def _accept_compare(x, s: AcceptorState) -> bool:
    return x[0] >= s.min_proposal


def _accept_f(s: AcceptorState, x) -> AcceptorState:
    proposal, value = x
    return AcceptorState(proposal, proposal, value)


def _accept_projection(s: AcceptorState):
    return s.min_proposal


PREPARE_SPEC = RpcSpec("prepare", _prepare_compare, _prepare_f, _prepare_projection)
ACCEPT_SPEC = RpcSpec("accept", _accept_compare, _accept_f, _accept_projection)

# accept that ignores min_proposal; used only by checker mutation tests
PERMISSIVE_ACCEPT_SPEC = RpcSpec("accept-permissive", lambda x, s: True, _accept_f, _accept_projection)


def rpc(spec: RpcSpec, x, state: AcceptorState) -> tuple[AcceptorState, Reply]:
    ok = spec.compare(x, state)
    if ok:
        state = spec.f(state, x)
    return state, Reply(ok, spec.projection(state))


def plan(spec: RpcSpec, x, expected: AcceptorState) -> Union[Reply, AcceptorState]:
    """First half of cas-rpc: a Reply when no CAS is needed, else the move_to state."""
    if not spec.compare(x, expected):
        return Reply(False, spec.projection(expected))
    return spec.f(expected, x)


def finish(spec: RpcSpec, expected_word: int, move_to: AcceptorState, old_word: int) -> CasRpcResult:
    if old_word == expected_word:
        return Reply(True, spec.projection(move_to))
    return Aborted


def cas_rpc(
    fabric: SimFabric,
    initiator: int,
    target: int,
    slot,
    spec: RpcSpec,
    x,
    fetch: Optional[Callable[[], int]] = None,
    value_bits: int = DEFAULT_VALUE_BITS,
    between: Optional[Callable[[], None]] = None,
) -> Optional[CasRpcResult]:
    """Run one cas-rpc to completion on a virtual-time fabric.

    ``fetch`` replaces the remote READ with a locally known (predicted) word.
    ``between`` runs after the fetch returns and before the CAS is posted, so
    tests can interpose concurrent operations. Returns None if the target
    never answered (crashed).
    """
    done: dict = {}

    class _Caller:
        pid = initiator

        def on_complete(self, ticket, result):
            done[ticket.id] = result

        def on_message(self, src, msg):
            pass

        def on_local_update(self, slot):
            pass

    previous = fabric.procs[initiator]
    fabric.procs[initiator] = _Caller()
    try:
        if fetch is None:
            t = fabric.post_read(initiator, target, slot)
            fabric.run(predicate=lambda: t.id in done)
            if t.id not in done:
                return None
            expected_word = done[t.id]
        else:
            expected_word = fetch()
        expected = unpack(expected_word, value_bits)
        step = plan(spec, x, expected)
        if isinstance(step, Reply):
            return step
        if between is not None:
            between()
        move_word = pack(step, value_bits)
        t = fabric.post_cas(initiator, target, slot, expected_word, move_word)
        fabric.run(predicate=lambda: t.id in done)
        if t.id not in done:
            return None
        return finish(spec, expected_word, step, done[t.id])
    finally:
        fabric.procs[initiator] = previous
