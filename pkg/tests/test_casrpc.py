import random

from hypothesis import given, settings
from hypothesis import strategies as st

from velos import casrpc
from velos.casrpc import ACCEPT_SPEC, PREPARE_SPEC, Aborted, Reply, rpc
from velos.core import AcceptorState, pack, unpack
from velos.fabric import LatencyModel, SimFabric
from velos.refpaxos import handle_accept, handle_prepare
from velos.suites import random_input, random_state


def bench(state):
    fabric = SimFabric(2, LatencyModel.zero(0.0))
    fabric.regions[1].words[0] = pack(state)
    return fabric


def call(fabric, spec, x, **kw):
    return casrpc.cas_rpc(fabric, 0, 1, 0, spec, x, **kw)


def test_rpc_compare_false_leaves_state():
    s = AcceptorState(5, 0, None)
    assert rpc(PREPARE_SPEC, 3, s) == (s, Reply(False, (0, None, 5)))


def test_rpc_compare_true_applies_f():
    s = AcceptorState(5, 5, 1)
    new, reply = rpc(PREPARE_SPEC, 8, s)
    assert new == AcceptorState(8, 5, 1)
    assert reply == Reply(True, (5, 1, 8))


def test_prepare_spec_matches_handler_on_random_states():
    rng = random.Random(11)
    for _ in range(100_000):
        s = random_state(rng)
        if rng.random() < 0.5:
            p = random_input(rng, PREPARE_SPEC)
            new, reply = rpc(PREPARE_SPEC, p, s)
            hs, hr = handle_prepare(s, p)
            assert (new, reply.ok, reply.value) == (hs, hr.ack, (hr.accepted_proposal, hr.accepted_value,
                                                                 hr.min_proposal))
        else:
            x = random_input(rng, ACCEPT_SPEC)
            new, reply = rpc(ACCEPT_SPEC, x, s)
            hs, hr = handle_accept(s, *x)
            assert (new, reply.value) == (hs, hr.min_proposal)


def test_cas_prepare_examples():
    f = bench(AcceptorState())
    assert call(f, PREPARE_SPEC, 5) == Reply(True, (0, None, 5))
    assert unpack(f.regions[1].read(0)) == AcceptorState(5, 0, None)

    # remote {1,0,⊥} but caller expects {0,0,⊥}
    f = bench(AcceptorState(1, 0, None))
    assert call(f, PREPARE_SPEC, 2, fetch=lambda: 0) is Aborted
    assert unpack(f.regions[1].read(0)) == AcceptorState(1, 0, None)

    f = bench(AcceptorState(5, 0, None))
    assert call(f, PREPARE_SPEC, 3) == Reply(False, (0, None, 5))
    assert f.counters.total("issued", casrpc_kind("CAS")) == 0


def casrpc_kind(name):
    from velos.fabric import OpKind

    return OpKind[name]


def test_cas_accept_examples():
    f = bench(AcceptorState(5, 0, None))
    assert call(f, ACCEPT_SPEC, (5, 2)) == Reply(True, 5)
    assert unpack(f.regions[1].read(0)) == AcceptorState(5, 5, 2)

    f = bench(AcceptorState(8, 5, 1))
    assert call(f, ACCEPT_SPEC, (5, 2)) == Reply(False, 8)

    f = bench(AcceptorState(5, 5, 3))
    assert call(f, ACCEPT_SPEC, (5, 2), fetch=lambda: pack(AcceptorState(5, 0, None))) is Aborted
    assert unpack(f.regions[1].read(0)) == AcceptorState(5, 5, 3)


def test_interposed_cas_aborts_larger_proposal():
    f = bench(AcceptorState())
    interposer = AcceptorState(1, 0, None)

    def between():
        f.regions[1].words[0] = pack(interposer)

    assert call(f, PREPARE_SPEC, 9, between=between) is Aborted
    assert unpack(f.regions[1].read(0)) == interposer


def test_crashed_target_returns_none():
    f = bench(AcceptorState())
    f.crash(1)
    assert call(f, PREPARE_SPEC, 1) is None


small_states = st.integers(0, 12).flatmap(
    lambda mp: st.integers(0, mp).flatmap(
        lambda ap: st.just(AcceptorState(mp, 0, None)) if ap == 0
        else st.integers(0, 3).map(lambda v: AcceptorState(mp, ap, v))))
inputs = st.one_of(
    st.tuples(st.just(PREPARE_SPEC), st.integers(1, 13)),
    st.tuples(st.just(ACCEPT_SPEC), st.tuples(st.integers(1, 13), st.integers(0, 3))),
)


@settings(max_examples=300)
@given(small_states, inputs)
def test_unobstructed_equals_rpc(state, spec_x):
    spec, x = spec_x
    f = bench(state)
    got = call(f, spec, x)
    want_state, want = rpc(spec, x, state)
    assert got == want
    assert unpack(f.regions[1].read(0)) == want_state


@settings(max_examples=300)
@given(small_states, small_states, inputs)
def test_all_or_nothing(state, other, spec_x):
    spec, x = spec_x
    f = bench(state)

    def between():
        f.regions[1].words[0] = pack(other)

    got = call(f, spec, x, between=between)
    final = unpack(f.regions[1].read(0))
    if got is Aborted:
        assert final == other
    elif got.ok:
        assert final in (spec.f(state, x), other)
    else:
        assert final == state
