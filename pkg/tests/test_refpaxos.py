import pytest
from hypothesis import given
from hypothesis import strategies as st

from velos.core import Abort, AcceptorState, Decide, pack
from velos.fabric import LatencyModel, SimFabric
from velos.node import Node
from velos.refpaxos import (ACCEPT, DECIDED, PREPARE, PREPARED, Acceptor, Msg, PreparedReply, RefProposer,
                            decode, encode, handle_accept, handle_prepare)


@pytest.mark.parametrize("state,proposal,new,reply", [
    (AcceptorState(), 5, AcceptorState(5, 0, None), (True, 0, None)),
    (AcceptorState(5, 0, None), 3, AcceptorState(5, 0, None), (False, 0, None)),
    (AcceptorState(5, 5, 1), 8, AcceptorState(8, 5, 1), (True, 5, 1)),
])
def test_handle_prepare(state, proposal, new, reply):
    got_state, got = handle_prepare(state, proposal)
    assert got_state == new
    assert got[:3] == reply


@pytest.mark.parametrize("state,proposal,value,new,mp", [
    (AcceptorState(5, 0, None), 5, 2, AcceptorState(5, 5, 2), 5),
    (AcceptorState(8, 5, 1), 5, 2, AcceptorState(8, 5, 1), 8),
    (AcceptorState(), 3, 1, AcceptorState(3, 3, 1), 3),
])
def test_handle_accept(state, proposal, value, new, mp):
    got_state, got = handle_accept(state, proposal, value)
    assert got_state == new
    assert got.min_proposal == mp


@given(st.builds(Msg, st.sampled_from([PREPARE, PREPARED, ACCEPT, DECIDED]), st.integers(0, 1 << 40),
                 st.integers(0, 1 << 40), st.one_of(st.none(), st.integers(0, 3)), st.booleans(),
                 st.integers(0, 1 << 40), st.one_of(st.none(), st.integers(0, 3)), st.integers(0, 1 << 40)))
def test_wire_round_trip(m):
    assert decode(encode(m)) == m


def cluster(n_prop, n_acc=3, seed=0, jitter=0.0):
    n = max(n_prop, n_acc)
    fabric = SimFabric(n, LatencyModel(jitter=jitter), seed=seed)
    nodes = []
    for pid in range(n):
        prop = RefProposer(pid, n, list(range(n_acc))) if pid < n_prop else None
        acc = Acceptor(pid, n, "rpc") if pid < n_acc else None
        node = Node(pid, prop, acc)
        fabric.attach(node)
        nodes.append(node)
    for node in nodes:
        for role in (node.proposer, node.acceptor):
            if role is not None:
                role.bind(fabric)
    return fabric, nodes


def test_solo_decides_own_value():
    fabric, nodes = cluster(2)
    p = nodes[1].proposer
    p.propose(1)
    fabric.run()
    assert p.outcomes == [Decide(1)]
    assert p.proposal == 1 + 3
    # two phases, each a request and a reply per acceptor
    assert fabric.counters.total("issued") == 2 * 2 * 3


def test_adopts_highest_accepted():
    fabric, nodes = cluster(1)
    nodes[1].acceptor.states[0] = AcceptorState(4, 4, 3)
    nodes[0].proposer.proposal = 3
    nodes[0].proposer.propose(1)
    fabric.run()
    assert nodes[0].proposer.outcomes == [Decide(3)]


def test_interleaved_prepare_aborts_first():
    fabric, nodes = cluster(2)
    p0, p1 = nodes[0].proposer, nodes[1].proposer
    p0.propose(0)
    # let p0 finish its prepare phase, then p1 prepares with a higher number
    fabric.run(predicate=lambda: p0.phase == "accept")
    p1.proposal = 10
    p1.propose(1)
    fabric.run()
    assert p0.outcomes == [Abort]
    assert p1.outcomes == [Decide(1)] or p1.outcomes == [Decide(0)]


@pytest.mark.parametrize("seed", range(20))
def test_racing_proposers_agree(seed):
    fabric, nodes = cluster(3, seed=seed, jitter=1.0)
    for node in nodes:
        node.proposer.retries = 5
        node.proposer.propose(node.pid)
    fabric.run()
    decided = {node.proposer.decision() for node in nodes} - {None}
    assert len(decided) <= 1


def test_acceptor_handoff_freezes_words():
    fabric = SimFabric(2, LatencyModel(), seed=0)
    acc = Acceptor(1, 2, "cas")
    node = Node(1, None, acc)
    fabric.attach(node)
    from conftest import Recorder

    fabric.attach(Recorder(0))
    acc.bind(fabric)
    fabric.regions[1].words[0] = pack(AcceptorState(4, 4, 1))
    fabric.post_message(0, 1, encode(Msg(PREPARE, 0, 9)))
    fabric.run()
    assert acc.mode == "rpc"
    assert acc.state(0) == AcceptorState(9, 4, 1)
    assert fabric.regions[1].read(0) == acc.sentinel
