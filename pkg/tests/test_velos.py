import itertools

import pytest

from velos.core import Abort, AcceptorState, Decide, fallback_threshold, pack, unpack
from velos.fabric import LatencyModel, OpKind, SimFabric
from velos.node import Node
from velos.refpaxos import Acceptor
from velos.velos import DirectProposer, StreamlinedProposer, TieError, highest_accepted


def setup(cls, n_prop=1, n_acc=3, seed=0, jitter=0.0, predicted=None, acceptor_roles=False):
    n = max(n_prop, n_acc)
    fabric = SimFabric(n, LatencyModel(jitter=jitter), seed=seed)
    nodes = []
    for pid in range(n):
        prop = None
        if pid < n_prop:
            kw = {"predicted": predicted} if predicted is not None and cls is StreamlinedProposer else {}
            prop = cls(pid, n, list(range(n_acc)), 0, **kw)
        acc = Acceptor(pid, n, "cas") if acceptor_roles and pid < n_acc else None
        node = Node(pid, prop, acc)
        fabric.attach(node)
        nodes.append(node)
    for node in nodes:
        for role in (node.proposer, node.acceptor):
            if role is not None:
                role.bind(fabric)
    return fabric, [n.proposer for n in nodes if n.proposer is not None]


def test_highest_accepted():
    assert highest_accepted([(0, None), (0, None)]) is None
    assert highest_accepted([(3, 1), (5, 2), (0, None)]) == (5, 2)
    with pytest.raises(TieError):
        highest_accepted([(5, 1), (5, 2)])


def test_direct_solo_one_round_each():
    fabric, (p,) = setup(DirectProposer)
    p.propose(1)
    fabric.run()
    assert p.outcomes == [Decide(1)]
    assert sum(fabric.counters.cas_rounds) == 2
    assert fabric.counters.total("issued", OpKind.CAS) == 6


def test_direct_race_aborts_larger_proposal():
    # P1 fetches <0,0,⊥> everywhere, P0's prepare CAS lands first, P1's CAS then fails
    fabric, (p0, p1) = setup(DirectProposer, n_prop=2, n_acc=3)
    p1.propose(1)
    fabric.run(predicate=lambda: fabric.counters.total("completed", OpKind.READ) == 3)
    # P0's prepare (proposal 3) reaches every acceptor before P1's CASes (proposal 4)
    for a in range(3):
        fabric.regions[a].words[0] = pack(AcceptorState(3, 0, None))
    fabric.run()
    assert p1.proposal == 4
    assert p1.outcomes == [Abort]


def test_streamlined_solo_two_cas_rounds():
    fabric, (p,) = setup(StreamlinedProposer)
    p.propose(2)
    fabric.run()
    assert p.outcomes == [Decide(2)]
    assert fabric.counters.total("issued", OpKind.CAS) == 6
    assert fabric.counters.total("issued", OpKind.READ) == 0
    assert all(unpack(fabric.regions[a].read(0)) == AcceptorState(3, 3, 2) for a in range(3))


POOL = [AcceptorState(), AcceptorState(5, 0, None), AcceptorState(9, 4, 1), AcceptorState(2, 2, 3)]


@pytest.mark.parametrize("preds", list(itertools.product(range(4), repeat=3))[::7])
def test_streamlined_wrong_predictions_bounded(preds):
    actual = [AcceptorState(7, 3, 2), AcceptorState(1, 0, None), AcceptorState(4, 4, 0)]
    fabric, (p,) = setup(StreamlinedProposer, predicted=[POOL[i] for i in preds])
    for i, s in enumerate(actual):
        fabric.regions[i].words[0] = pack(s)
    p.retries = 10
    p.propose(1)
    fabric.run()
    assert p.decided
    assert len(p.outcomes) <= 3 + 1


def test_stale_completion_only_causes_abort():
    # one acceptor is slow; its late completion must not break safety
    fabric, (p0, p1) = setup(StreamlinedProposer, n_prop=2, jitter=1.0, seed=5)
    p0.retries = p1.retries = 6
    p0.propose(0)
    p1.propose(1)
    fabric.run()
    values = {p.decision() for p in (p0, p1)} - {None}
    assert len(values) <= 1


@pytest.mark.parametrize("seed", range(25))
def test_streamlined_contention_agrees(seed):
    fabric, props = setup(StreamlinedProposer, n_prop=3, jitter=1.0, seed=seed)
    for p in props:
        p.retries = 8
        p.propose(p.pid)
    fabric.run()
    values = {p.decision() for p in props} - {None}
    assert len(values) <= 1


def test_falls_back_to_messages_at_threshold():
    n = 3
    fabric, (p,) = setup(StreamlinedProposer, acceptor_roles=True)
    word = pack(AcceptorState(fallback_threshold(n), 0, None))
    for a in (1, 2):
        fabric.regions[a].words[0] = word
        # the acceptor notices its own word crossing the threshold
        fabric.procs[a].acceptor.on_local_update(0)
    p.retries = 3
    p.propose(1)
    fabric.run()
    assert p.decided
    assert {1, 2} <= p.rpc
    assert fabric.counters.total("issued", OpKind.MSG) > 0
