import pytest

from velos.checker import CheckConfig, explore, replay
from velos.node import Mutation


def test_rejects_configs_outside_envelope():
    with pytest.raises(ValueError):
        CheckConfig(proposers=3).validate()
    with pytest.raises(ValueError):
        CheckConfig(protocol="raft").validate()


@pytest.mark.parametrize("proto", ["refpaxos", "velos-direct", "velos-streamlined", "smr-single-slot"])
def test_solo_proposer_always_decides(proto):
    r = explore(CheckConfig(protocol=proto, proposers=1, attempts=1, crashes=0))
    assert r.ok and r.complete
    assert set(r.outcomes) == {"D"}


@pytest.mark.parametrize("proto", ["refpaxos", "velos-direct", "velos-streamlined", "smr-single-slot"])
def test_solo_with_crash_is_safe(proto):
    r = explore(CheckConfig(protocol=proto, proposers=1, attempts=1, crashes=1))
    assert r.ok and r.complete


@pytest.mark.parametrize("proto", ["velos-streamlined", "smr-single-slot"])
def test_two_proposers_safe_with_aborts(proto):
    r = explore(CheckConfig(protocol=proto, attempts=1, crashes=0))
    assert r.ok and r.complete
    assert any("A" in k for k in r.outcomes)


def test_budget_reports_partial_coverage():
    r = explore(CheckConfig(protocol="velos-streamlined", attempts=1, crashes=0, budget=100))
    assert not r.complete
    assert "PARTIAL (budget exceeded)" in r.text()
    assert r.summary()["explored_schedules"] == 100


@pytest.mark.parametrize("proto,mutation,attempts,crashes,kind", [
    ("velos-streamlined", Mutation.DROP_CAS_ABORT, 1, 0, "Agreement"),
    ("velos-direct", Mutation.DROP_CAS_ABORT, 1, 0, "Agreement"),
    ("velos-direct", Mutation.SKIP_ADOPTION, 2, 1, "Agreement"),
    ("velos-direct", Mutation.ACCEPT_BELOW_MIN, 1, 0, "Monotonicity"),
    ("velos-streamlined", Mutation.ACCEPT_BELOW_MIN, 2, 1, "Monotonicity"),
])
def test_mutations_caught_and_witness_replays(proto, mutation, attempts, crashes, kind):
    cfg = CheckConfig(protocol=proto, attempts=attempts, crashes=crashes, mutation=mutation, stop_on_first=True)
    r = explore(cfg)
    assert not r.ok
    assert "PARTIAL (stopped at first violation)" in r.text()
    v = r.violations[0]
    assert v.kind == kind
    trace, problems = replay(cfg, v.witness)
    assert (v.kind, v.detail) in problems
    # replay is deterministic
    assert replay(cfg, v.witness)[0] == trace


def test_replay_rejects_disabled_event():
    cfg = CheckConfig(protocol="velos-direct", proposers=1, attempts=1, crashes=0)
    with pytest.raises(ValueError):
        replay(cfg, [("a", 0, 2), ("a", 0, 2), ("a", 0, 2), ("a", 0, 2)])


def test_threshold_acceptor_mixed_mode_decides():
    r = explore(CheckConfig(protocol="smr-single-slot", proposers=1, attempts=2, crashes=0,
                            threshold_acceptors=(2,)))
    assert r.ok and r.complete
    # a nack from the message-mode acceptor can cost a third attempt, beyond the envelope
    assert any("D" in k for k in r.outcomes)
