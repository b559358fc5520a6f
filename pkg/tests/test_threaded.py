import threading

from velos.core import AcceptorState, pack
from velos.threaded import ThreadFabric, run_stress


def test_stress_agreement_under_real_threads():
    for seed in range(3):
        r = run_stress(n=3, slots=100, seed=seed, timeout=60)
        assert r["finished"]
        assert r["violations"] == []
        assert r["decided_slots"] == 100
        assert r["counters_sane"]


def test_thread_fabric_cas_is_atomic():
    fabric = ThreadFabric(2)
    done = threading.Event()
    results = []

    class P:
        pid = 0

        def on_complete(self, t, r):
            results.append(r)
            if len(results) == 50:
                done.set()

        def on_message(self, s, m):
            pass

        def on_local_update(self, slot):
            pass

    class Q(P):
        pid = 1

    fabric.attach(P())
    fabric.attach(Q())
    fabric.start()
    try:
        # 50 racing CASes from the same expected word: exactly one wins
        for i in range(50):
            fabric.post_cas(0, 1, 0, 0, pack(AcceptorState(i + 1, 0, None)))
        assert done.wait(10)
    finally:
        fabric.stop()
    assert results.count(0) == 1
