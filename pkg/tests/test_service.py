import json

import pytest
from fastapi.testclient import TestClient

from velos import cli
from velos.service import app

client = TestClient(app)


def test_health_and_catalog():
    assert client.get("/health").json()["status"] == "ok"
    cat = client.get("/catalog").json()
    assert "failover" in cat["scenarios"]
    assert "velos-streamlined" in cat["protocols"]
    assert set(cat["mutations"]) == {"drop-cas-abort", "skip-adoption", "accept-below-min"}


def test_scenario_endpoint(tmp_path):
    body = {"seed": 1, "out_dir": str(tmp_path), "config": {"slots": 20}}
    r = client.post("/scenarios/common-case", json=body)
    assert r.status_code == 200
    data = r.json()
    assert data["ok"]
    assert (tmp_path / "metrics.csv").exists()


@pytest.mark.parametrize("path,body", [
    ("/scenarios/common-case", {"config": {"slots": 5}}),
    ("/scenarios/unknown", {"seed": 1}),
    ("/scenarios/common-case", {"seed": 1, "config": {"n": 2}}),
    ("/checker", {"protocol": "nope"}),
    ("/checker", {"proposers": 5}),
    ("/suites/nope", {}),
])
def test_bad_requests_are_422(path, body):
    assert client.post(path, json=body).status_code == 422


def test_checker_endpoint_reports_violation():
    r = client.post("/checker", json={"protocol": "velos-streamlined", "attempts": 1, "crashes": 0,
                                      "mutation": "drop-cas-abort", "stop_on_first": True})
    data = r.json()
    assert r.status_code == 200
    assert not data["ok"]
    assert data["violations"][0]["kind"] == "Agreement"
    assert data["violations"][0]["witness"]


def test_cli_scenario_writes_files(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("slots: 10\nwindow: 4\n")
    rc = cli.main(["--scenario", "common-case", "--config", str(cfg), "--seed", "2",
                   "--out-dir", str(tmp_path / "o"), "--flag", "no-piggyback"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["ok"]
    assert out["summary"]["config"]["window"] == 4
    assert (tmp_path / "o" / "trace.jsonl").exists()


def test_cli_usage_errors_exit_2(tmp_path, capsys):
    assert cli.main(["--scenario", "common-case"]) == 2  # no seed
    nested = tmp_path / "n.yaml"
    nested.write_text("latency:\n  cas: 1\n")
    assert cli.main(["--scenario", "common-case", "--seed", "1", "--config", str(nested)]) == 2
    assert cli.main(["--scenario", "common-case", "--seed", "1", "--flag", "turbo"]) == 2
    assert cli.main([]) == 2


def test_cli_checker_violation_exit_1(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("attempts: 1\ncrashes: 0\nmutation: drop-cas-abort\nstop_on_first: true\n")
    rc = cli.main(["--scenario", "checker:velos-direct", "--config", str(cfg)])
    assert rc == 1
    assert "Agreement" in capsys.readouterr().out


def test_cli_checker_clean_exit_0(capsys):
    rc = cli.main(["--scenario", "checker:refpaxos", "--checker-budget", "50000"])
    out = capsys.readouterr().out
    # refpaxos at the full envelope exceeds a small budget; coverage must say so
    assert rc == 0
    assert "PARTIAL (budget exceeded)" in out


def test_cli_remote_matches_local(monkeypatch, tmp_path, capsys):
    import httpx

    def post(url, json, timeout):
        path = url.split("://", 1)[1].split("/", 1)[1]
        return client.post("/" + path, json=json)

    monkeypatch.setattr(httpx, "post", post)
    args = ["--scenario", "write-baseline", "--seed", "4", "--config", str(_cfg(tmp_path))]
    assert cli.main(args + ["--server", "http://svc"]) == 0
    remote = json.loads(capsys.readouterr().out)
    assert cli.main(args) == 0
    local = json.loads(capsys.readouterr().out)
    assert remote == local


def _cfg(tmp_path):
    p = tmp_path / "w.yaml"
    p.write_text("slots: 15\ntrace: false\n")
    return p
