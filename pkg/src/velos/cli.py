"""Command-line runner.

    velos --scenario failover --seed 1 --out-dir out/failover
    velos --scenario checker:velos-streamlined --checker-budget 200000
    velos --scenario suite:lemmas
    velos --serve --port 8000
    velos --scenario common-case --seed 1 --server http://127.0.0.1:8000

Without ``--server`` the request is handled in-process. Exit status is 0 when
every property held, 1 on any violation, 2 on bad usage or configuration.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Optional

import yaml

from .checker import DEFAULT_BUDGET, PROTOCOLS
from .scenarios import SCENARIOS
from .suites import SUITES

FLAGS = ("piggyback", "indirection")


def load_config(path: Optional[str]) -> dict[str, Any]:
    """Flat ``key: value`` file (YAML subset). Nested sections are rejected."""
    if not path:
        return {}
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected key/value pairs")
    for k, v in data.items():
        if isinstance(v, dict):
            raise ValueError(f"{path}: key {k!r} is nested; the config file is flat")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def apply_flags(config: dict, flags: list[str]) -> dict:
    for flag in flags:
        value = not flag.startswith("no-")
        name = flag[3:] if flag.startswith("no-") else flag
        if name not in FLAGS:
            raise ValueError(f"unknown flag {flag!r}; known: {', '.join(FLAGS)} (prefix no- to disable)")
        config[name] = value
    return config


def build_parser() -> argparse.ArgumentParser:
    targets = list(SCENARIOS) + [f"checker:{p}" for p in PROTOCOLS] + [f"suite:{s}" for s in SUITES]
    p = argparse.ArgumentParser(prog="velos", description="Run replication scenarios, the checker and suites.",
                                epilog="targets: " + ", ".join(targets))
    p.add_argument("--scenario", help="scenario name, checker:<protocol> or suite:<name>")
    p.add_argument("--config", help="flat key/value config file")
    p.add_argument("--seed", type=int, help="seed (mandatory for virtual-time scenarios)")
    p.add_argument("--out-dir", help="directory for metrics, traces and summary")
    p.add_argument("--mode", choices=["virtual", "threaded"], help="virtual time (default) or threaded stress")
    p.add_argument("--flag", action="append", default=[], metavar="NAME",
                   help="enable a feature (piggyback, indirection); prefix no- to disable")
    p.add_argument("--checker-budget", type=int, help=f"explored-schedule cap (default {DEFAULT_BUDGET})")
    p.add_argument("--server", help="base URL of a running service; run remotely instead of in-process")
    p.add_argument("--serve", action="store_true", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return p


def make_request(args) -> tuple[str, dict]:
    """(path, json body) for the chosen target."""
    config = apply_flags(load_config(args.config), args.flag)
    target = args.scenario or config.pop("scenario", None)
    if not target:
        raise ValueError("--scenario is required")
    if args.mode:
        config["mode"] = args.mode
    if target.startswith("checker:"):
        body = {k: v for k, v in config.items() if k not in ("mode",) + FLAGS}
        body["protocol"] = target.split(":", 1)[1]
        if args.checker_budget is not None:
            body["budget"] = args.checker_budget
        return "/checker", body
    if target.startswith("suite:"):
        body = {k: config[k] for k in ("cases", "budget") if k in config}
        if args.checker_budget is not None:
            body["budget"] = args.checker_budget
        return f"/suites/{target.split(':', 1)[1]}", body
    config.pop("checker_budget", None)
    body = {"config": config}
    if args.seed is not None:
        body["seed"] = args.seed
    if args.out_dir:
        body["out_dir"] = str(Path(args.out_dir).resolve())
    return f"/scenarios/{target}", body


def run_local(path: str, body: dict) -> dict:
    from . import service

    if path == "/checker":
        return service.handle_checker(service.CheckerRequest(**body)).model_dump(mode="json")
    if path.startswith("/suites/"):
        return service.handle_suite(path.rsplit("/", 1)[1], service.SuiteRequest(**body)).model_dump(mode="json")
    return service.handle_scenario(path.rsplit("/", 1)[1], service.ScenarioRequest(**body)).model_dump(mode="json")


def run_remote(server: str, path: str, body: dict) -> dict:
    import httpx

    resp = httpx.post(server.rstrip("/") + path, json=body, timeout=None)
    if resp.status_code == 422:
        detail = resp.json().get("detail")
        raise ValueError(detail if isinstance(detail, str) else json.dumps(detail))
    resp.raise_for_status()
    return resp.json()


def render(path: str, result: dict) -> str:
    if path == "/checker":
        return result["text"]
    if path.startswith("/suites/"):
        lines = []
        for rep in result["reports"]:
            for c in rep["checks"]:
                lines.append(f"[{'PASS' if c['ok'] else 'FAIL'}] {rep['suite']}/{c['name']}: {c['detail']}")
        return "\n".join(lines)
    return json.dumps({k: result[k] for k in ("scenario", "ok", "violations", "files", "summary")},
                      indent=2, sort_keys=True)


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.serve:
        import uvicorn

        uvicorn.run("velos.service:app", host=args.host, port=args.port)
        return 0
    try:
        path, body = make_request(args)
        result = run_remote(args.server, path, body) if args.server else run_local(path, body)
    except (ValueError, OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pydantic validation and service-side rejections
        from pydantic import ValidationError

        from .service import BadRequest

        if isinstance(exc, (ValidationError, BadRequest)):
            print(f"error: {exc}", file=sys.stderr)
            return 2
        raise
    print(render(path, result))
    return 0 if result["ok"] else 1


if __name__ == "__main__":
    sys.exit(main())
