"""HTTP service exposing scenarios, the checker and the property suites.

The handlers are plain functions over pydantic models so the CLI can run
them in-process or call a remote server with the same request bodies.
"""

from __future__ import annotations

from typing import Any, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .checker import DEFAULT_BUDGET, PROTOCOLS, CheckConfig, explore
from .node import Mutation
from .scenarios import SCENARIOS, ConfigError, ScenarioConfig, run_scenario
from .suites import SUITES, run_suite


class ScenarioRequest(BaseModel):
    seed: Optional[int] = None
    out_dir: Optional[str] = None
    config: dict[str, Any] = Field(default_factory=dict)


class ScenarioResponse(BaseModel):
    scenario: str
    ok: bool
    summary: dict[str, Any]
    violations: list[str]
    files: dict[str, str]


class CheckerRequest(BaseModel):
    protocol: str = "velos-streamlined"
    proposers: int = 2
    acceptors: int = 3
    attempts: int = 2
    crashes: int = 1
    mutation: Optional[Mutation] = None
    budget: int = DEFAULT_BUDGET
    threshold_acceptors: list[int] = Field(default_factory=list)
    stop_on_first: bool = False


class ViolationModel(BaseModel):
    kind: str
    detail: str
    witness: list[list[Any]]


class CheckerResponse(BaseModel):
    ok: bool
    summary: dict[str, Any]
    text: str
    violations: list[ViolationModel]


class SuiteRequest(BaseModel):
    budget: int = DEFAULT_BUDGET
    cases: int = 100_000


class CheckModel(BaseModel):
    name: str
    ok: bool
    detail: str
    seconds: float


class SuiteReportModel(BaseModel):
    suite: str
    ok: bool
    checks: list[CheckModel]


class SuiteResponse(BaseModel):
    ok: bool
    reports: list[SuiteReportModel]


class BadRequest(ValueError):
    pass


def handle_scenario(name: str, req: ScenarioRequest) -> ScenarioResponse:
    if name not in SCENARIOS:
        raise BadRequest(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    data = dict(req.config)
    data["scenario"] = name
    if req.seed is not None:
        data["seed"] = req.seed
    try:
        cfg = ScenarioConfig.from_mapping(data)
        result = run_scenario(cfg, req.out_dir)
    except (ConfigError, TypeError) as exc:
        raise BadRequest(str(exc)) from None
    return ScenarioResponse(**result.as_dict())


def handle_checker(req: CheckerRequest) -> CheckerResponse:
    cfg = CheckConfig(
        protocol=req.protocol, proposers=req.proposers, acceptors=req.acceptors, attempts=req.attempts,
        crashes=req.crashes, mutation=req.mutation, budget=req.budget,
        threshold_acceptors=tuple(req.threshold_acceptors), stop_on_first=req.stop_on_first,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise BadRequest(str(exc)) from None
    report = explore(cfg)
    return CheckerResponse(ok=report.ok, summary=report.summary(), text=report.text(),
                           violations=[ViolationModel(**v.as_dict()) for v in report.violations])


def handle_suite(name: str, req: SuiteRequest) -> SuiteResponse:
    if name not in SUITES:
        raise BadRequest(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    reports = run_suite(name, budget=req.budget, cases=req.cases)
    return SuiteResponse(ok=all(r.ok for r in reports),
                         reports=[SuiteReportModel(**r.as_dict()) for r in reports])


def create_app() -> FastAPI:
    app = FastAPI(title="velos", version=__version__)

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.get("/catalog")
    def catalog() -> dict:
        return {"scenarios": list(SCENARIOS), "protocols": list(PROTOCOLS), "suites": list(SUITES),
                "mutations": [m.value for m in Mutation]}

    @app.post("/scenarios/{name}", response_model=ScenarioResponse)
    def scenario(name: str, req: ScenarioRequest) -> ScenarioResponse:
        try:
            return handle_scenario(name, req)
        except BadRequest as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None

    @app.post("/checker", response_model=CheckerResponse)
    def checker(req: CheckerRequest) -> CheckerResponse:
        try:
            return handle_checker(req)
        except BadRequest as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None

    @app.post("/suites/{name}", response_model=SuiteResponse)
    def suite(name: str, req: SuiteRequest) -> SuiteResponse:
        try:
            return handle_suite(name, req)
        except BadRequest as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None

    return app


app = create_app()
