"""HTTP service exposing the simulator, bounds and estimator.

Long sweeps run synchronously in the request; clients control the runtime
through the ``experiment.trials`` field of the posted config.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__, harness
from ..config import ConfigDocument, parse_config
from ..exceptions import ConfigError, RisLocateError
from .schemas import (
    CrbResponse,
    EstimateRequest,
    EstimateResponse,
    HealthResponse,
    SimulateRequest,
    SimulateResponse,
    TableResponse,
)


def _load(document: ConfigDocument):
    try:
        return parse_config(document.model_dump())
    except ConfigError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc


def create_app() -> FastAPI:
    app = FastAPI(title="rislocate", version=__version__)

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(version=__version__)

    @app.post("/crb", response_model=CrbResponse)
    def crb(document: ConfigDocument):
        loaded = _load(document)
        try:
            return CrbResponse(**harness.crb_report(loaded))
        except RisLocateError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.post("/simulate", response_model=SimulateResponse)
    def simulate(request: SimulateRequest):
        loaded = _load(request.config)
        try:
            return SimulateResponse(**harness.simulate_payload(loaded, seed=request.seed))
        except RisLocateError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.post("/estimate", response_model=EstimateResponse)
    def estimate(request: EstimateRequest):
        loaded = _load(request.config)
        try:
            obs = harness.observations_from_payload(request.observations, request.sigma2_w, request.seed)
            return EstimateResponse(**harness.estimate_payload(loaded, obs, seed=request.seed))
        except RisLocateError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    def _table_endpoint(runner, document: ConfigDocument) -> TableResponse:
        loaded = _load(document)
        try:
            return TableResponse(**runner(loaded).to_dict())
        except RisLocateError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.post("/sweep/power", response_model=TableResponse)
    def sweep_power(document: ConfigDocument):
        return _table_endpoint(harness.run_monte_carlo, document)

    @app.post("/sweep/bandwidth", response_model=TableResponse)
    def sweep_bandwidth(document: ConfigDocument):
        return _table_endpoint(harness.sweep_bandwidth, document)

    @app.post("/compare-toa", response_model=TableResponse)
    def compare_toa(document: ConfigDocument):
        return _table_endpoint(harness.compare_toa_only, document)

    @app.post("/contour", response_model=TableResponse)
    def contour(document: ConfigDocument):
        return _table_endpoint(harness.crb_contour, document)

    return app
