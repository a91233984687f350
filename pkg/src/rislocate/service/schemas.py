"""Request and response bodies for the HTTP service.

Requests embed the same ``ConfigDocument`` used by config files, so a body
and a file validate against one schema.
"""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field

from ..config import ConfigDocument


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str


class CrbResponse(BaseModel):
    """Bounds at the requested scenario and state."""

    teb_s: list[float]
    web0: list[float]
    web1: list[float]
    peb_m: float
    oeb_rad: float
    tx_power_dbm: float
    master_seed: int


class SimulateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: ConfigDocument = Field(default_factory=ConfigDocument)
    seed: int | None = Field(default=None, ge=0)


class SimulateResponse(BaseModel):
    seed: int
    sigma2_w: float
    n_rx: int
    n_subcarriers: int
    n_symbols: int
    observations: list  # per receiver: [subcarrier][symbol][re, im]


class EstimateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: ConfigDocument = Field(default_factory=ConfigDocument)
    seed: int | None = Field(default=None, ge=0)
    sigma2_w: float = 0.0
    observations: list


class CoarseEstimate(BaseModel):
    position_m: list[float]
    alpha_rad: float
    cost: float


class EstimateResponse(BaseModel):
    seed: int
    toa_s: list[float]
    omega: list[list[float]]
    n_candidates: int
    coarse: CoarseEstimate
    position_m: list[float]
    alpha_rad: float
    alpha_deg: float
    gains: list[list[float]]
    cost: float
    converged: bool


class TableResponse(BaseModel):
    """Sweep and contour results: one dict per row plus run metadata."""

    kind: str
    meta: dict
    rows: list[dict]
