"""Configuration documents: JSON schema, unit conversion, defaults.

The file format mirrors the reference simulation table field for field with
dB/dBm and degree units; everything is converted to linear/SI quantities on
load. The same pydantic models back the HTTP API, so a request body and a
config file share one schema.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .estimator import EstimatorConfig
from .exceptions import ConfigError
from .geometry import RisState, Scenario


def dbm_to_watt(dbm: float) -> float:
    return 10 ** (dbm / 10) * 1e-3


def watt_to_dbm(watt: float) -> float:
    return 10 * np.log10(watt / 1e-3)


def db_to_linear(db: float) -> float:
    return 10 ** (db / 10)


class ScenarioSpec(BaseModel):
    """Radio and geometry parameters with file-boundary units."""

    model_config = ConfigDict(extra="forbid")

    tx_position_m: list[float] = Field(default=[0.0, 0.0, 0.0])
    rx_positions_m: list[list[float]] = Field(default=[[-3.0, 5.0, -1.0], [3.0, -3.0, 0.0]])
    ris_position_m: list[float] = Field(default=[4.0, 1.0, -4.0])
    ris_orientation_deg: float = 30.0
    wavelength_m: float = 0.01
    element_spacing_m: float = 0.0025
    ris_rows: int = 17
    ris_cols: int = 17
    n_subcarriers: int = 128
    subcarrier_spacing_hz: float = 120e3
    n_symbols: int = 100
    tx_power_dbm: float = 20.0
    noise_psd_dbm_hz: float = -174.0
    noise_figure_db: float = 5.0
    ifft_size: int = 4096
    speed_of_light_m_s: float = 3e8

    def to_scenario(self) -> Scenario:
        try:
            return Scenario(
                p_tx=np.asarray(self.tx_position_m, dtype=float),
                anchors=np.asarray(self.rx_positions_m, dtype=float),
                wavelength=self.wavelength_m,
                element_spacing=self.element_spacing_m,
                k_rows=self.ris_rows,
                k_cols=self.ris_cols,
                n_subcarriers=self.n_subcarriers,
                subcarrier_spacing=self.subcarrier_spacing_hz,
                n_symbols=self.n_symbols,
                tx_power=dbm_to_watt(self.tx_power_dbm),
                noise_psd=dbm_to_watt(self.noise_psd_dbm_hz),
                noise_factor=db_to_linear(self.noise_figure_db),
                ifft_size=self.ifft_size,
                c=self.speed_of_light_m_s,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_state(self) -> RisState:
        try:
            return RisState(
                p_ris=np.asarray(self.ris_position_m, dtype=float),
                alpha=np.deg2rad(self.ris_orientation_deg),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


class EstimatorSpec(BaseModel):
    """Estimator tuning block; defaults match :class:`EstimatorConfig`."""

    model_config = ConfigDict(extra="forbid")

    mesh_azimuth: int = 800
    mesh_polar: int = 400
    d_th_m: float = 0.1
    max_candidates: int = 2000
    curve_refine: bool = True
    omega_grid_step: float = 0.02
    alpha_grid_step_deg: float = 0.25
    fd_rel_step: float = 1e-7
    grad_tol: float = 1e-10
    max_iter: int = 200
    per_rx_cost: bool = False

    def to_config(self) -> EstimatorConfig:
        return EstimatorConfig(
            mesh_azimuth=self.mesh_azimuth,
            mesh_polar=self.mesh_polar,
            d_th=self.d_th_m,
            max_candidates=self.max_candidates,
            curve_refine=self.curve_refine,
            omega_grid_step=self.omega_grid_step,
            alpha_grid_step_deg=self.alpha_grid_step_deg,
            fd_rel_step=self.fd_rel_step,
            grad_tol=self.grad_tol,
            max_iter=self.max_iter,
            per_rx_cost=self.per_rx_cost,
        )


class GridSpec(BaseModel):
    """xy evaluation grid for bound maps; z and the orientations stay fixed."""

    model_config = ConfigDict(extra="forbid")

    x_min_m: float = -10.0
    x_max_m: float = 10.0
    nx: int = 21
    y_min_m: float = -10.0
    y_max_m: float = 10.0
    ny: int = 21
    z_m: float = -1.0
    alphas_deg: list[float] = Field(default=[0.0, 30.0])


class ExperimentSpec(BaseModel):
    """Monte Carlo and sweep settings."""

    model_config = ConfigDict(extra="forbid")

    trials: int = Field(default=200, ge=1)
    master_seed: int = Field(default=1, ge=0)
    noiseless: bool = False
    threads: int = Field(default=1, ge=1)
    power_sweep_dbm: list[float] = Field(default=[10, 12, 14, 16, 18, 20, 22, 24, 26, 28, 30, 32, 34])
    bandwidth_sweep_subcarriers: list[int] = Field(default=[16, 32, 64, 128])
    bandwidth_tx_power_dbm: float = 20.0
    rx_count_sweep: list[int] = Field(default=[2, 3, 4, 5, 6])
    rx_circle_radius_m: float = 5.0
    contour_tx_power_dbm: float = 34.0
    contour_rx_positions_m: list[list[float]] = Field(default=[[0.0, -5.0, 0.0], [0.0, 5.0, 0.0]])
    grid: GridSpec = Field(default_factory=GridSpec)


class ConfigDocument(BaseModel):
    """Top-level JSON document: scenario + estimator + experiment blocks."""

    model_config = ConfigDict(extra="forbid")

    scenario: ScenarioSpec = Field(default_factory=ScenarioSpec)
    estimator: EstimatorSpec = Field(default_factory=EstimatorSpec)
    experiment: ExperimentSpec = Field(default_factory=ExperimentSpec)


@dataclass(frozen=True)
class LoadedConfig:
    scenario: Scenario
    state: RisState
    estimator: EstimatorConfig
    experiment: ExperimentSpec
    document: ConfigDocument


def parse_config(data: dict) -> LoadedConfig:
    """Validate a raw JSON object and convert to runtime types."""
    try:
        doc = ConfigDocument.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    if len(doc.scenario.rx_positions_m) < 2:
        raise ConfigError("at least two receivers are required")
    return LoadedConfig(
        scenario=doc.scenario.to_scenario(),
        state=doc.scenario.to_state(),
        estimator=doc.estimator.to_config(),
        experiment=doc.experiment,
        document=doc,
    )


def load_config(path: str | Path | None) -> LoadedConfig:
    """Load a JSON config file; ``None`` yields the built-in defaults."""
    if path is None:
        return parse_config({})
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a JSON object: {path}")
    return parse_config(data)
