"""Experiment driver: Monte Carlo sweeps, baseline comparison, bound maps.

Seed policy: one master seed per experiment. The phase profile is drawn from
the child sequence ``SeedSequence(master, spawn_key=(0,))`` once per run; each
trial's gains and noise come from ``SeedSequence(master, spawn_key=(1,
point_index, trial_index))``. Appending sweep points or trials therefore never
perturbs existing ones, and aggregation is index ordered, so outputs are
byte-identical for a fixed (config, seed) under any worker count.
"""

from __future__ import annotations

import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .config import LoadedConfig, watt_to_dbm
from .estimator import (
    EstimatorConfig,
    OmegaSolver,
    estimate_state,
    toa_only_position,
)
from .exceptions import RisLocateError
from .fisher import state_bounds, toa_only_peb
from .geometry import RisState, Scenario, path_delays, spatial_frequencies_for_rx
from .signals import random_phase_profile, simulate_observations

_PROFILE_STREAM = 0
_TRIAL_STREAM = 1


@dataclass(frozen=True)
class TableReport:
    """Uniform tabular result: one dict per row, fixed column order."""

    kind: str
    rows: list
    meta: dict

    def to_dict(self) -> dict:
        return {"kind": self.kind, "meta": self.meta, "rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def to_csv(self) -> str:
        if not self.rows:
            return ""
        buf = io.StringIO()
        cols = list(self.rows[0].keys())
        buf.write(",".join(cols) + "\n")
        for row in self.rows:
            buf.write(",".join(_csv_cell(row[c]) for c in cols) + "\n")
        return buf.getvalue()


def _csv_cell(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def profile_for_seed(scenario: Scenario, master_seed: int) -> np.ndarray:
    """The experiment's phase profile, from the profile stream of the seed."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=master_seed, spawn_key=(_PROFILE_STREAM,)))
    return random_phase_profile(scenario.n_elements, scenario.n_symbols, rng)


def trial_rng(master_seed: int, point_index: int, trial_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=master_seed, spawn_key=(_TRIAL_STREAM, point_index, trial_index))
    )


def _wrapped(angle: float) -> float:
    return float(np.angle(np.exp(1j * angle)))


def _run_point(
    scenario: Scenario,
    state: RisState,
    est_cfg: EstimatorConfig,
    gamma: np.ndarray,
    trials: int,
    master_seed: int,
    point_index: int,
    noiseless: bool,
    threads: int,
):
    """All trials of one sweep point; returns per-trial error records."""
    solver = OmegaSolver(gamma, scenario, est_cfg)
    taus_true = path_delays(scenario, state)
    ws_true = np.array([spatial_frequencies_for_rx(scenario, state, m) for m in range(scenario.n_rx)])

    def one_trial(trial: int):
        rng = trial_rng(master_seed, point_index, trial)
        obs = simulate_observations(
            scenario, state, gamma, rng, sigma2=0.0 if noiseless else None
        )
        try:
            res = estimate_state(obs, gamma, scenario, est_cfg, omega_solver=solver)
        except (RisLocateError, np.linalg.LinAlgError):
            return None
        tau_hats = np.array([t.tau for t in res.toa])
        return {
            "pos2": float(np.sum((res.refined.p_ris - state.p_ris) ** 2)),
            "alpha2": _wrapped(res.refined.alpha - state.alpha) ** 2,
            "pos2_coarse": float(np.sum((res.coarse.p_ris - state.p_ris) ** 2)),
            "tau2": (tau_hats - taus_true) ** 2,
            "w02": (res.omega[:, 0] - ws_true[:, 0]) ** 2,
            "w12": (res.omega[:, 1] - ws_true[:, 1]) ** 2,
            "tau_hats": tau_hats,
        }

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(one_trial, range(trials)))
    else:
        records = [one_trial(t) for t in range(trials)]
    return records


def _rmse_row(records, m_rx: int):
    ok = [r for r in records if r is not None]
    failures = len(records) - len(ok)
    row = {"trials": len(records), "failures": failures, "flagged": failures > 0.2 * len(records)}
    if ok:
        row["rmse_pos_m"] = float(np.sqrt(np.mean([r["pos2"] for r in ok])))
        row["rmse_pos_coarse_m"] = float(np.sqrt(np.mean([r["pos2_coarse"] for r in ok])))
        row["rmse_alpha_rad"] = float(np.sqrt(np.mean([r["alpha2"] for r in ok])))
        for m in range(m_rx):
            row[f"rmse_tau_s_rx{m}"] = float(np.sqrt(np.mean([r["tau2"][m] for r in ok])))
            row[f"rmse_w0_rx{m}"] = float(np.sqrt(np.mean([r["w02"][m] for r in ok])))
            row[f"rmse_w1_rx{m}"] = float(np.sqrt(np.mean([r["w12"][m] for r in ok])))
    else:
        row["rmse_pos_m"] = row["rmse_pos_coarse_m"] = row["rmse_alpha_rad"] = float("nan")
        for m in range(m_rx):
            row[f"rmse_tau_s_rx{m}"] = row[f"rmse_w0_rx{m}"] = row[f"rmse_w1_rx{m}"] = float("nan")
    return row


def _bound_columns(scenario: Scenario, state: RisState, gamma: np.ndarray) -> dict:
    report = state_bounds(scenario, state, gamma)
    cols = {"peb_m": report.peb, "oeb_rad": report.oeb}
    for m in range(scenario.n_rx):
        cols[f"teb_s_rx{m}"] = float(report.teb[m])
        cols[f"web0_rx{m}"] = float(report.web0[m])
        cols[f"web1_rx{m}"] = float(report.web1[m])
    return cols


def run_monte_carlo(loaded: LoadedConfig, power_sweep_dbm: list | None = None) -> TableReport:
    """RMSE versus bounds over the transmit power sweep."""
    exp = loaded.experiment
    sweep = list(power_sweep_dbm if power_sweep_dbm is not None else exp.power_sweep_dbm)
    gamma = profile_for_seed(loaded.scenario, exp.master_seed)
    rows = []
    for idx, dbm in enumerate(sweep):
        scenario = replace(loaded.scenario, tx_power=10 ** (dbm / 10) * 1e-3)
        records = _run_point(
            scenario, loaded.state, loaded.estimator, gamma,
            exp.trials, exp.master_seed, idx, exp.noiseless, exp.threads,
        )
        row = {"tx_power_dbm": float(dbm), "tx_power_w": scenario.tx_power}
        row.update(_rmse_row(records, scenario.n_rx))
        row.update(_bound_columns(scenario, loaded.state, gamma))
        rows.append(row)
    return TableReport(
        kind="power_sweep",
        rows=rows,
        meta={"trials": exp.trials, "master_seed": exp.master_seed, "noiseless": exp.noiseless},
    )


def sweep_bandwidth(loaded: LoadedConfig, subcarriers: list | None = None) -> TableReport:
    """RMSE versus bounds as the subcarrier count grows at fixed spacing."""
    exp = loaded.experiment
    sweep = list(subcarriers if subcarriers is not None else exp.bandwidth_sweep_subcarriers)
    power_w = 10 ** (exp.bandwidth_tx_power_dbm / 10) * 1e-3
    rows = []
    for idx, n_c in enumerate(sweep):
        scenario = replace(loaded.scenario, n_subcarriers=int(n_c), tx_power=power_w)
        gamma = profile_for_seed(scenario, exp.master_seed)
        records = _run_point(
            scenario, loaded.state, loaded.estimator, gamma,
            exp.trials, exp.master_seed, idx, exp.noiseless, exp.threads,
        )
        row = {
            "n_subcarriers": int(n_c),
            "bandwidth_hz": scenario.bandwidth,
            "tx_power_dbm": exp.bandwidth_tx_power_dbm,
        }
        row.update(_rmse_row(records, scenario.n_rx))
        row.update(_bound_columns(scenario, loaded.state, gamma))
        rows.append(row)
    return TableReport(
        kind="bandwidth_sweep",
        rows=rows,
        meta={"trials": exp.trials, "master_seed": exp.master_seed, "tx_power_dbm": exp.bandwidth_tx_power_dbm},
    )


def _circle_anchors(scenario: Scenario, n_rx: int, radius: float) -> np.ndarray:
    angles = 2 * np.pi * np.arange(n_rx) / n_rx
    ring = np.stack([np.cos(angles), np.sin(angles), np.zeros(n_rx)], axis=1) * radius
    ring[:, 2] = scenario.p_tx[2]
    return scenario.p_tx[None, :] + ring


def compare_toa_only(loaded: LoadedConfig, rx_counts: list | None = None) -> TableReport:
    """Full-model versus delay-only position accuracy over the receiver count.

    Receivers sit evenly on a circle around the TX in the TX's horizontal
    plane. The delay-only column is unidentifiable with two receivers.
    """
    exp = loaded.experiment
    counts = list(rx_counts if rx_counts is not None else exp.rx_count_sweep)
    rows = []
    for idx, n_rx in enumerate(counts):
        scenario = replace(loaded.scenario, anchors=_circle_anchors(loaded.scenario, int(n_rx), exp.rx_circle_radius_m))
        gamma = profile_for_seed(scenario, exp.master_seed)
        records = _run_point(
            scenario, loaded.state, loaded.estimator, gamma,
            exp.trials, exp.master_seed, idx, exp.noiseless, exp.threads,
        )
        row = {"n_rx": int(n_rx)}
        row.update(_rmse_row(records, 0))  # skip per-receiver columns; width varies with M
        row.update({"peb_m": state_bounds(scenario, loaded.state, gamma).peb})
        toa_errs = []
        if n_rx >= 3:
            row["toa_only_peb_m"] = toa_only_peb(scenario, loaded.state, gamma)
            for rec in records:
                if rec is None:
                    continue
                try:
                    p_hat = toa_only_position(rec["tau_hats"], scenario, loaded.estimator)
                    toa_errs.append(np.sum((p_hat - loaded.state.p_ris) ** 2))
                except RisLocateError:
                    continue
            row["toa_only_rmse_pos_m"] = float(np.sqrt(np.mean(toa_errs))) if toa_errs else float("nan")
            row["toa_only_unidentifiable"] = False
        else:
            row["toa_only_peb_m"] = float("nan")
            row["toa_only_rmse_pos_m"] = float("nan")
            row["toa_only_unidentifiable"] = True
        rows.append(row)
    return TableReport(
        kind="toa_comparison",
        rows=rows,
        meta={
            "trials": exp.trials,
            "master_seed": exp.master_seed,
            "circle_radius_m": exp.rx_circle_radius_m,
        },
    )


def crb_contour(loaded: LoadedConfig) -> TableReport:
    """Position/orientation bounds over an xy grid of surface positions.

    Cells where the geometry is degenerate or the information matrix is
    singular are emitted with NaN bounds and a raised flag rather than
    aborting the map.
    """
    exp = loaded.experiment
    grid = exp.grid
    scenario = replace(
        loaded.scenario,
        anchors=np.asarray(exp.contour_rx_positions_m, dtype=float),
        tx_power=10 ** (exp.contour_tx_power_dbm / 10) * 1e-3,
    )
    gamma = profile_for_seed(scenario, exp.master_seed)
    xs = np.linspace(grid.x_min_m, grid.x_max_m, grid.nx)
    ys = np.linspace(grid.y_min_m, grid.y_max_m, grid.ny)
    rows = []
    for alpha_deg in grid.alphas_deg:
        for x in xs:
            for y in ys:
                row = {
                    "alpha_deg": float(alpha_deg),
                    "x_m": float(x),
                    "y_m": float(y),
                    "z_m": grid.z_m,
                }
                try:
                    state = RisState(p_ris=[x, y, grid.z_m], alpha=np.deg2rad(alpha_deg))
                    report = state_bounds(scenario, state, gamma)
                    row.update(
                        {
                            "peb_m": report.peb,
                            "oeb_rad": report.oeb,
                            "peb_db": float(10 * np.log10(report.peb)),
                            "oeb_db": float(10 * np.log10(report.oeb)),
                            "singular": False,
                        }
                    )
                except (RisLocateError, ValueError):
                    row.update(
                        {
                            "peb_m": float("nan"),
                            "oeb_rad": float("nan"),
                            "peb_db": float("nan"),
                            "oeb_db": float("nan"),
                            "singular": True,
                        }
                    )
                rows.append(row)
    return TableReport(
        kind="crb_contour",
        rows=rows,
        meta={
            "tx_power_dbm": exp.contour_tx_power_dbm,
            "master_seed": exp.master_seed,
            "rx_positions_m": exp.contour_rx_positions_m,
        },
    )


def crb_report(loaded: LoadedConfig) -> dict:
    """Bounds at the configured scenario and truth state."""
    gamma = profile_for_seed(loaded.scenario, loaded.experiment.master_seed)
    report = state_bounds(loaded.scenario, loaded.state, gamma)
    out = report.to_dict()
    out["tx_power_dbm"] = watt_to_dbm(loaded.scenario.tx_power)
    out["master_seed"] = loaded.experiment.master_seed
    return out


def simulate_payload(loaded: LoadedConfig, seed: int | None = None) -> dict:
    """One observation draw, serialized with interleaved re/im doubles."""
    master_seed = loaded.experiment.master_seed if seed is None else int(seed)
    gamma = profile_for_seed(loaded.scenario, master_seed)
    rng = trial_rng(master_seed, 0, 0)
    obs = simulate_observations(
        loaded.scenario, loaded.state, gamma, rng,
        sigma2=0.0 if loaded.experiment.noiseless else None,
        rng_seed=master_seed,
    )
    return {
        "seed": master_seed,
        "sigma2_w": obs.sigma2,
        "n_rx": obs.n_rx,
        "n_subcarriers": loaded.scenario.n_subcarriers,
        "n_symbols": loaded.scenario.n_symbols,
        "observations": [
            np.stack([y.real, y.imag], axis=-1).tolist() for y in obs.y
        ],
    }


def observations_from_payload(payload_obs: list, sigma2: float, seed: int | None):
    from .signals import ObservationSet

    ys = []
    for y in payload_obs:
        arr = np.asarray(y, dtype=float)
        if arr.ndim != 3 or arr.shape[-1] != 2:
            raise RisLocateError("observations must be nested [subcarrier][symbol][re, im] arrays")
        ys.append(arr[..., 0] + 1j * arr[..., 1])
    return ObservationSet(y=tuple(ys), sigma2=float(sigma2), rng_seed=seed)


def estimate_payload(loaded: LoadedConfig, obs, seed: int | None = None) -> dict:
    """Run the full pipeline on provided observations; the profile is
    regenerated from the seed that produced them."""
    expected = (loaded.scenario.n_subcarriers, loaded.scenario.n_symbols)
    if obs.n_rx != loaded.scenario.n_rx or any(y.shape != expected for y in obs.y):
        raise RisLocateError(
            f"observation dimensions do not match the scenario: expected "
            f"{loaded.scenario.n_rx} x {expected}"
        )
    master_seed = loaded.experiment.master_seed if seed is None else int(seed)
    gamma = profile_for_seed(loaded.scenario, master_seed)
    res = estimate_state(obs, gamma, loaded.scenario, loaded.estimator)
    return {
        "seed": master_seed,
        "toa_s": [t.tau for t in res.toa],
        "omega": res.omega.tolist(),
        "n_candidates": res.n_candidates,
        "coarse": {
            "position_m": res.coarse.p_ris.tolist(),
            "alpha_rad": res.coarse.alpha,
            "cost": res.coarse.cost,
        },
        "position_m": res.refined.p_ris.tolist(),
        "alpha_rad": res.refined.alpha,
        "alpha_deg": float(np.degrees(res.refined.alpha)),
        "gains": [[g.real, g.imag] for g in res.refined.gains],
        "cost": res.refined.cost,
        "converged": res.refined.converged,
    }
