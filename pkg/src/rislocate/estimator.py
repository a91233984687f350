"""Multi-stage state estimator: delay peaks, spatial-frequency search,
spheroid intersection, orientation line search and likelihood refinement.

Every stage is a pure function of its inputs. Costs are normalized by the
observation energy so optimizer tolerances are scale free.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import least_squares, minimize

from .exceptions import EstimationError, RisLocateError, UnderdeterminedError
from .geometry import RisState, Scenario, path_delay, spatial_frequencies_for_rx
from .signals import ObservationSet, delay_steering, ris_response


@dataclass(frozen=True)
class EstimatorConfig:
    """Tuning knobs for the estimation stages; defaults suit the reference
    scenario and are exposed through the JSON config."""

    mesh_azimuth: int = 800
    mesh_polar: int = 400
    d_th: float = 0.1
    max_candidates: int = 2000
    curve_refine: bool = True
    omega_grid_step: float = 0.02
    alpha_grid_step_deg: float = 0.25
    fd_rel_step: float = 1e-7
    grad_tol: float = 1e-10
    max_iter: int = 200
    per_rx_cost: bool = False


@dataclass(frozen=True)
class ToaEstimate:
    """Delay estimate tau = bin_index / (ifft_size * df) - frac_delay."""

    bin_index: int
    frac_delay: float
    tau: float
    peak_metric: float
    fallback: bool = False


@dataclass(frozen=True)
class CandidateSet:
    """Candidate positions on the spheroid intersection with their range-sum
    residuals against the second spheroid (metres)."""

    points: np.ndarray
    residuals: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class StateEstimate:
    p_ris: np.ndarray
    alpha: float
    gains: np.ndarray
    stage: str
    cost: float
    converged: bool = True


@dataclass(frozen=True)
class PipelineResult:
    """Full pipeline output with per-stage intermediates for diagnostics."""

    toa: tuple[ToaEstimate, ...]
    omega: np.ndarray
    omega_gains: np.ndarray
    n_candidates: int
    coarse: StateEstimate
    refined: StateEstimate


def _central_diff_grad(fun, rel_step: float):
    def grad(x):
        x = np.asarray(x, dtype=float)
        g = np.empty_like(x)
        for i in range(x.size):
            h = rel_step * max(abs(x[i]), 1.0)
            xp = x.copy()
            xp[i] += h
            xm = x.copy()
            xm[i] -= h
            g[i] = (fun(xp) - fun(xm)) / (2.0 * h)
        return g

    return grad


def _quasi_newton(fun, x0, bounds, config: EstimatorConfig):
    res = minimize(
        fun,
        np.asarray(x0, dtype=float),
        jac=_central_diff_grad(fun, config.fd_rel_step),
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": config.max_iter, "gtol": config.grad_tol, "ftol": 1e-15},
    )
    return res


# ---------------------------------------------------------------------------
# Stage 1: time of arrival per receiver
# ---------------------------------------------------------------------------

def toa_coarse(y: np.ndarray, ifft_size: int) -> int:
    """Index of the strongest delay bin of the zero-padded column-wise IFFT."""
    if ifft_size < y.shape[0]:
        raise ValueError("ifft_size must be >= number of subcarriers")
    if not np.any(y):
        raise EstimationError("all-zero observation")
    z = np.fft.ifft(y, n=ifft_size, axis=0)
    return int(np.argmax(np.linalg.norm(z, axis=1)))


def _bin_metric(y: np.ndarray, k: int, shift_bins: float, ifft_size: int) -> float:
    # row k of the IFFT after advancing the columns by shift_bins delay bins
    n = np.arange(y.shape[0])
    v = np.exp(2j * np.pi * n * (k - shift_bins) / ifft_size) / ifft_size
    return float(np.linalg.norm(v @ y))


def toa_refine(y: np.ndarray, k: int, scenario: Scenario, config: EstimatorConfig | None = None) -> ToaEstimate:
    """Maximize the bin-k energy over a one-bin delay advance starting at zero.

    The advance delta lives in [0, 1/(ifft_size*df)], so the refined delay is
    k/(ifft_size*df) - delta.
    """
    config = config or EstimatorConfig()
    n_f = scenario.ifft_size
    bin_width = 1.0 / (n_f * scenario.subcarrier_spacing)
    if not np.any(y):
        raise EstimationError("all-zero observation")
    x_max = min(1.0, float(k))  # keep tau nonnegative
    # normalize by the starting metric so the objective is O(1); the raw row
    # energy is a tiny fraction of the observation and would stall the
    # optimizer's relative-reduction test
    scale = _bin_metric(y, k, 0.0, n_f)
    if scale == 0:
        scale = float(np.linalg.norm(y)) / n_f

    def cost(x):
        return -((_bin_metric(y, k, float(x[0]), n_f) / scale) ** 2)

    fallback = False
    res = _quasi_newton(cost, [0.0], [(0.0, x_max)], config)
    x_best, c_best = float(res.x[0]), float(res.fun)
    if not res.success:
        fallback = True
        grid = np.linspace(0.0, x_max, 1024)
        costs = [cost([x]) for x in grid]
        i = int(np.argmin(costs))
        if costs[i] < c_best:
            x_best, c_best = float(grid[i]), float(costs[i])
    if cost([0.0]) <= c_best:
        x_best, c_best = 0.0, float(cost([0.0]))
    delta = x_best * bin_width
    return ToaEstimate(
        bin_index=k,
        frac_delay=delta,
        tau=k * bin_width - delta,
        peak_metric=float(np.sqrt(-c_best) * scale),
        fallback=fallback,
    )


def estimate_toa(y: np.ndarray, scenario: Scenario, config: EstimatorConfig | None = None) -> ToaEstimate:
    """Coarse peak plus refinement at the peak bin and the bin above.

    The coarse argmax lands on the bin nearest the true delay; when the true
    delay sits above that bin center the in-interval optimum belongs to the
    next bin up, so both are refined and the higher peak metric wins.
    """
    k = toa_coarse(y, scenario.ifft_size)
    best = toa_refine(y, k, scenario, config)
    if k + 1 < scenario.ifft_size:
        alt = toa_refine(y, k + 1, scenario, config)
        if alt.peak_metric > best.peak_metric:
            best = alt
    return best


# ---------------------------------------------------------------------------
# Stage 2: spatial frequencies per receiver
# ---------------------------------------------------------------------------

def remove_delay(y: np.ndarray, tau: float, scenario: Scenario) -> np.ndarray:
    """Counter-rotate the subcarrier phase ramp of a delay estimate."""
    return y * delay_steering(-tau, y.shape[0], scenario.subcarrier_spacing)[:, None]


def collapse_subcarriers(y_r: np.ndarray) -> np.ndarray:
    """Sum the delay-compensated matrix over subcarriers into a symbol vector."""
    return y_r.sum(axis=0)


class OmegaSolver:
    """Concentrated-gain grid search plus refinement for the spatial frequencies.

    The grid cost over [-2, 2]^2 factors through the row/column steering
    vectors, so the profile-dependent pieces (the K x K Gram matrix and its
    contraction against the steering grids) are precomputed once and reused
    across receivers, trials and candidates.
    """

    def __init__(self, gamma: np.ndarray, scenario: Scenario, config: EstimatorConfig | None = None):
        self.config = config or EstimatorConfig()
        self.gamma = gamma
        self.scenario = scenario
        if scenario.n_elements < 2:
            raise EstimationError("spatial frequency unidentifiable: single-element surface")
        if scenario.n_symbols < 2:
            raise EstimationError("need at least two symbols to separate gain and profile")
        step = self.config.omega_grid_step
        self.grid = np.arange(-2.0, 2.0 + step / 2, step)
        coef = -2j * np.pi * scenario.element_spacing / scenario.wavelength
        self._a0 = np.exp(coef * np.outer(np.arange(scenario.k_rows), self.grid))
        self._a1 = np.exp(coef * np.outer(np.arange(scenario.k_cols), self.grid))
        gram = gamma.conj().T @ gamma
        gram4 = gram.reshape(scenario.k_rows, scenario.k_cols, scenario.k_rows, scenario.k_cols)
        t1 = np.einsum("rcpq,ri,pi->cqi", gram4, self._a0.conj(), self._a0, optimize=True)
        self._den = np.einsum("cqi,cj,qj->ij", t1, self._a1.conj(), self._a1, optimize=True).real

    def _gain(self, w, y: np.ndarray) -> complex:
        v = self.gamma @ ris_response(
            w, self.scenario.k_rows, self.scenario.k_cols, self.scenario.element_spacing, self.scenario.wavelength
        )
        denom = self.scenario.n_subcarriers * np.sqrt(self.scenario.subcarrier_power) * (np.linalg.norm(v) ** 2)
        return complex(np.vdot(v, y) / denom)

    def _cost(self, w, y: np.ndarray, energy: float) -> float:
        v = self.gamma @ ris_response(
            w, self.scenario.k_rows, self.scenario.k_cols, self.scenario.element_spacing, self.scenario.wavelength
        )
        return float((energy - abs(np.vdot(v, y)) ** 2 / (np.linalg.norm(v) ** 2)) / energy)

    def estimate(self, y: np.ndarray):
        """Return (omega, gain, normalized cost) for one collapsed observation."""
        energy = float(np.linalg.norm(y) ** 2)
        if energy == 0:
            raise EstimationError("all-zero observation")
        w_prof = self.gamma.conj().T @ y
        w_mat = w_prof.reshape(self.scenario.k_rows, self.scenario.k_cols)
        num = np.abs(self._a0.conj().T @ w_mat @ self._a1.conj()) ** 2
        cost_grid = energy - num / self._den
        i, j = np.unravel_index(int(np.argmin(cost_grid)), cost_grid.shape)
        x0 = [self.grid[i], self.grid[j]]

        res = _quasi_newton(lambda x: self._cost(x, y, energy), x0, [(-2.0, 2.0), (-2.0, 2.0)], self.config)
        w = np.clip(res.x, -2.0, 2.0)
        return w, self._gain(w, y), float(res.fun)


def estimate_omega(y_r: np.ndarray, gamma: np.ndarray, scenario: Scenario, config: EstimatorConfig | None = None):
    """One-shot wrapper around :class:`OmegaSolver` for a single receiver."""
    return OmegaSolver(gamma, scenario, config).estimate(y_r)


# ---------------------------------------------------------------------------
# Stage 3: position candidates from range sums
# ---------------------------------------------------------------------------

def range_sum_residuals(p: np.ndarray, tau_hats: np.ndarray, scenario: Scenario) -> np.ndarray:
    """Signed range-sum residuals of point(s) p against each receiver's spheroid."""
    p = np.asarray(p, dtype=float)
    d_tx = np.linalg.norm(p - scenario.p_tx, axis=-1)
    out = [
        d_tx + np.linalg.norm(p - scenario.anchors[m], axis=-1) - scenario.c * tau_hats[m]
        for m in range(scenario.n_rx)
    ]
    return np.stack(out, axis=-1)


def _spheroid_frame(f1: np.ndarray, f2: np.ndarray, range_sum: float):
    center = 0.5 * (f1 + f2)
    semi_major = 0.5 * range_sum
    focal = 0.5 * np.linalg.norm(f2 - f1)
    if semi_major <= focal:
        raise EstimationError("inconsistent TOAs: range sum does not exceed the baseline")
    semi_minor = np.sqrt(semi_major**2 - focal**2)
    axis = (f2 - f1) / (2 * focal)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    n1 = np.cross(axis, helper)
    n1 /= np.linalg.norm(n1)
    n2 = np.cross(axis, n1)
    return center, semi_major, semi_minor, axis, n1, n2


def _surface_points(frame, u, v):
    center, a, b, axis, n1, n2 = frame
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    return (
        center
        + a * np.cos(u)[..., None] * axis
        + b * (np.sin(u) * np.cos(v))[..., None] * n1
        + b * (np.sin(u) * np.sin(v))[..., None] * n2
    )


def _mesh_points(frame, polar, azim):
    uu, vv = np.meshgrid(polar, azim, indexing="ij")
    return _surface_points(frame, uu, vv)


def spheroid_candidates(
    tau_hats: np.ndarray,
    scenario: Scenario,
    config: EstimatorConfig | None = None,
    d_th: float | None = None,
    mesh: tuple[int, int] | None = None,
) -> CandidateSet:
    """Positions compatible with the estimated range sums.

    With two receivers the solutions form a curve: the first spheroid is
    meshed, mesh points are screened by their range-sum residual against the
    second spheroid, and (by default) each sign change between neighbouring
    mesh nodes is bisected onto the curve, which keeps the candidate spacing
    well below the raw mesh pitch. With more receivers the range-sum
    least-squares problem has a unique solution and a multi-start solver
    returns a single point.
    """
    config = config or EstimatorConfig()
    tau_hats = np.asarray(tau_hats, dtype=float)
    if d_th is None:
        d_th = config.d_th
    n_az, n_pol = mesh if mesh is not None else (config.mesh_azimuth, config.mesh_polar)

    baselines = np.linalg.norm(scenario.anchors - scenario.p_tx, axis=1)
    if np.any(scenario.c * tau_hats <= baselines):
        raise EstimationError("inconsistent TOAs: range sum does not exceed the baseline")

    if scenario.n_rx > 2:
        point = _range_sum_least_squares(tau_hats, scenario, config)
        res = np.linalg.norm(range_sum_residuals(point, tau_hats, scenario))
        return CandidateSet(points=point[None, :], residuals=np.array([res]))

    frame = _spheroid_frame(scenario.p_tx, scenario.anchors[0], scenario.c * tau_hats[0])
    polar = np.linspace(0.0, np.pi, n_pol)
    azim = np.linspace(0.0, 2 * np.pi, n_az, endpoint=False)
    pts = _mesh_points(frame, polar, azim)

    def signed_res(q):
        return (
            np.linalg.norm(q - scenario.p_tx, axis=-1)
            + np.linalg.norm(q - scenario.anchors[1], axis=-1)
            - scenario.c * tau_hats[1]
        )

    resid = signed_res(pts)

    points = residuals = None
    if config.curve_refine:
        # collect every mesh edge across which the signed residual changes
        # sign, then bisect them all onto the curve in lockstep
        flip_u = resid[:-1, :] * resid[1:, :] < 0
        iu, ju = np.nonzero(flip_u)
        resid_wrap = np.concatenate([resid, resid[:, :1]], axis=1)
        azim_wrap = np.concatenate([azim, [2 * np.pi]])
        flip_v = resid_wrap[:, :-1] * resid_wrap[:, 1:] < 0
        iv, jv = np.nonzero(flip_v)

        u_lo = np.concatenate([polar[iu], polar[iv]])
        u_hi = np.concatenate([polar[iu + 1], polar[iv]])
        v_lo = np.concatenate([azim[ju], azim_wrap[jv]])
        v_hi = np.concatenate([azim[ju], azim_wrap[jv + 1]])
        f_lo = np.concatenate([resid[iu, ju], resid_wrap[iv, jv]])
        if len(u_lo):
            for _ in range(40):
                u_mid, v_mid = 0.5 * (u_lo + u_hi), 0.5 * (v_lo + v_hi)
                f_mid = signed_res(_surface_points(frame, u_mid, v_mid))
                upper = f_lo * f_mid <= 0
                u_hi = np.where(upper, u_mid, u_hi)
                v_hi = np.where(upper, v_mid, v_hi)
                u_lo = np.where(upper, u_lo, u_mid)
                v_lo = np.where(upper, v_lo, v_mid)
                f_lo = np.where(upper, f_lo, f_mid)
            u_mid, v_mid = 0.5 * (u_lo + u_hi), 0.5 * (v_lo + v_hi)
            order = np.lexsort((u_mid, v_mid))
            points = _surface_points(frame, u_mid[order], v_mid[order])
            residuals = np.abs(signed_res(points))

    if points is None or len(points) == 0:
        keep = np.abs(resid) < d_th
        if not np.any(keep):
            raise EstimationError("inconsistent TOAs or d_th too small: empty candidate set")
        points = pts[keep]
        residuals = np.abs(resid[keep])

    # the observation model requires front illumination, so candidates with a
    # terminal at or below the surface horizon (the mirror branch for
    # near-coplanar terminals) cannot be solutions; keep them only if nothing
    # else survives
    z_ceiling = min(float(scenario.p_tx[2]), float(scenario.anchors[:, 2].min()))
    front = points[:, 2] < z_ceiling
    if np.any(front):
        points, residuals = points[front], residuals[front]

    if len(points) > config.max_candidates:
        idx = np.unique(np.round(np.linspace(0, len(points) - 1, config.max_candidates)).astype(int))
        points, residuals = points[idx], residuals[idx]
    return CandidateSet(points=points, residuals=np.asarray(residuals, dtype=float))


def _range_sum_least_squares(tau_hats: np.ndarray, scenario: Scenario, config: EstimatorConfig) -> np.ndarray:
    """Multi-start nonlinear least squares on the range-sum residuals.

    Range sums alone can admit several exact intersections (for receivers in a
    plane the mirror image is one), so solutions violating front illumination
    (every terminal must lie above the surface plane) are discarded when a
    feasible one exists.
    """
    frame = _spheroid_frame(scenario.p_tx, scenario.anchors[0], scenario.c * tau_hats[0])
    polar = np.linspace(0.0, np.pi, 30)
    azim = np.linspace(0.0, 2 * np.pi, 60, endpoint=False)
    pts = _mesh_points(frame, polar, azim).reshape(-1, 3)
    total = np.linalg.norm(range_sum_residuals(pts, tau_hats, scenario), axis=-1)
    starts = pts[np.argsort(total)[:8]]

    z_ceiling = min(float(scenario.p_tx[2]), float(scenario.anchors[:, 2].min()))
    solutions = []
    for x0 in starts:
        sol = least_squares(lambda p: range_sum_residuals(p, tau_hats, scenario), x0, xtol=1e-14, ftol=1e-14)
        solutions.append((float(sol.cost), sol.x))
    feasible = [s for s in solutions if s[1][2] < z_ceiling]
    pool = feasible if feasible else solutions
    return np.asarray(min(pool, key=lambda s: s[0])[1])


def toa_only_position(tau_hats: np.ndarray, scenario: Scenario, config: EstimatorConfig | None = None) -> np.ndarray:
    """Range-sum-only position solve; underdetermined below three receivers."""
    tau_hats = np.asarray(tau_hats, dtype=float)
    if scenario.n_rx < 3:
        raise UnderdeterminedError(
            f"position underdetermined from {scenario.n_rx} range sums; need at least 3 receivers"
        )
    baselines = np.linalg.norm(scenario.anchors - scenario.p_tx, axis=1)
    if np.any(scenario.c * tau_hats <= baselines):
        raise EstimationError("inconsistent TOAs: range sum does not exceed the baseline")
    return _range_sum_least_squares(tau_hats, scenario, config or EstimatorConfig())


# ---------------------------------------------------------------------------
# Stage 4: orientation and candidate selection
# ---------------------------------------------------------------------------

def _direction_sums(points: np.ndarray, scenario: Scenario) -> np.ndarray:
    """In-plane components of u_tx + u_rx per candidate point, shape (n, M, 2).

    For fixed position the spatial frequencies are the first two components of
    the rotated direction sum, i.e. a pure sinusoid in the orientation; these
    are its coefficients.
    """
    points = np.atleast_2d(points)
    diff_a = scenario.p_tx[None, :] - points
    u_a = diff_a / np.linalg.norm(diff_a, axis=1, keepdims=True)
    out = np.empty((len(points), scenario.n_rx, 2))
    for m in range(scenario.n_rx):
        diff_d = scenario.anchors[m][None, :] - points
        u_d = diff_d / np.linalg.norm(diff_d, axis=1, keepdims=True)
        out[:, m, 0] = u_a[:, 0] + u_d[:, 0]
        out[:, m, 1] = u_a[:, 1] + u_d[:, 1]
    return out


def _omega_vs_alpha(p: np.ndarray, scenario: Scenario, alphas: np.ndarray) -> np.ndarray:
    """Spatial frequencies at every receiver versus orientation, (len(alphas), M, 2)."""
    s = _direction_sums(np.asarray(p)[None, :], scenario)[0]
    cos_a, sin_a = np.cos(alphas), np.sin(alphas)
    out = np.empty((len(alphas), scenario.n_rx, 2))
    out[:, :, 0] = np.outer(cos_a, s[:, 0]) + np.outer(sin_a, s[:, 1])
    out[:, :, 1] = np.outer(-sin_a, s[:, 0]) + np.outer(cos_a, s[:, 1])
    return out


def orientation_for_position(
    p: np.ndarray,
    omega_hats: np.ndarray,
    scenario: Scenario,
    config: EstimatorConfig | None = None,
) -> float:
    """Line search plus polish for the orientation minimizing the spatial
    frequency misfit at a hypothesized position; result in [0, 2*pi)."""
    config = config or EstimatorConfig()
    omega_hats = np.asarray(omega_hats, dtype=float)
    step = np.deg2rad(config.alpha_grid_step_deg)
    alphas = np.arange(0.0, 2 * np.pi, step)
    costs = np.sum((_omega_vs_alpha(p, scenario, alphas) - omega_hats[None, :, :]) ** 2, axis=(1, 2))
    a0 = float(alphas[int(np.argmin(costs))])

    def cost(x):
        return float(np.sum((_omega_vs_alpha(p, scenario, np.array([x[0]]))[0] - omega_hats) ** 2))

    res = _quasi_newton(cost, [a0], None, config)
    best = res.x[0] if res.fun <= costs.min() else a0
    return float(np.mod(best, 2 * np.pi))


def _candidate_cost(
    p: np.ndarray,
    alpha: float,
    y_rs: list[np.ndarray],
    gamma: np.ndarray,
    scenario: Scenario,
    per_rx: bool,
):
    """Profile misfit of a (position, orientation) hypothesis with per-receiver
    closed-form gains; returns (cost, gains)."""
    state = RisState(p_ris=p, alpha=alpha)
    amp = scenario.n_subcarriers * np.sqrt(scenario.subcarrier_power)
    models, gains = [], []
    for m in range(scenario.n_rx):
        w = spatial_frequencies_for_rx(scenario, state, m)
        v = gamma @ ris_response(w, scenario.k_rows, scenario.k_cols, scenario.element_spacing, scenario.wavelength)
        g = np.vdot(v, y_rs[m]) / (amp * np.linalg.norm(v) ** 2)
        gains.append(g)
        models.append(amp * g * v)
    if per_rx:
        cost = sum(float(np.linalg.norm(y_rs[m] - models[m]) ** 2) for m in range(scenario.n_rx))
    else:
        y_sum = np.sum(y_rs, axis=0)
        cost = float(np.linalg.norm(y_sum - np.sum(models, axis=0)) ** 2)
    return cost, np.array(gains)


def _batched_candidate_costs(
    points: np.ndarray,
    alphas: np.ndarray,
    y_rs: list[np.ndarray],
    gamma: np.ndarray,
    scenario: Scenario,
    per_rx: bool,
):
    """Profile misfit of each (position, orientation) pair with closed-form
    per-receiver gains; vectorized over candidates."""
    points = np.atleast_2d(points)
    n = len(points)
    s = _direction_sums(points, scenario)
    cos_a, sin_a = np.cos(alphas)[:, None], np.sin(alphas)[:, None]
    w0 = cos_a * s[..., 0] + sin_a * s[..., 1]
    w1 = -sin_a * s[..., 0] + cos_a * s[..., 1]
    coef = -2j * np.pi * scenario.element_spacing / scenario.wavelength
    a0 = np.exp(coef * np.arange(scenario.k_rows)[:, None] * w0.ravel()[None, :])
    a1 = np.exp(coef * np.arange(scenario.k_cols)[:, None] * w1.ravel()[None, :])
    resp = (a0[:, None, :] * a1[None, :, :]).reshape(scenario.n_elements, -1)
    v = (gamma @ resp).reshape(scenario.n_symbols, n, scenario.n_rx)
    amp = scenario.n_subcarriers * np.sqrt(scenario.subcarrier_power)
    y = np.stack(y_rs, axis=1)
    num = np.einsum("tnm,tm->nm", v.conj(), y)
    vnorm2 = np.einsum("tnm,tnm->nm", v.conj(), v).real
    gains = num / (amp * vnorm2)
    if per_rx:
        res = y[:, None, :] - amp * gains[None, :, :] * v
        costs = np.sum(np.abs(res) ** 2, axis=(0, 2))
    else:
        models = amp * np.einsum("nm,tnm->tn", gains, v)
        costs = np.sum(np.abs(y.sum(axis=1)[:, None] - models) ** 2, axis=0)
    return costs, gains


def select_position(
    candidates: CandidateSet,
    y_rs: list[np.ndarray],
    omega_hats: np.ndarray,
    gamma: np.ndarray,
    scenario: Scenario,
    config: EstimatorConfig | None = None,
) -> StateEstimate:
    """Pick the candidate whose best-orientation profile misfit is smallest.

    The orientation line search and the candidate costs are evaluated on the
    grid for every candidate at once; only the winner gets the quasi-Newton
    orientation polish. Ties resolve to the lowest candidate index, so the
    result is deterministic for a fixed candidate ordering.
    """
    config = config or EstimatorConfig()
    if len(candidates) == 0:
        raise EstimationError("empty candidate set")
    points = np.atleast_2d(candidates.points)
    omega_hats = np.asarray(omega_hats, dtype=float)

    alphas = np.arange(0.0, 2 * np.pi, np.deg2rad(config.alpha_grid_step_deg))
    s = _direction_sums(points, scenario)
    cos_a, sin_a = np.cos(alphas), np.sin(alphas)
    w0 = s[..., 0, None] * cos_a + s[..., 1, None] * sin_a
    w1 = -s[..., 0, None] * sin_a + s[..., 1, None] * cos_a
    misfit = (w0 - omega_hats[None, :, 0, None]) ** 2 + (w1 - omega_hats[None, :, 1, None]) ** 2
    alpha_grid_best = alphas[np.argmin(misfit.sum(axis=1), axis=1)]

    costs, _ = _batched_candidate_costs(points, alpha_grid_best, y_rs, gamma, scenario, config.per_rx_cost)
    i_best = int(np.argmin(costs))
    p = points[i_best]
    alpha = orientation_for_position(p, omega_hats, scenario, config)
    cost, gains = _candidate_cost(p, alpha, y_rs, gamma, scenario, config.per_rx_cost)
    norm = sum(float(np.linalg.norm(y) ** 2) for y in y_rs) or 1.0
    return StateEstimate(
        p_ris=np.asarray(p, dtype=float),
        alpha=float(alpha),
        gains=gains,
        stage="coarse",
        cost=cost / norm,
        converged=True,
    )


# ---------------------------------------------------------------------------
# Stage 5: likelihood refinement
# ---------------------------------------------------------------------------

def _mle_cost_and_gains(x: np.ndarray, obs: ObservationSet, gamma: np.ndarray, scenario: Scenario):
    state = RisState(p_ris=x[:3], alpha=x[3])
    amp = np.sqrt(scenario.subcarrier_power)
    cost = 0.0
    gains = []
    for m in range(scenario.n_rx):
        tau = path_delay(scenario, state, m)
        w = spatial_frequencies_for_rx(scenario, state, m)
        d = delay_steering(tau, scenario.n_subcarriers, scenario.subcarrier_spacing)
        v = gamma @ ris_response(w, scenario.k_rows, scenario.k_cols, scenario.element_spacing, scenario.wavelength)
        inner = amp * (d.conj() @ obs.y[m] @ v.conj())
        denom = scenario.subcarrier_power * scenario.n_subcarriers * np.linalg.norm(v) ** 2
        gains.append(inner / denom)
        cost += float(np.linalg.norm(obs.y[m]) ** 2 - abs(inner) ** 2 / denom)
    return cost, np.array(gains)


def mle_cost(obs: ObservationSet, p: np.ndarray, alpha: float, scenario: Scenario, gamma: np.ndarray) -> float:
    """Gain-concentrated likelihood misfit of a state, as a fraction of the
    observation energy; the quantity :func:`mle_refine` descends."""
    energy = sum(float(np.linalg.norm(y) ** 2) for y in obs.y)
    if energy == 0:
        raise EstimationError("all-zero observation")
    cost, _ = _mle_cost_and_gains(np.concatenate([np.asarray(p, dtype=float), [alpha]]), obs, gamma, scenario)
    return cost / energy


def mle_refine(
    obs: ObservationSet,
    init: StateEstimate,
    scenario: Scenario,
    gamma: np.ndarray,
    config: EstimatorConfig | None = None,
) -> StateEstimate:
    """Quasi-Newton descent of the gain-concentrated likelihood from the coarse
    state; never returns a higher cost than the initial point."""
    config = config or EstimatorConfig()
    energy = sum(float(np.linalg.norm(y) ** 2) for y in obs.y)
    if energy == 0:
        raise EstimationError("all-zero observation")

    def cost(x):
        try:
            c, _ = _mle_cost_and_gains(x, obs, gamma, scenario)
        except (RisLocateError, ValueError):
            return 1e6  # degenerate geometry visited during a line search
        return c / energy

    x0 = np.concatenate([init.p_ris, [init.alpha]])
    c0 = cost(x0)
    res = _quasi_newton(cost, x0, None, config)
    if res.fun <= c0:
        c_final, gains = _mle_cost_and_gains(res.x, obs, gamma, scenario)
        return StateEstimate(
            p_ris=res.x[:3].copy(),
            alpha=float(np.mod(res.x[3], 2 * np.pi)),
            gains=gains,
            stage="refined",
            cost=c_final / energy,
            converged=bool(res.success),
        )
    _, gains = _mle_cost_and_gains(x0, obs, gamma, scenario)
    return replace(init, stage="refined", gains=gains, cost=c0, converged=False)


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------

def estimate_state(
    obs: ObservationSet,
    gamma: np.ndarray,
    scenario: Scenario,
    config: EstimatorConfig | None = None,
    omega_solver: OmegaSolver | None = None,
) -> PipelineResult:
    """Run every stage on one observation set.

    ``omega_solver`` may be shared across calls with the same profile to reuse
    its precomputed grids.
    """
    config = config or EstimatorConfig()
    solver = omega_solver if omega_solver is not None else OmegaSolver(gamma, scenario, config)

    toas = tuple(estimate_toa(obs.y[m], scenario, config) for m in range(scenario.n_rx))
    tau_hats = np.array([t.tau for t in toas])

    y_rs, omegas, omega_gains = [], [], []
    for m in range(scenario.n_rx):
        y_r = collapse_subcarriers(remove_delay(obs.y[m], tau_hats[m], scenario))
        w, g, _ = solver.estimate(y_r)
        y_rs.append(y_r)
        omegas.append(w)
        omega_gains.append(g)
    omegas = np.array(omegas)

    candidates = spheroid_candidates(tau_hats, scenario, config)
    coarse = select_position(candidates, y_rs, omegas, gamma, scenario, config)
    refined = mle_refine(obs, coarse, scenario, gamma, config)
    return PipelineResult(
        toa=toas,
        omega=omegas,
        omega_gains=np.array(omega_gains),
        n_candidates=len(candidates),
        coarse=coarse,
        refined=refined,
    )
