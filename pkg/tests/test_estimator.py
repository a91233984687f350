import numpy as np
import pytest

from rislocate.estimator import (
    CandidateSet,
    EstimatorConfig,
    OmegaSolver,
    _bin_metric,
    collapse_subcarriers,
    estimate_omega,
    estimate_state,
    estimate_toa,
    mle_refine,
    orientation_for_position,
    range_sum_residuals,
    remove_delay,
    select_position,
    spheroid_candidates,
    toa_coarse,
    toa_only_position,
    toa_refine,
)
from rislocate.exceptions import EstimationError, UnderdeterminedError
from rislocate.fisher import fim_channel, teb_web
from rislocate.geometry import RisState, path_delay, path_delays, spatial_frequencies_for_rx
from rislocate.signals import (
    channel_gain,
    model_matrix,
    noiseless_observation,
    random_phase_profile,
    simulate_observations,
)

from conftest import make_small, make_reference, random_geometry

STATE = RisState(p_ris=[4.0, 1.0, -4.0], alpha=np.pi / 6)


def wrap(angle):
    return np.angle(np.exp(1j * np.asarray(angle)))


def reference_setup(tx_power_dbm=30.0, profile_seed=42):
    scenario = make_reference(tx_power_dbm)
    gamma = random_phase_profile(scenario.n_elements, scenario.n_symbols, np.random.default_rng(profile_seed))
    return scenario, gamma


# ---------------------------------------------------------------------------
# delay estimation
# ---------------------------------------------------------------------------

def test_toa_coarse_on_grid_peak():
    scenario, gamma = reference_setup()
    bin_width = 1.0 / (scenario.ifft_size * scenario.subcarrier_spacing)
    for k in (5, 23, 100):
        y = model_matrix(k * bin_width, (0.3, -0.2), 1e-8, gamma, scenario)
        assert toa_coarse(y, scenario.ifft_size) == k


def test_toa_coarse_between_bins():
    scenario, gamma = reference_setup()
    bin_width = 1.0 / (scenario.ifft_size * scenario.subcarrier_spacing)
    y = model_matrix(23.4 * bin_width, (0.3, -0.2), 1e-8, gamma, scenario)
    assert toa_coarse(y, scenario.ifft_size) in (23, 24)


def test_toa_coarse_reference_delay():
    scenario, gamma = reference_setup()
    y = noiseless_observation(scenario, STATE, gamma, 0)
    assert toa_coarse(y, scenario.ifft_size) in (23, 24)


def test_toa_coarse_zero_input_raises():
    with pytest.raises(EstimationError):
        toa_coarse(np.zeros((8, 4), dtype=complex), 64)


def test_toa_refine_noise_free_accuracy():
    scenario, gamma = reference_setup()
    taus = path_delays(scenario, STATE)
    for m in range(2):
        y = noiseless_observation(scenario, STATE, gamma, m)
        est = estimate_toa(y, scenario)
        assert abs(est.tau - taus[m]) < 2e-12
        assert not est.fallback


def test_toa_refine_against_dense_grid_oracle():
    scenario, gamma = reference_setup()
    y = noiseless_observation(scenario, STATE, gamma, 0)
    k = toa_coarse(y, scenario.ifft_size)
    est = toa_refine(y, k + 1, scenario)  # optimum lies in the upper bin interval
    grid = np.linspace(0.0, 1.0, 10_000)
    metrics = np.array([_bin_metric(y, k + 1, x, scenario.ifft_size) for x in grid])
    assert est.peak_metric >= metrics.max() * (1 - 1e-12)


def test_toa_refine_on_grid_boundary_optimum():
    scenario, gamma = reference_setup()
    bin_width = 1.0 / (scenario.ifft_size * scenario.subcarrier_spacing)
    y = model_matrix(40 * bin_width, (0.3, -0.2), 1e-8, gamma, scenario)
    est = toa_refine(y, 40, scenario)
    assert est.frac_delay <= 1e-9 * bin_width


def test_toa_estimate_reconstruction_identity():
    scenario, gamma = reference_setup()
    bin_width = 1.0 / (scenario.ifft_size * scenario.subcarrier_spacing)
    obs = simulate_observations(scenario, STATE, gamma, np.random.default_rng(5))
    est = estimate_toa(obs.y[0], scenario)
    assert est.tau == est.bin_index * bin_width - est.frac_delay
    assert est.tau >= 0


def test_toa_profile_invariance_noise_free():
    scenario, _ = reference_setup()
    tau_true = path_delay(scenario, STATE, 0)
    taus = []
    for seed in (1, 2):
        gamma = random_phase_profile(scenario.n_elements, scenario.n_symbols, np.random.default_rng(seed))
        y = noiseless_observation(scenario, STATE, gamma, 0)
        taus.append(estimate_toa(y, scenario).tau)
    assert abs(taus[0] - tau_true) < 2e-12
    assert abs(taus[0] - taus[1]) < 1e-12


def test_toa_rmse_tracks_bound():
    # at high power the refined delay RMSE sits within 1.5x of its bound
    scenario, gamma = reference_setup(tx_power_dbm=30.0)
    teb, _, _ = teb_web(fim_channel(scenario, STATE, gamma))
    taus = path_delays(scenario, STATE)
    sq = np.zeros(2)
    trials = 200
    for t in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=501, spawn_key=(t,)))
        obs = simulate_observations(scenario, STATE, gamma, rng)
        for m in range(2):
            sq[m] += (estimate_toa(obs.y[m], scenario).tau - taus[m]) ** 2
    rmse = np.sqrt(sq / trials)
    assert np.all(rmse <= 1.5 * teb)


# ---------------------------------------------------------------------------
# delay removal and collapse
# ---------------------------------------------------------------------------

def test_remove_delay_identity_and_involution():
    scenario, gamma = reference_setup()
    obs = simulate_observations(scenario, STATE, gamma, np.random.default_rng(6))
    y = obs.y[0]
    assert np.array_equal(remove_delay(y, 0.0, scenario), y)
    tau = 3.7e-8
    assert np.allclose(remove_delay(remove_delay(y, tau, scenario), -tau, scenario), y, rtol=1e-12)


def test_remove_delay_flattens_subcarriers():
    scenario, gamma = reference_setup()
    tau = path_delay(scenario, STATE, 0)
    y_r = remove_delay(noiseless_observation(scenario, STATE, gamma, 0), tau, scenario)
    assert np.allclose(y_r, y_r[:1, :], rtol=1e-12)


def test_collapse_subcarriers_identity():
    scenario, gamma = reference_setup()
    y = noiseless_observation(scenario, STATE, gamma, 0, gain=2e-8)
    y_r = remove_delay(y, path_delay(scenario, STATE, 0), scenario)
    collapsed = collapse_subcarriers(y_r)
    from rislocate.signals import ris_response

    w = spatial_frequencies_for_rx(scenario, STATE, 0)
    b = ris_response(w, 17, 17, scenario.element_spacing, scenario.wavelength)
    expected = scenario.n_subcarriers * 2e-8 * np.sqrt(scenario.subcarrier_power) * (gamma @ b)
    assert np.allclose(collapsed / expected, 1.0, atol=1e-10)
    single = np.arange(6, dtype=complex).reshape(1, 6)
    assert np.array_equal(collapse_subcarriers(single), single[0])


def test_collapse_subcarriers_noise_variance():
    # summing n_c independent complex samples multiplies the variance by n_c
    rng = np.random.default_rng(14)
    n_c, n_t, sigma2 = 64, 2000, 0.35
    noise = np.sqrt(sigma2 / 2) * (rng.standard_normal((n_c, n_t)) + 1j * rng.standard_normal((n_c, n_t)))
    collapsed = collapse_subcarriers(noise)
    measured = np.mean(np.abs(collapsed) ** 2)
    assert abs(measured - n_c * sigma2) < 0.1 * n_c * sigma2


# ---------------------------------------------------------------------------
# spatial frequency estimation
# ---------------------------------------------------------------------------

def _collapsed_noise_free(scenario, gamma, m, gain):
    y = noiseless_observation(scenario, STATE, gamma, m, gain=gain)
    return collapse_subcarriers(remove_delay(y, path_delay(scenario, STATE, m), scenario))


def test_estimate_omega_noise_free_recovery():
    scenario, gamma = reference_setup()
    gain = 2.5e-8 * np.exp(1j * 0.7)
    solver = OmegaSolver(gamma, scenario)
    for m in range(2):
        w_true = np.array(spatial_frequencies_for_rx(scenario, STATE, m))
        w_hat, g_hat, cost = solver.estimate(_collapsed_noise_free(scenario, gamma, m, gain))
        assert np.max(np.abs(w_hat - w_true)) < 1e-6
        assert abs(g_hat - gain) < 1e-8 * abs(gain)
        assert cost < 1e-12


def test_estimate_omega_truth_beats_random_candidates():
    scenario, gamma = reference_setup()
    solver = OmegaSolver(gamma, scenario)
    y = _collapsed_noise_free(scenario, gamma, 0, 2.5e-8)
    energy = float(np.linalg.norm(y) ** 2)
    w_true = np.array(spatial_frequencies_for_rx(scenario, STATE, 0))
    cost_true = solver._cost(w_true, y, energy)
    rng = np.random.default_rng(7)
    for w in rng.uniform(-2, 2, size=(1000, 2)):
        assert cost_true <= solver._cost(w, y, energy) + 1e-15


def test_estimate_omega_stays_in_box():
    scenario, gamma = reference_setup(tx_power_dbm=0.0)
    rng = np.random.default_rng(8)
    obs = simulate_observations(scenario, STATE, gamma, rng)
    for m in range(2):
        y_r = collapse_subcarriers(remove_delay(obs.y[m], path_delays(scenario, STATE)[m], scenario))
        w_hat, _, _ = estimate_omega(y_r, gamma, scenario)
        assert np.all(np.abs(w_hat) <= 2.0)


def test_estimate_omega_single_element_raises():
    scenario = make_small(k_rows=1, k_cols=1)
    gamma = random_phase_profile(1, scenario.n_symbols, np.random.default_rng(0))
    with pytest.raises(EstimationError):
        estimate_omega(np.ones(scenario.n_symbols, dtype=complex), gamma, scenario)


# ---------------------------------------------------------------------------
# spheroid candidates and delay-only positioning
# ---------------------------------------------------------------------------

def test_spheroid_candidates_reference_geometry():
    scenario, _ = reference_setup()
    taus = path_delays(scenario, STATE)
    for mesh in (None, (400, 200)):
        cands = spheroid_candidates(taus, scenario, mesh=mesh)
        dists = np.linalg.norm(cands.points - STATE.p_ris, axis=1)
        assert dists.min() < 0.02
        assert len(cands) <= EstimatorConfig().max_candidates
        # every returned point sits on the first spheroid and near the second
        res = range_sum_residuals(cands.points, taus, scenario)
        assert np.abs(res[:, 0]).max() < 1e-9
        assert np.abs(res[:, 1]).max() < 1e-6


def test_spheroid_truth_residual_zero():
    scenario, _ = reference_setup()
    taus = path_delays(scenario, STATE)
    assert np.allclose(range_sum_residuals(STATE.p_ris, taus, scenario), 0.0, atol=1e-12)


def test_spheroid_three_receivers_single_point():
    scenario = make_reference(anchors=[[-3.0, 5.0, -1.0], [3.0, -3.0, 0.0], [0.0, 5.0, 0.0]])
    taus = path_delays(scenario, STATE)
    cands = spheroid_candidates(taus, scenario)
    assert len(cands) == 1
    assert np.linalg.norm(cands.points[0] - STATE.p_ris) < 1e-3


def test_spheroid_invalid_range_sum_raises():
    scenario, _ = reference_setup()
    taus = path_delays(scenario, STATE)
    bad = taus.copy()
    bad[0] = 0.5 * np.linalg.norm(scenario.anchors[0] - scenario.p_tx) / scenario.c
    with pytest.raises(EstimationError):
        spheroid_candidates(bad, scenario)


def test_spheroid_disjoint_surfaces_raise():
    scenario, _ = reference_setup()
    taus = path_delays(scenario, STATE)
    bad = taus.copy()
    bad[1] = taus[1] + 1e-6  # second spheroid far outside the first
    with pytest.raises(EstimationError):
        spheroid_candidates(bad, scenario)


def test_toa_only_position_circle_layout():
    angles = 2 * np.pi * np.arange(4) / 4
    scenario = make_reference(anchors=[[5 * np.cos(a), 5 * np.sin(a), 0.0] for a in angles])
    taus = path_delays(scenario, STATE)
    p_hat = toa_only_position(taus, scenario)
    assert np.linalg.norm(p_hat - STATE.p_ris) < 1e-3
    # permuting the receivers leaves the solution unchanged
    perm = [2, 0, 3, 1]
    scenario_p = make_reference(anchors=scenario.anchors[perm])
    p_hat_p = toa_only_position(taus[perm], scenario_p)
    assert np.linalg.norm(p_hat_p - p_hat) < 1e-6


def test_toa_only_position_two_receivers_raises():
    scenario, _ = reference_setup()
    with pytest.raises(UnderdeterminedError):
        toa_only_position(path_delays(scenario, STATE), scenario)


# ---------------------------------------------------------------------------
# orientation and candidate selection
# ---------------------------------------------------------------------------

def test_orientation_truth_recovery():
    scenario, _ = reference_setup()
    w_true = np.array([spatial_frequencies_for_rx(scenario, STATE, m) for m in range(2)])
    alpha_hat = orientation_for_position(STATE.p_ris, w_true, scenario)
    assert abs(wrap(alpha_hat - STATE.alpha)) < 1e-6


def test_orientation_periodic_and_wrapped():
    scenario, _ = reference_setup()
    from rislocate.estimator import _omega_vs_alpha

    alphas = np.array([0.7])
    a = _omega_vs_alpha(STATE.p_ris, scenario, alphas)
    b = _omega_vs_alpha(STATE.p_ris, scenario, alphas + 2 * np.pi)
    assert np.allclose(a, b, atol=1e-12)
    w = np.array([spatial_frequencies_for_rx(scenario, STATE, m) for m in range(2)])
    assert 0.0 <= orientation_for_position(STATE.p_ris, w, scenario) < 2 * np.pi


def test_orientation_single_receiver_returns_minimizer():
    scenario = make_reference(anchors=[[-3.0, 5.0, -1.0]])
    w = np.array([spatial_frequencies_for_rx(scenario, STATE, 0)])
    alpha_hat = orientation_for_position(STATE.p_ris, w, scenario)
    from rislocate.estimator import _omega_vs_alpha

    cost_hat = np.sum((_omega_vs_alpha(STATE.p_ris, scenario, np.array([alpha_hat]))[0] - w) ** 2)
    grid = np.arange(0, 2 * np.pi, 1e-3)
    cost_grid = np.sum((_omega_vs_alpha(STATE.p_ris, scenario, grid) - w[None]) ** 2, axis=(1, 2))
    assert cost_hat <= cost_grid.min() + 1e-12


def _select_setup(tx_power_dbm=30.0):
    scenario, gamma = reference_setup(tx_power_dbm)
    obs = simulate_observations(scenario, STATE, gamma, np.random.default_rng(9), sigma2=0.0)
    taus = path_delays(scenario, STATE)
    y_rs = [collapse_subcarriers(remove_delay(obs.y[m], taus[m], scenario)) for m in range(2)]
    w_hats = np.array([spatial_frequencies_for_rx(scenario, STATE, m) for m in range(2)])
    return scenario, gamma, taus, y_rs, w_hats


def test_select_position_singleton():
    scenario, gamma, _, y_rs, w_hats = _select_setup()
    cands = CandidateSet(points=STATE.p_ris[None, :], residuals=np.zeros(1))
    est = select_position(cands, y_rs, w_hats, gamma, scenario)
    assert np.array_equal(est.p_ris, STATE.p_ris)
    assert est.cost < 1e-10
    assert est.stage == "coarse"


def test_select_position_noise_free_manifold():
    scenario, gamma, taus, y_rs, w_hats = _select_setup()
    cands = spheroid_candidates(taus, scenario)
    est = select_position(cands, y_rs, w_hats, gamma, scenario)
    assert np.linalg.norm(est.p_ris - STATE.p_ris) < 0.05
    assert abs(wrap(est.alpha - STATE.alpha)) < np.deg2rad(1.0)


def test_select_position_argmin_contract():
    scenario, gamma, taus, y_rs, w_hats = _select_setup()
    config = EstimatorConfig(mesh_azimuth=100, mesh_polar=50)
    cands = spheroid_candidates(taus, scenario, config)
    est = select_position(cands, y_rs, w_hats, gamma, scenario, config)
    from rislocate.estimator import _candidate_cost

    norm = sum(float(np.linalg.norm(y) ** 2) for y in y_rs)
    for p in cands.points:
        alpha = orientation_for_position(p, w_hats, scenario, config)
        cost, _ = _candidate_cost(p, alpha, y_rs, gamma, scenario, False)
        assert est.cost <= cost / norm + 1e-15


# ---------------------------------------------------------------------------
# refinement and full pipeline
# ---------------------------------------------------------------------------

def test_mle_refine_stationary_at_truth():
    scenario, gamma = reference_setup()
    obs = simulate_observations(scenario, STATE, gamma, np.random.default_rng(10), sigma2=0.0)
    rng = np.random.default_rng(10)
    gains = np.array([channel_gain(scenario, STATE, m, rng) for m in range(2)])
    from rislocate.estimator import StateEstimate

    init = StateEstimate(p_ris=STATE.p_ris, alpha=STATE.alpha, gains=gains, stage="coarse", cost=0.0)
    refined = mle_refine(obs, init, scenario, gamma)
    assert np.linalg.norm(refined.p_ris - STATE.p_ris) < 1e-6
    assert abs(wrap(refined.alpha - STATE.alpha)) < 1e-8
    assert refined.cost < 1e-12
    assert refined.stage == "refined"


def test_mle_refine_never_worse_than_init():
    from rislocate.estimator import mle_cost

    scenario, gamma = reference_setup(tx_power_dbm=24.0)
    solver = OmegaSolver(gamma, scenario)
    for t in range(5):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=77, spawn_key=(t,)))
        obs = simulate_observations(scenario, STATE, gamma, rng)
        res = estimate_state(obs, gamma, scenario, omega_solver=solver)
        init_cost = mle_cost(obs, res.coarse.p_ris, res.coarse.alpha, scenario, gamma)
        assert res.refined.cost <= init_cost + 1e-12


def test_pipeline_noise_free_reference():
    scenario, gamma = reference_setup()
    obs = simulate_observations(scenario, STATE, gamma, np.random.default_rng(11), sigma2=0.0)
    res = estimate_state(obs, gamma, scenario)
    taus = path_delays(scenario, STATE)
    ws = np.array([spatial_frequencies_for_rx(scenario, STATE, m) for m in range(2)])
    for m in range(2):
        assert abs(res.toa[m].tau - taus[m]) < 2e-12
        assert np.max(np.abs(res.omega[m] - ws[m])) < 1e-6
    assert np.linalg.norm(res.coarse.p_ris - STATE.p_ris) < 0.05
    assert np.linalg.norm(res.refined.p_ris - STATE.p_ris) < 1e-3
    assert abs(wrap(res.refined.alpha - STATE.alpha)) < np.deg2rad(0.01)


def test_pipeline_random_scenarios_noise_free():
    rng = np.random.default_rng(13)
    count = 0
    while count < 50:
        scenario, state = random_geometry(rng)
        gamma = random_phase_profile(scenario.n_elements, scenario.n_symbols, rng)
        obs = simulate_observations(scenario, state, gamma, rng, sigma2=0.0)
        res = estimate_state(obs, gamma, scenario)
        assert np.linalg.norm(res.coarse.p_ris - state.p_ris) < 0.05
        assert np.linalg.norm(res.refined.p_ris - state.p_ris) < 1e-3
        assert abs(wrap(res.refined.alpha - state.alpha)) < np.deg2rad(0.01)
        count += 1
