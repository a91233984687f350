"""Forward model: steering vectors, array responses, gains and noisy observations.

The baseband observation at receiver m is an (n_subcarriers x n_symbols)
complex matrix with a rank-1 delay/profile structure,

    Y_m = g_m * sqrt(P) * d(tau_m) (Gamma b(w_m))^T + W_m,

where d is the per-subcarrier delay steering vector, b the planar-array
response at the spatial frequencies w_m, Gamma the (n_symbols x K) phase
profile with one row per transmission, P the per-subcarrier symbol power and
W_m circularly-symmetric white Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import BackIlluminationError
from .geometry import (
    RisState,
    Scenario,
    angles_from_direction,
    direction_vectors,
    path_delay,
    spatial_frequencies_for_rx,
)


@dataclass(frozen=True)
class ObservationSet:
    """Per-receiver observation matrices plus the noise variance that made them."""

    y: tuple[np.ndarray, ...]
    sigma2: float
    rng_seed: int | None = None

    @property
    def n_rx(self) -> int:
        return len(self.y)


def delay_steering(tau: float, n_subcarriers: int, subcarrier_spacing: float) -> np.ndarray:
    """Unit-modulus per-subcarrier phase ramp exp(-j 2 pi n df tau), n = 0..N-1."""
    n = np.arange(n_subcarriers)
    return np.exp(-2j * np.pi * n * subcarrier_spacing * tau)


def ris_response(w, k_rows: int, k_cols: int, spacing: float, wavelength: float) -> np.ndarray:
    """Planar-array response b = a0(w0) kron a1(w1), unit-modulus length K.

    Element indices are uncentered, 0..k_rows-1 over rows and 0..k_cols-1 over
    columns; a constant index offset only shifts the (unknown) gain phase.
    """
    w0, w1 = w
    coef = -2j * np.pi * spacing / wavelength
    a0 = np.exp(coef * np.arange(k_rows) * w0)
    a1 = np.exp(coef * np.arange(k_cols) * w1)
    return np.kron(a0, a1)


def ris_response_derivs(w, k_rows: int, k_cols: int, spacing: float, wavelength: float):
    """Partials of :func:`ris_response` with respect to (w0, w1)."""
    b = ris_response(w, k_rows, k_cols, spacing, wavelength)
    coef = -2j * np.pi * spacing / wavelength
    rows = np.kron(np.arange(k_rows), np.ones(k_cols))
    cols = np.kron(np.ones(k_rows), np.arange(k_cols))
    return coef * rows * b, coef * cols * b


def gain_amplitude(scenario: Scenario, state: RisState, m: int) -> float:
    """Deterministic gain amplitude from the bistatic path-loss model.

    Scales with wavelength^2 / (16 pi d_tx d_m) and an elevation-dependent
    element pattern (cos_el_aod * cos_el_aoa)^0.285. Requires the surface to
    be illuminated from its front half-space on both sides.
    """
    a_tr, a_rm = direction_vectors(scenario, state, m)
    phi = angles_from_direction(a_tr)
    theta = angles_from_direction(a_rm)
    cos_prod = np.cos(theta.el) * np.cos(phi.el)
    if np.cos(theta.el) <= 0 or np.cos(phi.el) <= 0:
        raise BackIlluminationError(f"RIS back-illuminated for receiver {m}")
    d_tx = np.linalg.norm(scenario.p_tx - state.p_ris)
    d_m = np.linalg.norm(scenario.anchors[m] - state.p_ris)
    return float(scenario.wavelength**2 * cos_prod**0.285 / (16 * np.pi * d_tx * d_m))


def channel_gain(scenario: Scenario, state: RisState, m: int, rng: np.random.Generator) -> complex:
    """Complex gain rho_m * exp(j phase) with the phase uniform on [0, 2*pi)."""
    rho = gain_amplitude(scenario, state, m)
    return rho * np.exp(1j * rng.uniform(0.0, 2 * np.pi))


def random_phase_profile(k: int, t: int, rng: np.random.Generator) -> np.ndarray:
    """(t x k) unit-modulus profile with i.i.d. uniform phases, one row per symbol."""
    return np.exp(1j * rng.uniform(0.0, 2 * np.pi, size=(t, k)))


def noise_variance(noise_psd: float, noise_factor: float, subcarrier_spacing: float) -> float:
    """Per complex post-FFT sample noise power: PSD * noise factor * bin width."""
    if noise_psd < 0 or noise_factor <= 0 or subcarrier_spacing <= 0:
        raise ValueError("noise parameters must be positive (noise_psd may be zero)")
    return noise_psd * noise_factor * subcarrier_spacing


def model_matrix(
    tau: float,
    w,
    gain: complex,
    gamma: np.ndarray,
    scenario: Scenario,
) -> np.ndarray:
    """Noise-free observation for explicit channel parameters (tau, w, gain)."""
    d = delay_steering(tau, scenario.n_subcarriers, scenario.subcarrier_spacing)
    b = ris_response(w, scenario.k_rows, scenario.k_cols, scenario.element_spacing, scenario.wavelength)
    return gain * np.sqrt(scenario.subcarrier_power) * np.outer(d, gamma @ b)


def noiseless_observation(
    scenario: Scenario,
    state: RisState,
    gamma: np.ndarray,
    m: int,
    gain: complex | None = None,
) -> np.ndarray:
    """Noise-free Y_m for the true geometry; ``gain`` defaults to the real
    amplitude from :func:`gain_amplitude` (zero phase)."""
    if gain is None:
        gain = gain_amplitude(scenario, state, m)
    tau = path_delay(scenario, state, m)
    w = spatial_frequencies_for_rx(scenario, state, m)
    return model_matrix(tau, w, gain, gamma, scenario)


def simulate_observations(
    scenario: Scenario,
    state: RisState,
    gamma: np.ndarray,
    rng: np.random.Generator,
    sigma2: float | None = None,
    rng_seed: int | None = None,
) -> ObservationSet:
    """Draw gain phases and additive noise for all receivers.

    The same ``sigma2`` applies at every receiver. Gain phases for all M
    receivers are drawn before any noise so that the two stay aligned across
    runs with the same generator state. ``sigma2=0`` returns the exact
    noise-free observations.
    """
    if sigma2 is None:
        sigma2 = noise_variance(scenario.noise_psd, scenario.noise_factor, scenario.subcarrier_spacing)
    gains = [channel_gain(scenario, state, m, rng) for m in range(scenario.n_rx)]
    shape = (scenario.n_subcarriers, scenario.n_symbols)
    ys = []
    for m in range(scenario.n_rx):
        y = noiseless_observation(scenario, state, gamma, m, gain=gains[m])
        if sigma2 > 0:
            noise = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
            y = y + np.sqrt(sigma2 / 2) * noise
        ys.append(y)
    return ObservationSet(y=tuple(ys), sigma2=float(sigma2), rng_seed=rng_seed)
