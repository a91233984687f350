"""Fisher information, nuisance elimination, state transformation and bounds.

The channel parameter vector per receiver is (tau, w0, w1, rho, phase); the
full vector stacks each kind across receivers, so the 5M x 5M information
matrix is indexed [tau_1..tau_M, w0_1..w0_M, w1_1..w1_M, rho_1..rho_M,
phase_1..phase_M]. The state vector is (p_ris, alpha).

Matrix inversions use symmetric eigendecompositions with a relative rank
tolerance; rank deficiency raises instead of silently pseudo-inverting, since
identifiability failures are meaningful results here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateGeometryError, SingularInformationError
from .geometry import (
    RisState,
    Scenario,
    path_delay,
    rotation_matrix,
    spatial_frequencies_for_rx,
)
from .signals import (
    delay_steering,
    gain_amplitude,
    noise_variance,
    ris_response,
    ris_response_derivs,
)

_RANK_RTOL = 1e-12
_POLE_TOL = 1e-12


@dataclass(frozen=True)
class ChannelFim:
    """Information matrix over the stacked channel parameters."""

    matrix: np.ndarray
    n_rx: int


@dataclass(frozen=True)
class CrbReport:
    """Bounds on channel parameters per receiver and on the state.

    ``teb`` is in seconds, ``web0``/``web1`` dimensionless, ``peb`` metres and
    ``oeb`` radians. The information matrices are retained for diagnostics.
    """

    teb: np.ndarray
    web0: np.ndarray
    web1: np.ndarray
    peb: float
    oeb: float
    channel_fim: ChannelFim
    state_fim: np.ndarray

    def to_dict(self) -> dict:
        return {
            "teb_s": [float(v) for v in self.teb],
            "web0": [float(v) for v in self.web0],
            "web1": [float(v) for v in self.web1],
            "peb_m": float(self.peb),
            "oeb_rad": float(self.oeb),
        }


def _invert_psd(mat: np.ndarray, context: str) -> np.ndarray:
    """Invert a symmetric PSD matrix with mixed parameter units.

    Jacobi scaling maps the matrix to unit diagonal before the eigendecomposition
    so the rank tolerance measures correlation structure rather than unit
    mismatch (delays in seconds sit ~16 orders below dimensionless entries).
    """
    mat = 0.5 * (mat + mat.T)
    diag = np.diag(mat)
    if np.any(diag <= 0):
        raise SingularInformationError(context)
    scale = 1.0 / np.sqrt(diag)
    scaled = mat * np.outer(scale, scale)
    eigval, eigvec = np.linalg.eigh(scaled)
    if eigval.min() <= _RANK_RTOL * max(float(eigval.max()), np.finfo(float).tiny):
        raise SingularInformationError(context)
    inv_scaled = (eigvec / eigval) @ eigvec.T
    return inv_scaled * np.outer(scale, scale)


def fim_channel(scenario: Scenario, state: RisState, gamma: np.ndarray) -> ChannelFim:
    """Assemble the 5M x 5M channel-parameter information matrix.

    Gain amplitudes follow the deterministic path-loss model; the result does
    not depend on the gain phases, so those are taken as zero. The matrix is
    block separable across receivers because each observation depends only on
    its own receiver's parameters.
    """
    sigma2 = noise_variance(scenario.noise_psd, scenario.noise_factor, scenario.subcarrier_spacing)
    if sigma2 == 0:
        raise ValueError("zero noise variance: information is unbounded")
    m_rx = scenario.n_rx
    n_c = scenario.n_subcarriers
    amp = np.sqrt(scenario.subcarrier_power)
    full = np.zeros((5 * m_rx, 5 * m_rx))
    for m in range(m_rx):
        tau = path_delay(scenario, state, m)
        w = spatial_frequencies_for_rx(scenario, state, m)
        rho = gain_amplitude(scenario, state, m)
        gain = rho  # zero phase; the information is phase invariant

        d = delay_steering(tau, n_c, scenario.subcarrier_spacing)
        d_dot = -2j * np.pi * scenario.subcarrier_spacing * np.arange(n_c) * d
        b = ris_response(w, scenario.k_rows, scenario.k_cols, scenario.element_spacing, scenario.wavelength)
        b0, b1 = ris_response_derivs(
            w, scenario.k_rows, scenario.k_cols, scenario.element_spacing, scenario.wavelength
        )
        c = gamma @ b
        c0 = gamma @ b0
        c1 = gamma @ b1

        deriv = np.empty((scenario.n_symbols, n_c, 5), dtype=complex)
        deriv[:, :, 0] = gain * amp * np.outer(c, d_dot)
        deriv[:, :, 1] = gain * amp * np.outer(c0, d)
        deriv[:, :, 2] = gain * amp * np.outer(c1, d)
        deriv[:, :, 3] = amp * np.outer(c, d)  # d/d rho at zero phase
        deriv[:, :, 4] = 1j * gain * amp * np.outer(c, d)
        block = (2.0 / sigma2) * np.real(np.einsum("tna,tnb->ab", deriv.conj(), deriv))

        idx = np.array([m, m_rx + m, 2 * m_rx + m, 3 * m_rx + m, 4 * m_rx + m])
        full[np.ix_(idx, idx)] = block
    return ChannelFim(matrix=full, n_rx=m_rx)


def teb_web(fim: ChannelFim) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-receiver bounds on delay and the two spatial frequencies.

    Square roots of the full-inverse diagonal at the delay and frequency
    positions, with all other channel parameters treated as unknown.
    """
    inv = _invert_psd(fim.matrix, "unidentifiable channel parameterization")
    m = fim.n_rx
    diag = np.diag(inv)
    return (
        np.sqrt(diag[0:m]),
        np.sqrt(diag[m : 2 * m]),
        np.sqrt(diag[2 * m : 3 * m]),
    )


def efim_eta(fim: ChannelFim) -> np.ndarray:
    """Equivalent information for (tau, w0, w1) after eliminating (rho, phase).

    Schur complement computed by block solve rather than a full inverse.
    """
    m = fim.n_rx
    k = 3 * m
    a = fim.matrix[:k, :k]
    b = fim.matrix[:k, k:]
    c = fim.matrix[k:, k:]
    c_inv_bt = _invert_psd(c, "unidentifiable channel parameterization") @ b.T
    out = a - b @ c_inv_bt
    return 0.5 * (out + out.T)


def jacobian_T(scenario: Scenario, state: RisState) -> np.ndarray:
    """Derivatives of the 3M channel observables with respect to the state.

    Rows 0..M-1 hold the delay gradients (zero in the orientation column);
    the next two M-row bands hold the spatial frequency gradients obtained by
    the chain rule through the unit directions and their angles. Raises when
    either direction is at a frame pole, where the azimuth derivative is
    singular.
    """
    m_rx = scenario.n_rx
    p = state.p_ris
    rot = rotation_matrix(state.alpha)
    r1, r2, r3 = rot[0], rot[1], rot[2]
    sin_a, cos_a = np.sin(state.alpha), np.cos(state.alpha)
    r1_dot = np.array([-sin_a, cos_a, 0.0])
    r2_dot = np.array([-cos_a, -sin_a, 0.0])

    def unit_and_grad(target: np.ndarray):
        v = target - p
        dist = np.linalg.norm(v)
        if dist < 1e-9:
            raise DegenerateGeometryError("surface coincides with a terminal")
        u = v / dist
        return u, (np.outer(u, u) - np.eye(3)) / dist

    def angle_grads(u: np.ndarray):
        f = r1 @ u
        g = r2 @ u
        h = r3 @ u
        denom = f * f + g * g
        if denom < _POLE_TOL:
            raise DegenerateGeometryError("azimuth derivative singular at frame pole")
        el = np.arccos(np.clip(h, -1.0, 1.0))
        az = np.arctan2(g, f)
        daz_du = (f * r2 - g * r1) / denom
        del_du = -r3 / np.sqrt(1.0 - h * h)
        daz_dalpha = (f * (r2_dot @ u) - g * (r1_dot @ u)) / denom
        return el, az, daz_du, del_du, daz_dalpha

    u_a, du_a = unit_and_grad(scenario.p_tx)
    phi_el, phi_az, daz_du_a, del_du_a, daz_da_a = angle_grads(u_a)

    out = np.zeros((3 * m_rx, 4))
    for m in range(m_rx):
        u_d, du_d = unit_and_grad(scenario.anchors[m])
        th_el, th_az, daz_du_d, del_du_d, daz_da_d = angle_grads(u_d)

        out[m, 0:3] = -(u_a + u_d) / scenario.c

        # omega partials with respect to the four angles
        dw0 = {
            "phi_el": np.cos(phi_el) * np.cos(phi_az),
            "phi_az": -np.sin(phi_el) * np.sin(phi_az),
            "th_el": np.cos(th_el) * np.cos(th_az),
            "th_az": -np.sin(th_el) * np.sin(th_az),
        }
        dw1 = {
            "phi_el": np.cos(phi_el) * np.sin(phi_az),
            "phi_az": np.sin(phi_el) * np.cos(phi_az),
            "th_el": np.cos(th_el) * np.sin(th_az),
            "th_az": np.sin(th_el) * np.cos(th_az),
        }
        for row, dw in ((m_rx + m, dw0), (2 * m_rx + m, dw1)):
            out[row, 0:3] = (dw["phi_az"] * daz_du_a + dw["phi_el"] * del_du_a) @ du_a + (
                dw["th_az"] * daz_du_d + dw["th_el"] * del_du_d
            ) @ du_d
            out[row, 3] = dw["phi_az"] * daz_da_a + dw["th_az"] * daz_da_d
    return out


def state_fim(scenario: Scenario, state: RisState, gamma: np.ndarray) -> tuple[np.ndarray, ChannelFim]:
    """4x4 information for (p_ris, alpha) via the observable-to-state Jacobian."""
    fim = fim_channel(scenario, state, gamma)
    j_eta = efim_eta(fim)
    jac = jacobian_T(scenario, state)
    mat = jac.T @ j_eta @ jac
    return 0.5 * (mat + mat.T), fim


def state_bounds(scenario: Scenario, state: RisState, gamma: np.ndarray) -> CrbReport:
    """Position and orientation error bounds plus the per-receiver bounds."""
    j_state, fim = state_fim(scenario, state, gamma)
    inv = _invert_psd(j_state, "state unidentifiable for this geometry")
    teb, web0, web1 = teb_web(fim)
    return CrbReport(
        teb=teb,
        web0=web0,
        web1=web1,
        peb=float(np.sqrt(np.trace(inv[:3, :3]))),
        oeb=float(np.sqrt(inv[3, 3])),
        channel_fim=fim,
        state_fim=j_state,
    )


def toa_only_peb(scenario: Scenario, state: RisState, gamma: np.ndarray) -> float:
    """Position bound for a delay-only estimator (orientation unobservable).

    Uses the equivalent information of the delays with every other channel
    parameter as nuisance, mapped through the delay rows of the Jacobian.
    Singular for M = 2 because two range sums cannot fix three coordinates.
    """
    fim = fim_channel(scenario, state, gamma)
    inv = _invert_psd(fim.matrix, "unidentifiable channel parameterization")
    m = fim.n_rx
    j_tau = _invert_psd(inv[:m, :m], "unidentifiable delay parameterization")
    t_tau = jacobian_T(scenario, state)[:m, 0:3]
    j_pos = t_tau.T @ j_tau @ t_tau
    inv_pos = _invert_psd(j_pos, "state unidentifiable for this geometry")
    return float(np.sqrt(np.trace(inv_pos)))
