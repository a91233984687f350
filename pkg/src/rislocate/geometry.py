"""Geometric kernel: directions, angles, spatial frequencies and path delays.

All positions are metres in a global frame, angles are radians. The surface
frame is obtained from the global frame by a rotation about the z axis, so a
single orientation angle describes the surface attitude.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .exceptions import DegenerateGeometryError

SPEED_OF_LIGHT = 299792458.0

_MIN_SEPARATION = 1e-9


class AnglePair(NamedTuple):
    """Elevation in [0, pi] and azimuth in (-pi, pi]."""

    el: float
    az: float


class SpatialFreqs(NamedTuple):
    """Direction-cosine sums observed by the planar array; each in [-2, 2]."""

    w0: float
    w1: float


@dataclass(frozen=True)
class Scenario:
    """Immutable system description: node positions and radio constants.

    ``tx_power`` is the total transmit power in watts, spread uniformly over
    the subcarriers (see :meth:`subcarrier_power`). ``noise_psd`` and
    ``noise_factor`` are linear (W/Hz and unitless); dB conversions happen at
    the file/CLI boundary only.
    """

    p_tx: np.ndarray
    anchors: np.ndarray
    wavelength: float
    element_spacing: float
    k_rows: int
    k_cols: int
    n_subcarriers: int
    subcarrier_spacing: float
    n_symbols: int
    tx_power: float
    noise_psd: float
    noise_factor: float
    ifft_size: int
    c: float = SPEED_OF_LIGHT

    def __post_init__(self):
        object.__setattr__(self, "p_tx", np.asarray(self.p_tx, dtype=float))
        object.__setattr__(self, "anchors", np.atleast_2d(np.asarray(self.anchors, dtype=float)))
        if self.p_tx.shape != (3,):
            raise ValueError("p_tx must be a 3-vector")
        if self.anchors.ndim != 2 or self.anchors.shape[1] != 3 or self.anchors.shape[0] < 1:
            raise ValueError("anchors must be an (M, 3) array with M >= 1")
        if not (0 < self.element_spacing <= self.wavelength / 2):
            raise ValueError("element spacing must satisfy 0 < spacing <= wavelength/2")
        for name in ("k_rows", "k_cols", "n_subcarriers", "n_symbols", "ifft_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.ifft_size < self.n_subcarriers:
            raise ValueError("ifft_size must be >= n_subcarriers")
        if self.subcarrier_spacing <= 0 or self.wavelength <= 0 or self.c <= 0:
            raise ValueError("spacing, wavelength and c must be positive")
        if self.tx_power <= 0 or self.noise_psd < 0 or self.noise_factor <= 0:
            raise ValueError("tx_power and noise_factor must be positive, noise_psd >= 0")
        nodes = np.vstack([self.p_tx[None, :], self.anchors])
        d = np.linalg.norm(nodes[:, None, :] - nodes[None, :, :], axis=-1)
        if np.any(d[np.triu_indices(len(nodes), k=1)] < _MIN_SEPARATION):
            raise ValueError("transmitter and receiver positions must be pairwise distinct")

    @property
    def n_rx(self) -> int:
        return self.anchors.shape[0]

    @property
    def n_elements(self) -> int:
        return self.k_rows * self.k_cols

    @property
    def subcarrier_power(self) -> float:
        """Per-subcarrier symbol power: total power split across subcarriers."""
        return self.tx_power / self.n_subcarriers

    @property
    def bandwidth(self) -> float:
        return self.n_subcarriers * self.subcarrier_spacing


@dataclass(frozen=True)
class RisState:
    """The unknowns: surface position and orientation about z, in [0, 2*pi)."""

    p_ris: np.ndarray
    alpha: float

    def __post_init__(self):
        object.__setattr__(self, "p_ris", np.asarray(self.p_ris, dtype=float))
        if self.p_ris.shape != (3,):
            raise ValueError("p_ris must be a 3-vector")
        object.__setattr__(self, "alpha", float(np.mod(self.alpha, 2 * np.pi)))


def rotation_matrix(alpha: float) -> np.ndarray:
    """Rotation mapping global coordinates into the surface frame.

    Orthonormal with determinant +1; the third row and column are e_z, so the
    orientation has a single degree of freedom.
    """
    c, s = np.cos(alpha), np.sin(alpha)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def _unit(v: np.ndarray, context: str) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < _MIN_SEPARATION:
        raise DegenerateGeometryError(f"degenerate geometry: {context}")
    return v / n


def direction_vectors(scenario: Scenario, state: RisState, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit directions from the surface to the TX and to receiver ``m`` (0-based),
    expressed in the surface local frame."""
    if not 0 <= m < scenario.n_rx:
        raise IndexError(f"receiver index {m} out of range for M={scenario.n_rx}")
    rot = rotation_matrix(state.alpha)
    a_tr = rot @ _unit(scenario.p_tx - state.p_ris, "surface coincides with TX")
    a_rm = rot @ _unit(scenario.anchors[m] - state.p_ris, f"surface coincides with RX {m}")
    return a_tr, a_rm


def angles_from_direction(a: np.ndarray) -> AnglePair:
    """Elevation/azimuth of a unit vector: el = acos(a3), az = atan2(a2, a1).

    At the poles (a3 = +/-1) the azimuth is unobservable and atan2(0, 0) = 0
    is returned.
    """
    a = np.asarray(a, dtype=float)
    if abs(np.linalg.norm(a) - 1.0) > 1e-9:
        raise ValueError("direction vector must be unit norm")
    return AnglePair(el=float(np.arccos(np.clip(a[2], -1.0, 1.0))), az=float(np.arctan2(a[1], a[0])))


def direction_from_angles(angles: AnglePair) -> np.ndarray:
    """Inverse of :func:`angles_from_direction`."""
    se = np.sin(angles.el)
    return np.array([se * np.cos(angles.az), se * np.sin(angles.az), np.cos(angles.el)])


def spatial_frequencies(theta_m: AnglePair, phi: AnglePair) -> SpatialFreqs:
    """Sums of direction cosines of the departure (theta) and arrival (phi) angles.

    Equivalently the first two components of the two local-frame unit
    directions added together, so each lies in [-2, 2].
    """
    w0 = np.sin(phi.el) * np.cos(phi.az) + np.sin(theta_m.el) * np.cos(theta_m.az)
    w1 = np.sin(phi.el) * np.sin(phi.az) + np.sin(theta_m.el) * np.sin(theta_m.az)
    return SpatialFreqs(w0=float(w0), w1=float(w1))


def spatial_frequencies_for_rx(scenario: Scenario, state: RisState, m: int) -> SpatialFreqs:
    """Spatial frequencies at receiver ``m`` for the given state."""
    a_tr, a_rm = direction_vectors(scenario, state, m)
    return spatial_frequencies(angles_from_direction(a_rm), angles_from_direction(a_tr))


def path_delay(scenario: Scenario, state: RisState, m: int) -> float:
    """Propagation delay of the TX -> surface -> RX ``m`` path in seconds.

    Independent of the orientation angle.
    """
    if not 0 <= m < scenario.n_rx:
        raise IndexError(f"receiver index {m} out of range for M={scenario.n_rx}")
    d_tx = np.linalg.norm(scenario.p_tx - state.p_ris)
    d_m = np.linalg.norm(scenario.anchors[m] - state.p_ris)
    if min(d_tx, d_m) < _MIN_SEPARATION:
        raise DegenerateGeometryError("surface coincides with a terminal")
    return float((d_tx + d_m) / scenario.c)


def path_delays(scenario: Scenario, state: RisState) -> np.ndarray:
    """All M path delays as an array."""
    return np.array([path_delay(scenario, state, m) for m in range(scenario.n_rx)])
