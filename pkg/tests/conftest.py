import numpy as np
import pytest

from rislocate.geometry import RisState, Scenario


def make_reference(tx_power_dbm: float = 20.0, **overrides) -> Scenario:
    """Reference scenario used throughout the tests (power defaults to 20 dBm)."""
    fields = dict(
        p_tx=[0.0, 0.0, 0.0],
        anchors=[[-3.0, 5.0, -1.0], [3.0, -3.0, 0.0]],
        wavelength=0.01,
        element_spacing=0.0025,
        k_rows=17,
        k_cols=17,
        n_subcarriers=128,
        subcarrier_spacing=120e3,
        n_symbols=100,
        tx_power=10 ** (tx_power_dbm / 10) * 1e-3,
        noise_psd=10 ** (-174 / 10) * 1e-3,
        noise_factor=10 ** (5 / 10),
        ifft_size=4096,
        c=3e8,
    )
    fields.update(overrides)
    return Scenario(**fields)


def make_small(**overrides) -> Scenario:
    """Reduced-size scenario for derivative and property tests."""
    fields = dict(k_rows=3, k_cols=3, n_subcarriers=16, n_symbols=8, ifft_size=64)
    fields.update(overrides)
    return make_reference(**fields)


@pytest.fixture
def reference_scenario() -> Scenario:
    return make_reference()


@pytest.fixture
def reference_state() -> RisState:
    return RisState(p_ris=[4.0, 1.0, -4.0], alpha=np.pi / 6)


@pytest.fixture
def small_scenario() -> Scenario:
    return make_small()


def random_geometry(rng: np.random.Generator, n_rx: int = 2):
    """Random nondegenerate scenario/state pair at the reference scale.

    Keeps every node in the upper half space of the surface so the gain model
    stays valid, enforces minimum pairwise separations, and caps the node
    distances at the reference scenario's scale (its longest leg is 8.6 m).
    """
    while True:
        p_tx = rng.uniform([-5, -5, -1], [5, 5, 1])
        anchors = rng.uniform([-5, -5, -1], [5, 5, 1], size=(n_rx, 3))
        p_ris = rng.uniform([-5, -5, -6], [5, 5, -3])
        alpha = rng.uniform(0, 2 * np.pi)
        nodes = np.vstack([p_tx[None], anchors])
        d_cross = np.linalg.norm(nodes[:, None] - nodes[None, :], axis=-1)
        if d_cross[np.triu_indices(len(nodes), 1)].min() < 1.0:
            continue
        d_ris = np.linalg.norm(nodes - p_ris, axis=1)
        if d_ris.min() < 2.0 or d_ris.max() > 9.0:
            continue
        # stay away from frame poles (direction straight up)
        units = (nodes - p_ris) / np.linalg.norm(nodes - p_ris, axis=1, keepdims=True)
        if np.abs(units[:, 2]).max() > 0.95:
            continue
        return make_reference(anchors=anchors, p_tx=p_tx), RisState(p_ris=p_ris, alpha=alpha)
