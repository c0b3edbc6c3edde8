from __future__ import annotations

import math

import numpy as np
import pytest

from ensq.hilbert import Operator, make_space
from ensq.model import ModelParams, Truncations, derive
from ensq.spectrum import (
    NoCrossingError,
    avoided_crossing,
    eigenenergies,
    lab_hamiltonian,
    scan_pump_frequency,
    scan_space,
)


@pytest.fixture(scope="module")
def scan():
    return scan_pump_frequency(ModelParams(), 1.96, 2.06, 101)


def test_eigenenergies_examples():
    np.testing.assert_allclose(eigenenergies(np.diag([3.0, 1.0, 2.0])), [1.0, 2.0, 3.0])
    np.testing.assert_allclose(eigenenergies(np.array([[0.0, 1.0], [1.0, 0.0]])), [-1.0, 1.0])
    with pytest.raises(ValueError, match="Hermitian"):
        eigenenergies(np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        eigenenergies(np.eye(3), k=4)


def test_lab_hamiltonian_conserves_excitations():
    space = scan_space()
    H = lab_hamiltonian(ModelParams(), 2.0, space)
    n_exc = Operator(space, np.diag([
        2 * p + s + b
        for p in range(space.mode_dim("p"))
        for s in range(space.mode_dim("s"))
        for b in range(space.mode_dim("b"))
    ]).astype(complex))
    assert H.is_hermitian(1e-12)
    assert np.abs((H @ n_exc - n_exc @ H).dense).max() < 1e-14


def test_decoupled_spectrum_is_bare_energies():
    p = ModelParams(g_col=0.0, J=0.0, Delta_q=0.6, kappa_p=1e-3)
    space = make_space([("p", 2), ("s", 2), ("b", 2)])
    w = eigenenergies(lab_hamiltonian(p, 2.01, space))
    bare = sorted(mp * 2.01 + ms * 1.6 + mb * 1.0 for mp in (0, 1) for ms in (0, 1) for mb in (0, 1))
    np.testing.assert_allclose(w, bare, atol=1e-12)


def test_scan_shape_and_tracking(scan):
    assert scan.levels.shape == (101, 6)
    assert np.all(np.diff(scan.levels, axis=1) >= -1e-12)
    np.testing.assert_allclose(np.sort(scan.tracked, axis=1), scan.levels, atol=1e-12)
    np.testing.assert_allclose(scan.levels[:, 0], 0.0, atol=0)


def test_avoided_crossing_gap_and_location(scan):
    d = derive(ModelParams())
    c = avoided_crossing(scan)
    assert c.gap_over_chi == pytest.approx(2 * math.sqrt(2), rel=0.05)
    assert abs(c.omega_p_star - (2.0 + d.delta)) <= 0.002
    assert c.predicted_location == pytest.approx(2.0 + d.delta)
    # at the minimum both levels are roughly even mixtures of the pump photon and the pair
    pump_lo, pair_lo, pump_hi, pair_hi = c.hybridization
    for x in c.hybridization:
        assert 0.2 < x < 0.8
    assert pump_lo + pump_hi == pytest.approx(1.0, abs=0.2)


def test_gap_scales_linearly_with_J():
    base = ModelParams(J=0.03)
    c1 = avoided_crossing(scan_pump_frequency(base, 1.96, 2.06, 81))
    c2 = avoided_crossing(scan_pump_frequency(ModelParams(J=0.015), 1.96, 2.06, 81))
    assert c1.gap / c2.gap == pytest.approx(2.0, rel=0.1)


def test_crossing_outside_window_raises():
    with pytest.raises(NoCrossingError):
        avoided_crossing(scan_pump_frequency(ModelParams(), 2.03, 2.06, 31))


def test_scan_argument_checks():
    with pytest.raises(ValueError):
        scan_pump_frequency(ModelParams(), 2.0, 1.9)
    with pytest.raises(ValueError):
        scan_pump_frequency(ModelParams(), k=3)
    with pytest.raises(ValueError):
        scan_pump_frequency(ModelParams(), k=10_000)
    with pytest.raises(ValueError):
        avoided_crossing(scan_pump_frequency(ModelParams(), points=5), (4, 10))


def test_larger_truncation_leaves_crossing_unchanged():
    small = avoided_crossing(scan_pump_frequency(ModelParams(), 1.98, 2.04, 61))
    big = avoided_crossing(scan_pump_frequency(ModelParams(), 1.98, 2.04, 61, truncations=Truncations(3, 5, 5)))
    assert big.gap == pytest.approx(small.gap, rel=1e-3)
    assert big.omega_p_star == pytest.approx(small.omega_p_star, abs=1e-4)
