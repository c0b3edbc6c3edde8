from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.linalg as sla
from scipy.integrate import solve_ivp

from ensq.dynamics import RK45, MasterEquation, evolve, liouvillian_superoperator
from ensq.hilbert import TruncationError, fock_state, make_space, number
from ensq.manifold import coherent_dm
from ensq.model import ModelParams, RegimeWarning, Truncations, build_adiabatic, build_qubit, build_time_averaged, derive
from ensq.effective import (
    BudgetError,
    ValidityError,
    default_truncations,
    effective_operator_reduction,
    eliminate_pump,
    fit_rabi,
    population,
    rabi_experiment,
    stabilization_experiment,
)


def _ta(chi_ratio=5.0, dim_b=6):
    d = derive(ModelParams())
    p = ModelParams(kappa_p=chi_ratio * d.chi)
    return p, build_time_averaged(p, Truncations(3, 4, dim_b))


def test_eliminate_pump_rate_law():
    p, me = _ta()
    red = eliminate_pump(me)
    assert red.kappa_2at * red.kappa_p == pytest.approx(4 * red.chi**2, rel=1e-12)
    assert red.kappa_2at == pytest.approx(0.8 * red.chi, rel=1e-12)
    # from |0_p, 3_b> only |1_p, 1_b> is reachable before pump loss lands in the dark |0_p, 1_b>
    G, k = math.sqrt(6) * red.chi, red.kappa_p
    sol = solve_ivp(lambda t, y: [-1j * G * y[1], -1j * G * y[0] - 0.5 * k * y[1]], (0, 10 / red.kappa_2at),
                    [1 + 0j, 0j], max_step=0.05 / G, rtol=1e-10, atol=1e-12)
    assert red.max_pump_population == pytest.approx(float((np.abs(sol.y[1]) ** 2).max()), abs=2e-3)
    assert red.max_pump_population < 0.3
    ref = build_adiabatic(p, Truncations(dim_b=6))
    np.testing.assert_allclose(red.me.c_terms[0][1].dense, ref.c_terms[0][1].dense)
    assert red.me.c_terms[0][0] == pytest.approx(ref.c_terms[0][0], rel=1e-12)


def test_eliminate_pump_guards():
    _, me = _ta(2.0)
    with pytest.raises(ValidityError):
        eliminate_pump(me)
    _, me = _ta(4.0)
    with pytest.warns(RegimeWarning):
        eliminate_pump(me, probe_points=3)
    lossless = MasterEquation(me.space, me.h_terms, ())
    with pytest.raises(ValidityError, match="kappa_p = 0"):
        eliminate_pump(lossless)
    with pytest.raises(ValueError):
        eliminate_pump(build_adiabatic(ModelParams(), Truncations(dim_b=4)))


def test_large_pump_loss_limit_converges():
    d = derive(ModelParams())
    diffs = []
    for ratio in (20.0, 80.0):
        p = ModelParams(kappa_p=ratio * d.chi)
        k2 = 4 * d.chi / ratio
        t = np.linspace(0, 3 / k2, 31)
        ta = build_time_averaged(p, Truncations(3, 4, 6))
        ad = build_adiabatic(p, Truncations(dim_b=6))
        n_ta = evolve(ta, fock_state(ta.space, {"b": 3}), t, RK45, {"n": number(ta.space, "b")}).observables["n"].real
        n_ad = evolve(ad, fock_state(ad.space, {"b": 3}), t, RK45, {"n": number(ad.space, "b")}).observables["n"].real
        diffs.append(np.abs(n_ta - n_ad).max())
    assert diffs[1] < diffs[0] / 2.5


def test_effective_reduction_two_excitation_instance():
    k2, om, th = 0.3, 0.02, 0.4
    h_nh = np.diag([0, 0, -1j * k2])
    v = np.zeros((3, 3), complex)
    v[2, 1] = math.sqrt(2) * om * np.exp(1j * th)
    pg = np.diag([1.0, 1.0, 0.0])
    L = np.zeros((3, 3), complex)
    L[0, 2] = math.sqrt(2)
    # s^2 restricted to {|0>, |1>, |2>}
    eff = effective_operator_reduction(h_nh, v, pg, [(k2, L)])
    np.testing.assert_allclose(eff.h_eff, 0, atol=1e-15)
    (rate, op), = eff.lindblad
    assert rate == pytest.approx(4 * om**2 / k2, rel=1e-12)
    assert abs(op[0, 1]) == pytest.approx(1.0)
    assert np.count_nonzero(np.abs(op) > 1e-14) == 1


def test_effective_reduction_trivial_and_detuned():
    pg = np.diag([1.0, 0.0])
    eff = effective_operator_reduction(np.diag([0, 1 - 0.5j]), np.zeros((2, 2)), pg, [(1.0, np.array([[0, 1], [0, 0]]))])
    assert np.all(eff.h_eff == 0) and eff.lindblad == []
    D, k, om = 0.7, 0.2, 0.01
    v = np.array([[0, 0], [om, 0]], complex)
    eff = effective_operator_reduction(np.diag([0, D - 0.5j * k]), v, pg)
    assert eff.h_eff[0, 0].real == pytest.approx(-(om**2) * D / (D**2 + k**2 / 4), rel=1e-12)
    herm = effective_operator_reduction(np.diag([0, D]), v, pg)
    assert herm.h_eff[0, 0].real == pytest.approx(-(om**2) / D, rel=1e-12)
    with pytest.raises(np.linalg.LinAlgError):
        effective_operator_reduction(np.diag([0, 0]), v, pg)
    with pytest.raises(ValueError):
        effective_operator_reduction(np.zeros((2, 2)), v, np.eye(2))


def test_population_examples():
    space = make_space([("b", 3)])
    one = fock_state(space, {"b": 1}).to_dm()
    assert population(one, 1) == 1
    coh = coherent_dm(1.0, 10)
    assert population(coh, 0) == pytest.approx(math.exp(-1), abs=1e-5)
    assert sum(population(coh, n) for n in range(10)) == pytest.approx(1.0)
    with pytest.raises(IndexError):
        population(one, 3)


def test_adiabatic_stabilization_converges(params, derived):
    t_end_chi = 20 * derived.kappa_2at / derived.chi
    comp = stabilization_experiment(params, 1.0, ("adiabatic",), t_end_chi, 41)
    eta = comp.series["adiabatic"]["eta"]
    assert eta[0] > 0.1
    assert eta[-1] <= 1e-3
    assert np.abs(comp.series["adiabatic"]["parity"] - comp.series["adiabatic"]["parity"][0]).max() < 1e-8
    assert comp.time_unit == "chi t"


def test_frame_alignment_parity_undriven(params):
    comp = stabilization_experiment(params, 0.5, ("timeaveraged", "adiabatic"), 1.0, 11)
    pa = comp.series["adiabatic"]["parity"]
    pt = comp.series["timeaveraged"]["parity"]
    np.testing.assert_allclose(pt, pa, atol=1e-8)
    for tier in comp.tiers:
        assert comp.diagnostics[tier]["max_trace_error"] <= 1e-8


def test_stabilization_guards(params):
    with pytest.raises(ValueError, match="qubit"):
        stabilization_experiment(params, 1.0, ("qubit",))
    with pytest.raises(BudgetError):
        stabilization_experiment(params, 3.0, ("full",))
    with pytest.raises(BudgetError, match="horizon"):
        stabilization_experiment(params, 1.0, ("full",), t_end_chi=50.0, truncations=Truncations(2, 2, 10))
    with pytest.raises(TruncationError):
        stabilization_experiment(params, 2.0, ("adiabatic",), truncations=Truncations(3, 4, 10))


def test_default_truncations_hold_coherent_state():
    for a in (0.5, 1.0, 2.0, 3.0):
        t = default_truncations("adiabatic", a)
        assert t.dim_b >= 8
    assert default_truncations("timeaveraged", 3.0).dim_p > default_truncations("timeaveraged", 1.0).dim_p


def _bloch_p1(omega, gamma, t):
    q = build_qubit(ModelParams(Omega_d=omega))
    me = MasterEquation(q.space, q.h_terms, ((gamma, q.c_terms[0][1]),))
    L = liouvillian_superoperator(me)
    rho0 = np.diag([1.0, 0.0]).astype(complex).ravel()
    return np.array([(sla.expm(L * s) @ rho0).reshape(2, 2)[1, 1].real for s in t])


def test_qubit_tier_matches_bloch_solution(params, derived):
    comp = rabi_experiment(params, ("qubit",), 60.0, 121, fit=False)
    om = params.resolved().Omega_d
    ref = _bloch_p1(om, derived.gamma, comp.times / derived.kappa_2at)
    np.testing.assert_allclose(comp.series["qubit"]["P1"], ref, atol=1e-6)
    first = comp.times[np.argmax(comp.series["qubit"]["P1"][:40])]
    assert first == pytest.approx(math.pi / (2 * om / derived.kappa_2at), rel=0.1)


def test_rabi_fit_doubling_law(derived):
    fits = []
    for ratio in (0.05, 0.1):
        p = ModelParams(Omega_d=ratio * derived.kappa_2at)
        comp = rabi_experiment(p, ("qubit",), 400.0, 4001)
        fits.append(comp.fits["qubit"])
    assert fits[1]["omega_over_k2at"] / fits[0]["omega_over_k2at"] == pytest.approx(2.0, rel=0.03)
    assert fits[1]["gamma_over_k2at"] / fits[0]["gamma_over_k2at"] == pytest.approx(4.0, rel=0.1)
    assert fits[1]["gamma_over_k2at"] == pytest.approx(0.04, rel=0.15)


def test_fit_rabi_on_synthetic_envelope():
    t = np.linspace(0, 300, 6001)
    gamma, om = 0.02, 0.5
    p1 = 0.5 - 0.5 * np.exp(-0.75 * gamma * t) * np.cos(om * t)
    f = fit_rabi(t, p1)
    assert f["gamma"] == pytest.approx(gamma, rel=0.02)
    assert f["omega"] == pytest.approx(om, rel=0.01)
    with pytest.raises(ValidityError):
        fit_rabi(t[:50], p1[:50])


def test_rabi_strong_drive_warns(derived):
    with pytest.warns(RegimeWarning, match="weak-drive"):
        rabi_experiment(ModelParams(Omega_d=0.5 * derived.kappa_2at), ("qubit",), 5.0, 11, fit=False)


def test_undriven_dark_state_divergence(derived):
    # s^2 annihilates |1>, so the Adiabatic tier keeps P1 = 1 while the driven-rate qubit would decay
    me = build_adiabatic(ModelParams(Omega_d=0.0), Truncations(dim_b=4))
    t = np.linspace(0, 50 / derived.kappa_2at, 6)
    traj = evolve(me, fock_state(me.space, {"b": 1}), t, RK45, {"n": number(me.space, "b")})
    np.testing.assert_allclose(traj.observables["n"].real, 1.0, atol=1e-12)
