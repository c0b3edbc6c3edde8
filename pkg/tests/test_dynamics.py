from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from ensq.dynamics import (
    CONSTANT,
    RK4,
    RK45,
    IntegrationError,
    IntegratorConfig,
    MasterEquation,
    NonConvergenceError,
    TimeProfile,
    evolve,
    fidelity,
    liouvillian_apply,
    liouvillian_superoperator,
    partial_trace,
    propagate,
    steady_state,
)
from ensq.hilbert import (
    DensityMatrix,
    SpaceMismatchError,
    StateVector,
    annihilation,
    coherent_state,
    fock_projector,
    fock_state,
    make_space,
    number,
    parity_operator,
)
from ensq.manifold import random_density_matrix
from ensq.model import Truncations, build_adiabatic, build_full, build_qubit, ModelParams


def _decay(dim=4, kappa=1.0):
    space = make_space([("a", dim)])
    return MasterEquation(space, (), ((kappa, annihilation(space, "a")),))


def test_liouvillian_one_photon_decay():
    me = _decay(3)
    drho = liouvillian_apply(me, fock_state(me.space, {"a": 1}).to_dm())
    np.testing.assert_allclose(drho, np.diag([1.0, -1.0, 0.0]), atol=1e-15)


def test_liouvillian_vacuum_and_dark_states():
    me = _decay(3)
    assert np.abs(liouvillian_apply(me, fock_state(me.space).to_dm())).max() == 0
    two_atom = build_adiabatic(ModelParams(), Truncations(dim_b=4))
    one = fock_state(two_atom.space, {"b": 1}).to_dm()
    assert np.abs(liouvillian_apply(two_atom, one)).max() == 0


def test_liouvillian_is_traceless_and_hermitian(rng):
    p = ModelParams(Omega_d=1e-4)
    me = build_full(p, Truncations(2, 3, 3))
    rho = DensityMatrix(me.space, random_density_matrix(me.space.dim, rng))
    out = liouvillian_apply(me, rho)
    assert abs(np.trace(out)) < 1e-12
    assert np.abs(out - out.conj().T).max() < 1e-15


def test_generator_matches_superoperator_with_time_dependence(rng):
    space = make_space([("a", 3), ("b", 2)])
    a, b = annihilation(space, "a"), annihilation(space, "b")
    prof = TimeProfile(0.3 - 0.1j, 0.7)
    me = MasterEquation(
        space,
        ((number(space, "a") + 0.2 * (a.dag() @ b + a @ b.dag()), CONSTANT), (a, prof), (a.dag(), prof.conj())),
        ((0.4, a), (0.1, b @ a)),
    )
    batch = np.array([random_density_matrix(6, rng) for _ in range(3)])
    for t in (0.0, 1.3):
        L = liouvillian_superoperator(me, t)
        out = me.generator(t, batch)
        for k in range(3):
            np.testing.assert_allclose(out[k], (L @ batch[k].ravel()).reshape(6, 6), atol=1e-14)


def test_unpaired_time_dependent_term_rejected():
    space = make_space([("a", 3)])
    a = annihilation(space, "a")
    with pytest.raises(ValueError, match="partner"):
        MasterEquation(space, ((a, TimeProfile(1.0, 0.5)),))
    with pytest.raises(ValueError, match="Hermitian"):
        MasterEquation(space, ((a, CONSTANT),))
    with pytest.raises(ValueError, match="rate"):
        MasterEquation(space, (), ((-1.0, a),))
    other = make_space([("b", 3)])
    with pytest.raises(SpaceMismatchError):
        MasterEquation(space, ((number(other, "b"), CONSTANT),))


def test_exponential_decay_law():
    me = _decay(4, 1.0)
    traj = evolve(me, fock_state(me.space, {"a": 1}), [0.0, 1.0], RK4, {"n": number(me.space, "a")})
    assert traj.observables["n"][-1].real == pytest.approx(math.exp(-1.0), abs=1e-6)


def test_rabi_formula():
    space = make_space([("q", 2)])
    sm = annihilation(space, "q")
    omega = 0.7
    me = MasterEquation(space, ((omega * (sm + sm.dag()), CONSTANT),))
    t = np.linspace(0, 5, 11)
    traj = evolve(me, fock_state(space), t, RK4, {"p1": fock_projector(space, "q", 1)})
    np.testing.assert_allclose(traj.observables["p1"].real, np.sin(omega * t) ** 2, atol=1e-6)


def test_two_excitation_rate_equation(params, derived):
    me = build_adiabatic(params, Truncations(dim_b=4))
    t = np.linspace(0, 3 / derived.kappa_2at, 7)
    traj = evolve(me, fock_state(me.space, {"b": 2}), t, RK4, {"p0": fock_projector(me.space, "b", 0)})
    np.testing.assert_allclose(traj.observables["p0"].real, 1 - np.exp(-2 * derived.kappa_2at * t), atol=1e-6)


def test_parity_conserved_under_two_excitation_loss(params, derived):
    me = build_adiabatic(params, Truncations(dim_b=10))
    psi = coherent_state(me.space, "b", 1.0)
    t = np.linspace(0, 20 / derived.kappa_2at, 21)
    traj = evolve(me, psi, t, RK45, {"P": parity_operator(me.space, "b")})
    assert np.abs(traj.observables["P"] - traj.observables["P"][0]).max() <= 1e-8
    assert traj.trace_error.max() <= 1e-8
    assert traj.hermiticity_error.max() <= 1e-10
    assert traj.min_eigenvalue.min() >= -1e-6


def test_integrators_agree():
    p = ModelParams(Omega_d=2e-5)
    me = build_full(p, Truncations(2, 2, 3))
    psi = fock_state(me.space, {"b": 2})
    t = np.linspace(0, 2000.0, 5)
    n = number(me.space, "b")
    a = evolve(me, psi, t, RK4, {"n": n}).observables["n"]
    b = evolve(me, psi, t, RK45, {"n": n}).observables["n"]
    np.testing.assert_allclose(a, b, atol=1e-7)


def test_rk4_fourth_order_convergence():
    space = make_space([("a", 10)])
    me = MasterEquation(space, ((number(space, "a"), CONSTANT),), ((0.5, annihilation(space, "a")),))
    rho0 = coherent_state(space, "a", 1.0).to_dm().matrix
    T = 2.0
    ref = (sla.expm(liouvillian_superoperator(me) * T) @ rho0.ravel()).reshape(10, 10)
    errs = []
    for dt in (0.1, 0.05):
        out = {}
        propagate(me.generator, rho0, np.array([0.0, T]), IntegratorConfig(dt=dt), 1.0, lambda i, t, y: out.__setitem__(i, y.copy()))
        errs.append(np.abs(out[1] - ref).max())
    assert 13 <= errs[0] / errs[1] <= 19


def test_evolve_records_snapshots_and_steps():
    me = _decay(3)
    traj = evolve(me, fock_state(me.space, {"a": 2}), [0.0, 0.5, 1.0], RK4, keep_states=True)
    assert len(traj.states) == 3 and traj.steps > 0
    assert traj.final_state.trace == pytest.approx(1.0, abs=1e-12)


def test_evolve_rejects_bad_grid_and_state():
    me = _decay(3)
    with pytest.raises(ValueError, match="increasing"):
        evolve(me, fock_state(me.space), [0.0, 1.0, 0.5])
    with pytest.raises(TypeError):
        evolve(me, np.eye(3) / 3, [0.0, 1.0])
    with pytest.raises(SpaceMismatchError):
        evolve(me, fock_state(make_space([("a", 4)])), [0.0, 1.0])
    with pytest.raises(ValueError, match="method"):
        IntegratorConfig(method="euler")


def test_nan_aborts_with_diagnostic():
    def gen(t, y):
        return np.full_like(y, np.nan)

    with pytest.raises(IntegrationError, match="non-finite"):
        propagate(gen, np.eye(2) / 2, np.array([0.0, 1.0]), IntegratorConfig(dt=0.5), 1.0, lambda *a: None)
    with pytest.raises(IntegrationError):
        propagate(gen, np.eye(2) / 2, np.array([0.0, 1.0]), RK45, 1.0, lambda *a: None)


def test_step_budget():
    me = _decay(3)
    with pytest.raises(IntegrationError, match="budget"):
        evolve(me, fock_state(me.space), [0.0, 10.0], IntegratorConfig(max_steps=5))


def test_steady_state_examples(params):
    me = build_adiabatic(params, Truncations(dim_b=5))
    ss = steady_state(me, fock_state(me.space, {"b": 3}))
    assert ss.matrix[1, 1].real == pytest.approx(1.0, abs=1e-9)
    ss0 = steady_state(me, fock_state(me.space))
    assert ss0.matrix[0, 0].real == pytest.approx(1.0, abs=1e-12)
    q = build_qubit(ModelParams(Omega_d=0.0, kappa_p=1e-3))
    q = MasterEquation(q.space, (), ((1e-3, annihilation(q.space, "q")),))
    ssq = steady_state(q, fock_state(q.space, {"q": 1}))
    assert ssq.matrix[0, 0].real == pytest.approx(1.0, abs=1e-9)
    assert np.abs(liouvillian_apply(me, ss)).max() <= 1e-9


def test_steady_state_needs_dissipation_and_time():
    space = make_space([("a", 3)])
    with pytest.raises(ValueError):
        steady_state(MasterEquation(space, ((number(space, "a"), CONSTANT),)), fock_state(space))
    me = _decay(3, 1.0)
    with pytest.raises(NonConvergenceError):
        steady_state(me, fock_state(space, {"a": 2}), t_max=2.0)


def test_fidelity_examples():
    space = make_space([("b", 12)])
    zero = fock_state(space).to_dm()
    one = fock_state(space, {"b": 1}).to_dm()
    coh = coherent_state(space, "b", 1.0).to_dm()
    assert fidelity(zero, zero) == pytest.approx(1.0, abs=1e-12)
    assert fidelity(zero, one) == pytest.approx(0.0, abs=1e-12)
    assert fidelity(zero, coh) == pytest.approx(math.exp(-1.0), abs=1e-6)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rank=st.integers(1, 4))
def test_fidelity_symmetric_and_bounded(seed, rank):
    rng = np.random.default_rng(seed)
    space = make_space([("b", 4)])
    a = DensityMatrix(space, random_density_matrix(4, rng, rank), check=False)
    b = DensityMatrix(space, random_density_matrix(4, rng), check=False)
    fab, fba = fidelity(a, b), fidelity(b, a)
    assert 0.0 <= fab <= 1.0
    assert fab == pytest.approx(fba, abs=1e-7)


def test_fidelity_rejects_non_psd():
    space = make_space([("b", 2)])
    bad = DensityMatrix(space, np.diag([1.5, -0.5]), check=False)
    with pytest.raises(ValueError, match="semidefinite"):
        fidelity(bad, bad)


def test_partial_trace_examples(rng):
    space = make_space([("p", 2), ("b", 3)])
    rho_b = random_density_matrix(3, rng)
    full = np.kron(np.diag([1.0, 0.0]), rho_b)
    red = partial_trace(DensityMatrix(space, full), ["b"])
    np.testing.assert_allclose(red.matrix, rho_b, atol=1e-15)
    assert red.trace == pytest.approx(1.0, abs=1e-10)
    pair = make_space([("x", 2), ("y", 2)])
    bell = StateVector(pair, [1, 0, 0, 1], normalize=True).to_dm()
    np.testing.assert_allclose(partial_trace(bell, ["x"]).matrix, np.eye(2) / 2, atol=1e-15)
    with pytest.raises(KeyError):
        partial_trace(bell, ["z"])


def test_time_profile():
    prof = TimeProfile(2.0, 0.5)
    assert prof(0.0) == 2.0
    assert prof(math.pi) == pytest.approx(2.0j)
    assert prof.conj()(1.0) == pytest.approx(np.conj(prof(1.0)))
    assert CONSTANT.is_constant
