"""Tier reductions and the stabilization / Rabi experiments comparing tiers.

Every experiment reports the ensemble mode on its own, in the frame where the
ideal stationary qubit is time independent.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit
from scipy.signal import find_peaks

from .dynamics import RK4, RK45, IntegratorConfig, MasterEquation, Trajectory, evolve, fidelity, partial_trace
from .hilbert import (
    COHERENT_TAIL_TOL,
    DensityMatrix,
    HilbertSpace,
    TruncationError,
    annihilation,
    coherent_amplitudes,
    fock_state,
    number,
    parity_operator,
    poisson_tail,
    product_state,
)
from .manifold import coherent_coeffs
from .model import (
    ModelParams,
    ModelTier,
    RegimeWarning,
    Truncations,
    build_drive,
    build_tier,
    default_dim_b,
    derive,
    tier_space,
)
from .parallel import run_jobs


class ValidityError(ValueError):
    """Parameters outside the range where a reduction or experiment is meaningful."""


class BudgetError(RuntimeError):
    """Requested run exceeds the configured size or duration budget."""


# Full-tier guards: Hilbert-space dimension and horizon in units of 1/chi
FULL_DIM_BUDGET = 150
FULL_HORIZON_CHI = 10.0

KAPPA_P_HARD_MIN = 3.0  # in units of chi
KAPPA_P_WARN_MIN = 5.0


def population(rho, n: int) -> float:
    """<n|rho|n> of a single-mode state."""
    m = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho)
    if not 0 <= n < m.shape[0]:
        raise IndexError(f"level {n} outside dimension {m.shape[0]}")
    return float(m[n, n].real)


# ---------------------------------------------------------------- pump elimination


@dataclass(frozen=True)
class PumpElimination:
    me: MasterEquation
    chi: float
    kappa_p: float
    kappa_2at: float
    max_pump_population: float


def _pump_parameters(me: MasterEquation) -> tuple[float, float]:
    space = me.space
    if space.labels != ("p", "b"):
        raise ValueError("expected the pump-plus-ensemble equation with modes ('p', 'b')")
    if space.mode_dim("b") < 3:
        raise ValueError("ensemble truncation must hold two excitations")
    h = me.static_hamiltonian()
    chi = float(abs(h.element(space.basis_index({"p": 1, "b": 0}), space.basis_index({"p": 0, "b": 2})))) / math.sqrt(2.0)
    ap = annihilation(space, "p").sparse
    kp = 0.0
    for rate, op in me.c_terms:
        if abs(op.sparse - ap).max() < 1e-12:
            kp += rate
        else:
            raise ValueError("unexpected collapse channel for pump elimination")
    return chi, kp


def eliminate_pump(
    me_time_averaged: MasterEquation,
    probe_t_end: float | None = None,
    probe_points: int = 201,
    config: IntegratorConfig | None = None,
) -> PumpElimination:
    """Replace the lossy pump by two-excitation loss at kappa_2at = 4 chi^2 / kappa_p.

    The pump population reached from |0_p, 3_b> over ``probe_t_end``
    (default 10 / kappa_2at) is reported as a validity measure.
    """
    chi, kp = _pump_parameters(me_time_averaged)
    if kp == 0:
        raise ValidityError("kappa_p = 0: the pump cannot be eliminated")
    if chi > 0 and kp < KAPPA_P_HARD_MIN * chi:
        raise ValidityError(f"kappa_p = {kp / chi:.3g} chi is below the {KAPPA_P_HARD_MIN:g} chi limit")
    if chi > 0 and kp < KAPPA_P_WARN_MIN * chi:
        warnings.warn(f"kappa_p = {kp / chi:.3g} chi: pump elimination is marginal", RegimeWarning, stacklevel=2)
    k2 = 4.0 * chi * chi / kp
    space = me_time_averaged.space
    b_space = HilbertSpace((space.modes[1],))
    reduced = MasterEquation(b_space, (), ((k2, annihilation(b_space, "b") @ annihilation(b_space, "b")),))
    max_pop = 0.0
    if k2 > 0:
        t_end = probe_t_end if probe_t_end is not None else 10.0 / k2
        start = fock_state(space, {"p": 0, "b": min(3, space.mode_dim("b") - 1)})
        traj = evolve(
            me_time_averaged,
            start,
            np.linspace(0.0, t_end, probe_points),
            config,
            {"n_p": number(space, "p")},
        )
        max_pop = float(traj.observables["n_p"].real.max())
    return PumpElimination(reduced, chi, kp, k2, max_pop)


# ---------------------------------------------------------------- effective operators


@dataclass
class EffectiveOperators:
    h_eff: np.ndarray
    lindblad: list[tuple[float, np.ndarray]]  # (rate, unit-norm operator)


def effective_operator_reduction(
    h_nh: np.ndarray,
    v: np.ndarray,
    ground_projector: np.ndarray,
    decays=(),
    ground_hamiltonian: np.ndarray | None = None,
    cond_max: float = 1e12,
) -> EffectiveOperators:
    """Eliminate weakly excited levels reached through the perturbation ``v``.

    h_eff = -1/2 v^dag [H^-1 + (H^-1)^dag] v (+ ``ground_hamiltonian``) and
    L_k,eff = L_k H^-1 v, with H the non-Hermitian Hamiltonian ``h_nh`` inverted
    on the excited subspace. ``decays`` holds (rate, L) pairs; returned
    operators carry their strength in the rate and have unit operator norm.
    """
    h_nh = np.asarray(h_nh, dtype=complex)
    v = np.asarray(v, dtype=complex)
    pg = np.asarray(ground_projector, dtype=complex)
    d = h_nh.shape[0]
    pe = np.eye(d) - pg
    w, vecs = np.linalg.eigh(0.5 * (pe + pe.conj().T))
    basis = vecs[:, w > 0.5]
    h_sub = basis.conj().T @ h_nh @ basis
    if basis.shape[1] == 0:
        raise ValueError("no excited subspace to eliminate")
    if np.linalg.cond(h_sub) > cond_max:
        raise np.linalg.LinAlgError("non-Hermitian Hamiltonian is singular on the excited subspace")
    hinv = basis @ np.linalg.inv(h_sub) @ basis.conj().T
    h_eff = -0.5 * v.conj().T @ (hinv + hinv.conj().T) @ v
    if ground_hamiltonian is not None:
        h_eff = h_eff + np.asarray(ground_hamiltonian, dtype=complex)
    ops = []
    for rate, L in decays:
        op = math.sqrt(rate) * np.asarray(L, dtype=complex) @ hinv @ v
        norm = float(np.linalg.norm(op, 2))
        if norm > 1e-14:
            ops.append((norm * norm, op / norm))
    return EffectiveOperators(pg @ h_eff @ pg, ops)


# ---------------------------------------------------------------- tier comparisons


@dataclass
class TierComparison:
    times: np.ndarray
    time_unit: str
    tiers: tuple[str, ...]
    series: dict[str, dict[str, np.ndarray]]
    params: ModelParams
    diagnostics: dict[str, dict[str, float]] = field(default_factory=dict)
    fits: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.times)
        for tier, cols in self.series.items():
            for name, s in cols.items():
                if len(s) != n:
                    raise ValueError(f"{tier}/{name} has {len(s)} samples for {n} times")


def _diagnostics(traj: Trajectory) -> dict[str, float]:
    return {
        "max_trace_error": float(traj.trace_error.max()),
        "max_hermiticity_error": float(traj.hermiticity_error.max()),
        "min_eigenvalue": float(np.nanmin(traj.min_eigenvalue)),
        "steps": float(traj.steps),
    }


def _reduce_b(m: np.ndarray, space: HilbertSpace) -> np.ndarray:
    if space.labels == ("b",):
        return m
    return partial_trace(DensityMatrix(space, m, check=False), ["b"]).matrix


def _tier_initial_state(tier: ModelTier, space: HilbertSpace, alpha: complex):
    factors = []
    for mode in space.modes:
        if mode.label == "b":
            amps = coherent_amplitudes(alpha, mode.dim)
            factors.append(amps / np.linalg.norm(amps))
        else:
            vac = np.zeros(mode.dim, dtype=complex)
            vac[0] = 1.0
            factors.append(vac)
    return product_state(space, factors)


def default_truncations(tier: ModelTier | str, alpha: complex) -> Truncations:
    tier = ModelTier.parse(tier)
    dim_b = default_dim_b(alpha)
    dim_p = 3
    if tier is ModelTier.TIME_AVERAGED:
        # early pair emission populates the pump more strongly at large |alpha|
        dim_p = 3 + 2 * max(0, math.ceil(abs(alpha) - 1e-9) - 1)
    return Truncations(dim_p=dim_p, dim_s=4, dim_b=dim_b)


def default_config(tier: ModelTier | str) -> IntegratorConfig:
    # the Full tier is stiff (Delta_q ~ 3000 chi); error control beats a fixed step
    return RK45 if ModelTier.parse(tier) is ModelTier.FULL else RK4


def _check_full_budget(space: HilbertSpace, t_end_chi: float):
    if space.dim > FULL_DIM_BUDGET:
        raise BudgetError(
            f"Full tier needs dimension {space.dim} > budget {FULL_DIM_BUDGET}; use the timeaveraged tier for this amplitude"
        )
    if t_end_chi > FULL_HORIZON_CHI:
        raise BudgetError(
            f"Full tier horizon chi t = {t_end_chi:g} exceeds {FULL_HORIZON_CHI:g}; use the timeaveraged tier"
        )


def _stabilize_one(tier_name: str, params: ModelParams, alpha: complex, t_grid: np.ndarray, truncations, config):
    tier = ModelTier.parse(tier_name)
    p = params.validate()
    d = derive(p)
    me = build_tier(tier, p, truncations)
    space = me.space
    dim_b = space.mode_dim("b")
    psi0 = _tier_initial_state(tier, space, alpha)
    target = coherent_coeffs(alpha).density_matrix(dim_b)
    par = np.diag(parity_operator(target.space, "b").dense).real
    frame = np.exp(-1j * d.delta_q_shift * np.arange(dim_b)) if tier is ModelTier.FULL else None

    def reduced(m, t):
        r = _reduce_b(m, space)
        if frame is not None:
            v = frame**t
            r = (v[:, None] * r) * v.conj()[None, :]
        return r

    def eta(m, t):
        return 1.0 - fidelity(DensityMatrix(target.space, reduced(m, t), check=False), target)

    def parity(m, t):
        return complex(np.sum(par * np.diag(_reduce_b(m, space)).real))

    traj = evolve(me, psi0, t_grid, config or default_config(tier), {"eta": eta, "parity": parity})
    cols = {
        "eta": traj.observables["eta"].real,
        "trace_err": traj.trace_error,
        "parity": traj.observables["parity"].real,
    }
    return cols, _diagnostics(traj)


def stabilization_experiment(
    params: ModelParams,
    alpha: complex = 1.0,
    tiers=("timeaveraged", "adiabatic"),
    t_end_chi: float = 2.0,
    points: int = 101,
    truncations: dict | Truncations | None = None,
    config: IntegratorConfig | None = None,
    threads: int = 1,
) -> TierComparison:
    """State error eta(t) = 1 - F(ensemble state, ideal stationary qubit) per tier.

    Every tier starts from vacuum pump and signal with the ensemble in |alpha>.
    Times are in units of 1/chi.
    """
    p = params.validate()
    d = derive(p)
    tier_list = [ModelTier.parse(t) for t in tiers]
    if ModelTier.QUBIT in tier_list:
        raise ValueError("the qubit tier has no ensemble state to stabilize")
    t_grid = np.linspace(0.0, t_end_chi, points) / d.chi
    jobs = []
    for tier in tier_list:
        if isinstance(truncations, dict):
            trunc = truncations.get(tier.value) or default_truncations(tier, alpha)
        else:
            trunc = truncations or default_truncations(tier, alpha)
        if tier is ModelTier.FULL:
            _check_full_budget(tier_space(tier, trunc), t_end_chi)
        if trunc.dim_b < default_dim_b(0.0) or _coherent_tail_exceeds(alpha, trunc.dim_b):
            raise TruncationError(f"dim_b = {trunc.dim_b} cannot hold a coherent state of amplitude {alpha}")
        jobs.append((tier.value, p, alpha, t_grid, trunc, config))
    results = run_jobs(_stabilize_one, jobs, threads)
    names = tuple(t.value for t in tier_list)
    return TierComparison(
        times=t_grid * d.chi,
        time_unit="chi t",
        tiers=names,
        series={n: r[0] for n, r in zip(names, results)},
        params=p,
        diagnostics={n: r[1] for n, r in zip(names, results)},
    )


def _coherent_tail_exceeds(alpha: complex, dim: int) -> bool:
    return poisson_tail(abs(alpha) ** 2, dim) > COHERENT_TAIL_TOL


# ---------------------------------------------------------------- Rabi


RABI_DIM_B = 6
DRIVE_WARN_RATIO = 0.3


def _rabi_one(tier_name: str, params: ModelParams, t_grid: np.ndarray, dim_b: int, config):
    tier = ModelTier.parse(tier_name)
    p = params.validate()
    if tier is ModelTier.QUBIT:
        me = build_tier(tier, p)
    else:
        trunc = Truncations(3, 4, dim_b) if tier is not ModelTier.FULL else p.truncations
        me = build_tier(tier, p, trunc)
        me = me.with_terms(build_drive(p, tier, me.space))
    space = me.space

    def reduced_pop(n):
        if len(space.modes) == 1:
            return lambda m, t: complex(m[n, n])
        return lambda m, t: complex(_reduce_b(m, space)[n, n])

    traj = evolve(me, fock_state(space), t_grid, config or default_config(tier), {"P0": reduced_pop(0), "P1": reduced_pop(1)})
    cols = {"P0": traj.observables["P0"].real, "P1": traj.observables["P1"].real}
    return cols, _diagnostics(traj)


def _envelope(t, a, gamma, c):
    return c + a * np.exp(-0.75 * gamma * t)


def fit_rabi(times: np.ndarray, p1: np.ndarray) -> dict[str, float]:
    """Oscillation angular frequency from peak spacing and decay rate from the maxima envelope.

    For a resonantly driven two-level system decaying at gamma the population
    maxima approach 1/2 as e^{-3 gamma t / 4}.
    """
    times = np.asarray(times, float)
    p1 = np.asarray(p1, float)
    peaks, _ = find_peaks(p1)
    if len(peaks) < 3:
        raise ValidityError(f"only {len(peaks)} population maxima; lengthen the run")
    tp, vp = [], []
    dt = times[1] - times[0]
    for i in peaks:
        if 0 < i < len(p1) - 1:
            y0, y1, y2 = p1[i - 1], p1[i], p1[i + 1]
            denom = y0 - 2 * y1 + y2
            shift = 0.5 * (y0 - y2) / denom if denom != 0 else 0.0
            tp.append(times[i] + shift * dt)
            vp.append(y1 - 0.25 * (y0 - y2) * shift)
    tp, vp = np.array(tp), np.array(vp)
    omega = 2.0 * math.pi / float(np.mean(np.diff(tp)))
    span = tp[-1] - tp[0]
    guess = (vp[0] - 0.5, 1.0 / max(span, 1e-300), 0.5)
    (a, gamma, c), _ = curve_fit(_envelope, tp, vp, p0=guess, maxfev=20000)
    return {"omega": omega, "gamma": float(gamma), "amplitude": float(a), "offset": float(c), "peaks": float(len(tp))}


def rabi_experiment(
    params: ModelParams,
    tiers=("adiabatic", "qubit"),
    t_end_k2at: float = 200.0,
    points: int = 2001,
    dim_b: int = RABI_DIM_B,
    config: IntegratorConfig | None = None,
    threads: int = 1,
    fit: bool = True,
) -> TierComparison:
    """P0(t), P1(t) of the driven ensemble from |0>, per tier; times in units of 1/kappa_2at."""
    p = params.validate()
    d = derive(p)
    if p.Omega_d > DRIVE_WARN_RATIO * d.kappa_2at:
        warnings.warn(
            f"Omega_d = {p.Omega_d / d.kappa_2at:.3g} kappa_2at: weak-drive reduction is not reliable",
            RegimeWarning,
            stacklevel=2,
        )
    tier_list = [ModelTier.parse(t) for t in tiers]
    if ModelTier.FULL in tier_list:
        _check_full_budget(tier_space(ModelTier.FULL, p.truncations), t_end_k2at * d.chi / d.kappa_2at)
    t_grid = np.linspace(0.0, t_end_k2at, points) / d.kappa_2at
    jobs = [(t.value, p, t_grid, dim_b, config) for t in tier_list]
    results = run_jobs(_rabi_one, jobs, threads)
    names = tuple(t.value for t in tier_list)
    comp = TierComparison(
        times=t_grid * d.kappa_2at,
        time_unit="kappa_2at t",
        tiers=names,
        series={n: r[0] for n, r in zip(names, results)},
        params=p,
        diagnostics={n: r[1] for n, r in zip(names, results)},
    )
    if fit and p.Omega_d > 0:
        for n in names:
            f = fit_rabi(comp.times, comp.series[n]["P1"])
            comp.fits[n] = {"omega_over_k2at": f["omega"], "gamma_over_k2at": f["gamma"]}
    return comp
