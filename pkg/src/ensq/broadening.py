"""Inhomogeneous broadening of an N-atom ensemble under two-excitation loss.

Each atom is a truncated bosonic mode b_j with detuning delta_j. Two-excitation
loss acts on the symmetric mode s = sum_j b_j / sqrt(N). With protection the
symmetric mode is shifted by delta_q, which detunes it from the dark modes
that the disorder couples it to.

The atoms live in an occupation-number basis with a per-atom cutoff and an
optional cap on the total excitation number. Both the Hamiltonian and the
loss never raise the total, so the capped space is closed under the dynamics.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .dynamics import CONSTANT, RK45, IntegratorConfig, MasterEquation, evolve
from .effective import BudgetError
from .hilbert import HilbertSpace, Operator, StateVector, coherent_amplitudes, make_space, poisson_tail
from .manifold import coherent_coeffs
from .model import ModelParams, derive
from .parallel import run_jobs

MAX_DIM = 4096
ATOM_DIM = 4
MAX_EXCITATIONS = 3
TAIL_WARN = 0.05



def sample_detunings(n: int, delta_inh: float, seed: int) -> np.ndarray:
    """Gaussian detunings shifted to zero mean and scaled to rms ``delta_inh`` exactly."""
    if n < 2:
        raise ValueError("need at least two atoms")
    if delta_inh < 0:
        raise ValueError("delta_inh must be >= 0")
    if delta_inh == 0:
        return np.zeros(n)
    x = np.random.default_rng(seed).normal(size=n)
    x -= x.mean()
    rms = math.sqrt(float(np.mean(x * x)))
    return x * (delta_inh / rms)


def capped_state_count(n_atoms: int, atom_dim: int, cap: int) -> int:
    """Occupation tuples with entries below ``atom_dim`` and sum at most ``cap``."""
    # coefficients of (1 + x + ... + x^(atom_dim-1))^n_atoms, truncated at x^cap
    poly = [1]
    for _ in range(n_atoms):
        nxt = [0] * min(len(poly) + atom_dim - 1, cap + 1)
        for k, c in enumerate(poly):
            for j in range(atom_dim):
                if k + j <= cap:
                    nxt[k + j] += c
        poly = nxt
    return sum(poly)


class EnsembleBasis:
    """Occupation basis of ``n_atoms`` modes, each below ``atom_dim``, total at most ``max_excitations``.

    States are ordered by total excitation number, so index 0 is the vacuum.
    The master equation sees a single flat mode labelled ``ens``.
    """

    def __init__(self, n_atoms: int, atom_dim: int = ATOM_DIM, max_excitations: int | None = MAX_EXCITATIONS):
        if n_atoms < 2:
            raise ValueError("need at least two atoms")
        if atom_dim < 2:
            raise ValueError("per-atom truncation must be >= 2")
        if max_excitations is not None and max_excitations < 1:
            raise ValueError("max_excitations must be >= 1 (or None for no cap)")
        cap = n_atoms * (atom_dim - 1) if max_excitations is None else max_excitations
        count = capped_state_count(n_atoms, atom_dim, cap)
        if count > MAX_DIM:
            raise BudgetError(f"{count} ensemble states exceed the {MAX_DIM}-state budget")
        occ = [o for o in itertools.product(range(atom_dim), repeat=n_atoms) if sum(o) <= cap]
        occ.sort(key=lambda o: (sum(o), o))
        self.n_atoms = n_atoms
        self.atom_dim = atom_dim
        self.max_excitations = max_excitations
        self.occupations = np.array(occ, dtype=int)
        self._index = {o: i for i, o in enumerate(occ)}
        self.space: HilbertSpace = make_space([("ens", len(occ))])

    @property
    def dim(self) -> int:
        return len(self.occupations)

    def index(self, occupation) -> int:
        return self._index[tuple(int(x) for x in occupation)]

    def total_excitations(self) -> np.ndarray:
        return self.occupations.sum(axis=1)

    def lowering(self, j: int) -> sp.csr_matrix:
        """b_j as a sparse matrix in this basis."""
        rows, cols, vals = [], [], []
        for col, o in enumerate(self.occupations):
            if o[j] > 0:
                lower = o.copy()
                lower[j] -= 1
                rows.append(self._index[tuple(lower)])
                cols.append(col)
                vals.append(math.sqrt(o[j]))
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.dim, self.dim), dtype=complex)

    def operator(self, m) -> Operator:
        return Operator(self.space, sp.csr_matrix(m))


def collective_mode(basis: EnsembleBasis) -> Operator:
    """s = (1/sqrt(N)) sum_j b_j."""
    total = sum(basis.lowering(j) for j in range(basis.n_atoms))
    return basis.operator(total / math.sqrt(basis.n_atoms))


def build_broadened_me(
    params: ModelParams,
    deltas,
    protected: bool,
    atom_dim: int = ATOM_DIM,
    max_excitations: int | None = MAX_EXCITATIONS,
) -> tuple[MasterEquation, EnsembleBasis]:
    """H = sum_j delta_j n_j (+ delta_q s^dag s when protected); collapse (kappa_2at, s^2)."""
    p = params.validate()
    d = derive(p)
    deltas = np.asarray(deltas, dtype=float)
    basis = EnsembleBasis(len(deltas), atom_dim, max_excitations)
    h = sp.diags(basis.occupations @ deltas).astype(complex)
    s = collective_mode(basis)
    if protected:
        h = h + d.delta_q_shift * (s.dag() @ s).sparse
    me = MasterEquation(basis.space, ((basis.operator(h), CONSTANT),), ((d.kappa_2at, s @ s),))
    return me, basis


@dataclass(frozen=True)
class Decomposition:
    s_vector: np.ndarray
    d_vector: np.ndarray
    coupling: float


def superradiant_decomposition(deltas) -> Decomposition:
    """Symmetric mode, the dark mode the disorder couples it to, and their coupling.

    With delta_inh^2 = mean(delta_j^2), d = delta / (sqrt(N) delta_inh) and
    the coupling <s|H_inh|d> equals delta_inh.
    """
    deltas = np.asarray(deltas, dtype=float)
    n = len(deltas)
    inh = math.sqrt(float(np.mean(deltas**2)))
    if inh == 0:
        raise ValueError("all detunings vanish; the coupled dark mode is undefined")
    s_vec = np.full(n, 1.0 / math.sqrt(n))
    d_vec = deltas / (math.sqrt(n) * inh)
    return Decomposition(s_vec, d_vec, float(s_vec @ (deltas * d_vec)))


@dataclass
class BroadeningRun:
    deltas: np.ndarray
    seed: int | None
    protected: bool
    times: np.ndarray
    coherence: np.ndarray
    diagnostics: dict

    @property
    def modulus(self) -> np.ndarray:
        return np.abs(self.coherence)

    @property
    def phase(self) -> np.ndarray:
        return np.unwrap(np.angle(self.coherence))


def initial_product_state(basis: EnsembleBasis, alpha: complex) -> StateVector:
    """Product of single-atom coherent states of amplitude alpha/sqrt(N), projected on the basis.

    For two-level atoms each factor is the normalized (|0> + alpha/sqrt(N) |1>).
    """
    amp = complex(alpha) / math.sqrt(basis.n_atoms)
    if basis.atom_dim == 2 and abs(amp) > 0.5:
        warnings.warn(f"|alpha|/sqrt(N) = {abs(amp):.3g} > 0.5: two-level atoms misrepresent the coherent state", stacklevel=2)
    if basis.max_excitations is not None:
        tail = poisson_tail(abs(alpha) ** 2, basis.max_excitations + 1)
        if tail > TAIL_WARN:
            warnings.warn(f"excitation cap {basis.max_excitations} drops {tail:.3g} of the coherent state", stacklevel=2)
    local = coherent_amplitudes(amp, basis.atom_dim) if basis.atom_dim > 2 else np.array([1.0, amp])
    psi = np.prod(local[basis.occupations], axis=1)
    return StateVector(basis.space, psi, normalize=True)


def broadened_coherence(
    params: ModelParams,
    deltas,
    protected: bool,
    t_grid,
    alpha: complex = 1.0,
    atom_dim: int = ATOM_DIM,
    max_excitations: int | None = MAX_EXCITATIONS,
    config: IntegratorConfig | None = None,
    seed: int | None = None,
) -> BroadeningRun:
    """Evolve and record <sigma_-> = <1_s| rho |vac>, with |1_s> = s^dag |vac>."""
    me, basis = build_broadened_me(params, deltas, protected, atom_dim, max_excitations)
    one_s = collective_mode(basis).dag().sparse[:, 0].toarray().ravel()
    nz = np.flatnonzero(one_s)
    w = one_s[nz].conj()

    def sigma_minus(m, t):
        return complex(np.dot(w, m[nz, 0]))

    traj = evolve(me, initial_product_state(basis, alpha), t_grid, config or RK45, {"sigma_minus": sigma_minus})
    diag = {
        "max_trace_error": float(traj.trace_error.max()),
        "max_hermiticity_error": float(traj.hermiticity_error.max()),
        "min_eigenvalue": float(np.nanmin(traj.min_eigenvalue)),
    }
    return BroadeningRun(np.asarray(deltas, float), seed, protected, np.asarray(t_grid, float), traj.observables["sigma_minus"], diag)


@dataclass(frozen=True)
class PhaseFit:
    slope: float  # in units of delta_q
    intercept: float
    r_squared: float


def phase_linearity(run: BroadeningRun, delta_q: float) -> PhaseFit:
    """Least-squares line through the unwrapped phase; slope reported in units of ``delta_q``."""
    if len(run.times) < 20:
        raise ValueError("phase fit needs at least 20 time points")
    t, ph = run.times, run.phase
    slope, intercept = np.polyfit(t, ph, 1)
    resid = ph - (slope * t + intercept)
    ss_tot = float(np.sum((ph - ph.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return PhaseFit(float(slope) / delta_q, float(intercept), r2)


def ideal_modulus(alpha: complex = 1.0) -> float:
    return abs(coherent_coeffs(alpha).c01)


def _seed_pair(params, n, seed, t_grid, alpha, atom_dim, max_excitations):
    deltas = sample_detunings(n, params.resolved().delta_inh, seed)
    return [
        broadened_coherence(params, deltas, prot, t_grid, alpha, atom_dim, max_excitations, seed=seed)
        for prot in (True, False)
    ]


def seed_study(
    params: ModelParams,
    seeds,
    t_end_k2at: float = 20.0,
    points: int = 201,
    alpha: complex = 1.0,
    atom_dim: int = ATOM_DIM,
    max_excitations: int | None = MAX_EXCITATIONS,
    threads: int = 1,
) -> list[tuple[BroadeningRun, BroadeningRun]]:
    """Protected and unprotected runs for each seed, in seed order. Times in units of 1/kappa_2at."""
    p = params.validate()
    d = derive(p)
    t_grid = np.linspace(0.0, t_end_k2at, points) / d.kappa_2at
    jobs = [(p, int(p.N_atoms), int(s), t_grid, alpha, atom_dim, max_excitations) for s in seeds]
    return [tuple(r) for r in run_jobs(_seed_pair, jobs, threads)]
