"""Conserved quantities of pure two-excitation loss and the stationary qubit they select.

Under L(s^2) alone, the even projector Pi00 and the weighted coherence
operator Pi01 have constant expectation values, so the long-time state
inside span{|0>, |1>} is fixed by the initial state alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .dynamics import RK45, IntegratorConfig, MasterEquation, propagate
from .hilbert import DensityMatrix, HilbertSpace, Operator, StateVector, coherent_state, make_space

_SERIES_MAX_X = 15.0


def _check_arg(x: float) -> float:
    x = float(x)
    if x < 0 or not math.isfinite(x):
        raise ValueError(f"bessel argument must be finite and >= 0, got {x}")
    return x


def _i0_series(x: float) -> float:
    q = 0.25 * x * x
    term, total, k = 1.0, 1.0, 0
    while term > 1e-17 * total:
        k += 1
        term *= q / (k * k)
        total += term
    return total


def _i0e_asymptotic(x: float) -> float:
    # sum_k ((2k-1)!!)^2 / (k! (8x)^k), stopped at the smallest term
    term, total, k = 1.0, 1.0, 0
    while True:
        k += 1
        nxt = term * (2 * k - 1) ** 2 / (k * 8.0 * x)
        if nxt < 1e-17 * total or nxt > term:
            break
        term = nxt
        total += term
    return total / math.sqrt(2.0 * math.pi * x)


def bessel_i0(x: float) -> float:
    """Modified Bessel function of the first kind, order 0, for x >= 0."""
    x = _check_arg(x)
    if x <= _SERIES_MAX_X:
        return _i0_series(x)
    return math.exp(x) * _i0e_asymptotic(x)


def bessel_i0e(x: float) -> float:
    """e^{-x} I0(x), finite for all x >= 0."""
    x = _check_arg(x)
    if x <= _SERIES_MAX_X:
        return math.exp(-x) * _i0_series(x)
    return _i0e_asymptotic(x)


def _mode_space(dim: int, label: str = "b") -> HilbertSpace:
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    return make_space([(label, dim)])


def pi00(dim: int, label: str = "b") -> Operator:
    """Projector onto even Fock states, sum_n |2n><2n|."""
    diag = np.array([1.0 if n % 2 == 0 else 0.0 for n in range(dim)], dtype=complex)
    return Operator(_mode_space(dim, label), sp.diags(diag, format="csr"))


def pi01_weights(count: int) -> np.ndarray:
    """w_n = sqrt(2n+1) (2n-1)!!/(2n)!! with (-1)!! = 0!! = 1."""
    w = np.empty(count)
    ratio = 1.0  # (2n-1)!!/(2n)!!
    for n in range(count):
        if n > 0:
            ratio *= (2 * n - 1) / (2 * n)
        w[n] = math.sqrt(2 * n + 1) * ratio
    return w


def pi01(dim: int, label: str = "b") -> Operator:
    """sum_n w_n |2n><2n+1|, truncated to ``dim``."""
    pairs = dim // 2
    w = pi01_weights(pairs)
    rows = [2 * n for n in range(pairs)]
    cols = [2 * n + 1 for n in range(pairs)]
    m = sp.csr_matrix((w.astype(complex), (rows, cols)), shape=(dim, dim))
    return Operator(_mode_space(dim, label), m)


@dataclass(frozen=True)
class SteadyCoeffs:
    c00: float
    c01: complex

    def __post_init__(self):
        if not -1e-10 <= self.c00 <= 1 + 1e-10:
            raise ValueError(f"c00 out of [0, 1]: {self.c00}")

    @property
    def c11(self) -> float:
        return 1.0 - self.c00

    @property
    def c10(self) -> complex:
        return complex(self.c01).conjugate()

    def matrix(self) -> np.ndarray:
        return np.array([[self.c00, self.c01], [self.c10, self.c11]], dtype=complex)

    def is_physical(self, tol: float = 1e-8) -> bool:
        return float(np.linalg.eigvalsh(self.matrix()).min()) >= -tol

    def density_matrix(self, dim: int = 2, label: str = "b") -> DensityMatrix:
        """The stationary state embedded in a ``dim``-level mode."""
        m = np.zeros((dim, dim), dtype=complex)
        m[:2, :2] = self.matrix()
        return DensityMatrix(_mode_space(dim, label), m)


def _single_mode_matrix(rho) -> np.ndarray:
    if isinstance(rho, StateVector):
        rho = rho.to_dm()
    if len(rho.space.modes) != 1:
        raise ValueError("expected a state on a single bosonic mode")
    return rho.matrix


def steady_coeffs(rho0) -> SteadyCoeffs:
    """Stationary coefficients reached from ``rho0`` under two-excitation loss:
    c00 = Tr[Pi00 rho0], c01 = Tr[Pi01^dag rho0]."""
    m = _single_mode_matrix(rho0)
    dim = m.shape[0]
    c00 = float(np.real(np.trace(m[::2, ::2])))
    pairs = dim // 2
    w = pi01_weights(pairs)
    c01 = complex(np.sum(w * m[0 : 2 * pairs : 2, 1 : 2 * pairs : 2].diagonal()))
    return SteadyCoeffs(min(max(c00, 0.0), 1.0), c01)


def coherent_coeffs(alpha: complex) -> SteadyCoeffs:
    """Closed form for a coherent start: c00 = (1 + e^{-2|a|^2})/2, c01 = a* e^{-|a|^2} I0(|a|^2)."""
    a2 = abs(alpha) ** 2
    c00 = 0.5 * (1.0 + math.exp(-2.0 * a2))
    return SteadyCoeffs(c00, complex(alpha).conjugate() * bessel_i0e(a2))


def ideal_state(alpha: complex, dim: int = 2, label: str = "b") -> DensityMatrix:
    """Stationary two-level state reached from the coherent state |alpha>."""
    return coherent_coeffs(alpha).density_matrix(dim, label)


def coherent_dm(alpha: complex, dim: int, label: str = "b") -> DensityMatrix:
    return coherent_state(_mode_space(dim, label), label, alpha).to_dm()


def random_density_matrix(dim: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    """Ginibre-ensemble mixed state."""
    k = rank or dim
    g = rng.normal(size=(dim, k)) + 1j * rng.normal(size=(dim, k))
    m = g @ g.conj().T
    return m / np.trace(m).real


@dataclass(frozen=True)
class ConservationReport:
    drift: dict[str, float]
    max_trace_error: float
    max_hermiticity_error: float
    min_eigenvalue: float


def conserved_drifts(
    me: MasterEquation,
    ops: Mapping[str, Operator],
    t_end: float,
    n_states: int = 20,
    seed: int = 0,
    samples: int = 21,
    config: IntegratorConfig | None = None,
) -> ConservationReport:
    """Max |Tr[op rho(t)] - Tr[op rho(0)]| per operator over one batch of random initial states.

    Adaptive stepping by default: the fixed-step rule needs ~1e5 steps to reach kappa_2at t = 20.
    """
    for op in ops.values():
        if op.space != me.space:
            raise ValueError("observable and master equation live on different spaces")
    rng = np.random.default_rng(seed)
    d = me.space.dim
    batch = np.array([random_density_matrix(d, rng) for _ in range(n_states)])
    coos = {name: op.sparse.tocoo() for name, op in ops.items()}
    start: dict[str, np.ndarray] = {}
    drift = {name: 0.0 for name in ops}
    hygiene = {"trace": 0.0, "herm": 0.0, "eig": math.inf}

    def record(i, t, y):
        for name, coo in coos.items():
            vals = np.einsum("k,bk->b", coo.data, y[:, coo.col, coo.row])
            start.setdefault(name, vals)
            drift[name] = max(drift[name], float(np.abs(vals - start[name]).max()))
        hygiene["trace"] = max(hygiene["trace"], float(np.abs(np.trace(y, axis1=1, axis2=2) - 1.0).max()))
        hygiene["herm"] = max(hygiene["herm"], float(np.abs(y - np.conj(y.transpose(0, 2, 1))).max()))
        hygiene["eig"] = min(hygiene["eig"], float(np.linalg.eigvalsh(y).min()))

    grid = np.linspace(0.0, t_end, samples)
    propagate(me.generator, batch, grid, config or RK45, me.frequency_scale(), record)
    return ConservationReport(drift, hygiene["trace"], hygiene["herm"], hygiene["eig"])


def conserved_check(
    me: MasterEquation,
    op: Operator,
    t_end: float,
    n_states: int = 20,
    seed: int = 0,
    samples: int = 21,
    config: IntegratorConfig | None = None,
) -> float:
    """Max |Tr[op rho(t)] - Tr[op rho(0)]| over a batch of random initial states."""
    return conserved_drifts(me, {"op": op}, t_end, n_states, seed, samples, config).drift["op"]
