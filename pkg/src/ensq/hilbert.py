"""Truncated bosonic Fock spaces, operators and states.

Modes are tensored in declaration order; basis indices are row-major over
that order, so the last declared mode varies fastest.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import lgamma, log
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp


class SpaceMismatchError(ValueError):
    """Operands live on different Hilbert spaces."""


class TruncationError(ValueError):
    """Fock truncation too small for the requested state."""


@dataclass(frozen=True)
class Mode:
    label: str
    dim: int


@dataclass(frozen=True)
class HilbertSpace:
    modes: tuple[Mode, ...]

    def __post_init__(self):
        labels = [m.label for m in self.modes]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate mode label in {labels}")
        for m in self.modes:
            if int(m.dim) < 2:
                raise ValueError(f"mode {m.label!r} has dim {m.dim} < 2")

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(m.label for m in self.modes)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(m.dim for m in self.modes)

    @property
    def dim(self) -> int:
        return int(np.prod(self.dims))

    def index(self, label: str) -> int:
        for i, m in enumerate(self.modes):
            if m.label == label:
                return i
        raise KeyError(f"unknown mode label {label!r}; space has {self.labels}")

    def mode_dim(self, label: str) -> int:
        return self.modes[self.index(label)].dim

    def basis_index(self, occupations: Mapping[str, int]) -> int:
        """Flat index of the Fock ket with the given occupations (others 0)."""
        for label in occupations:
            self.index(label)
        idx = 0
        for m in self.modes:
            n = int(occupations.get(m.label, 0))
            if not 0 <= n < m.dim:
                raise TruncationError(f"occupation {n} outside mode {m.label!r} (dim {m.dim})")
            idx = idx * m.dim + n
        return idx


def make_space(mode_specs: Iterable[tuple[str, int]]) -> HilbertSpace:
    modes = tuple(Mode(str(label), int(dim)) for label, dim in mode_specs)
    if not modes:
        raise ValueError("a space needs at least one mode")
    return HilbertSpace(modes)


def _check_same(a: HilbertSpace, b: HilbertSpace) -> None:
    if a != b:
        raise SpaceMismatchError(f"space mismatch: {a.labels}{a.dims} vs {b.labels}{b.dims}")


class Operator:
    """Complex matrix tagged with its space.

    Storage is either a CSR matrix or a dense array; arithmetic keeps CSR
    unless both operands are dense. Instances are treated as immutable.
    """

    __slots__ = ("space", "_data")

    def __init__(self, space: HilbertSpace, data):
        if sp.issparse(data):
            data = sp.csr_matrix(data, dtype=complex)
        else:
            data = np.array(data, dtype=complex)
            data.setflags(write=False)
        if data.shape != (space.dim, space.dim):
            raise ValueError(f"operator shape {data.shape} does not match space dim {space.dim}")
        self.space = space
        self._data = data

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self._data)

    @property
    def sparse(self) -> sp.csr_matrix:
        return self._data if self.is_sparse else sp.csr_matrix(self._data)

    @property
    def dense(self) -> np.ndarray:
        return self._data.toarray() if self.is_sparse else self._data

    @property
    def shape(self) -> tuple[int, int]:
        return self._data.shape

    def to_dense(self) -> "Operator":
        return Operator(self.space, self.dense)

    def to_sparse(self) -> "Operator":
        return Operator(self.space, self.sparse)

    def dag(self) -> "Operator":
        return Operator(self.space, self._data.conj().T)

    def element(self, bra: int, ket: int) -> complex:
        return complex(self._data[bra, ket])

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        diff = self._data - self._data.conj().T
        if sp.issparse(diff):
            return diff.nnz == 0 or float(abs(diff).max()) <= tol
        return float(np.abs(diff).max(initial=0.0)) <= tol

    def _binary(self, other, fn):
        _check_same(self.space, other.space)
        return Operator(self.space, fn(self._data, other._data))

    def __add__(self, other):
        if isinstance(other, Operator):
            return self._binary(other, lambda a, b: a + b)
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, Operator):
            return self._binary(other, lambda a, b: a - b)
        return NotImplemented

    def __neg__(self):
        return Operator(self.space, -self._data)

    def __mul__(self, scalar):
        if isinstance(scalar, (int, float, complex, np.number)):
            return Operator(self.space, self._data * complex(scalar))
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self * (1.0 / complex(scalar))

    def __matmul__(self, other):
        if isinstance(other, Operator):
            return self._binary(other, lambda a, b: a @ b)
        if isinstance(other, StateVector):
            _check_same(self.space, other.space)
            return np.asarray(self._data @ other.amplitudes).ravel()
        return NotImplemented

    def __pow__(self, n: int):
        if n < 1:
            raise ValueError("only positive integer powers")
        out = self
        for _ in range(n - 1):
            out = out @ self
        return out

    def __repr__(self):
        kind = "sparse" if self.is_sparse else "dense"
        return f"Operator({kind}, modes={self.space.labels}, dims={self.space.dims})"


def dagger(op: Operator) -> Operator:
    return op.dag()


def commutator(a: Operator, b: Operator) -> Operator:
    return a @ b - b @ a


def embed(space: HilbertSpace, label: str, local) -> Operator:
    """Place a single-mode matrix on ``label`` with identities elsewhere."""
    k = space.index(label)
    local = sp.csr_matrix(local, dtype=complex)
    d = space.dims[k]
    if local.shape != (d, d):
        raise ValueError(f"local operator shape {local.shape} != ({d}, {d})")
    left = int(np.prod(space.dims[:k], dtype=int))
    right = int(np.prod(space.dims[k + 1 :], dtype=int))
    out = sp.kron(sp.identity(left, dtype=complex, format="csr"), local, format="csr")
    out = sp.kron(out, sp.identity(right, dtype=complex, format="csr"), format="csr")
    return Operator(space, out)


def _lowering(d: int) -> sp.csr_matrix:
    return sp.diags(np.sqrt(np.arange(1, d, dtype=float)), 1, shape=(d, d), format="csr", dtype=complex)


def identity(space: HilbertSpace) -> Operator:
    return Operator(space, sp.identity(space.dim, dtype=complex, format="csr"))


def annihilation(space: HilbertSpace, label: str) -> Operator:
    return embed(space, label, _lowering(space.mode_dim(label)))


def creation(space: HilbertSpace, label: str) -> Operator:
    return annihilation(space, label).dag()


def number(space: HilbertSpace, label: str) -> Operator:
    d = space.mode_dim(label)
    return embed(space, label, sp.diags(np.arange(d, dtype=float), 0, format="csr"))


def parity_operator(space: HilbertSpace, label: str) -> Operator:
    d = space.mode_dim(label)
    return embed(space, label, sp.diags((-1.0) ** np.arange(d), 0, format="csr"))


def fock_projector(space: HilbertSpace, label: str, n: int) -> Operator:
    d = space.mode_dim(label)
    if not 0 <= n < d:
        raise TruncationError(f"level {n} outside mode {label!r} (dim {d})")
    local = sp.csr_matrix(([1.0], ([n], [n])), shape=(d, d))
    return embed(space, label, local)


class StateVector:
    __slots__ = ("space", "amplitudes")

    def __init__(self, space: HilbertSpace, amplitudes, normalize: bool = False):
        amps = np.array(amplitudes, dtype=complex).ravel()
        if amps.shape != (space.dim,):
            raise ValueError(f"state length {amps.shape[0]} does not match space dim {space.dim}")
        norm = np.linalg.norm(amps)
        if normalize:
            if norm == 0:
                raise ValueError("cannot normalize the zero vector")
            amps = amps / norm
        elif abs(norm - 1.0) > 1e-10:
            raise ValueError(f"state norm {norm:.12g} differs from 1")
        amps.setflags(write=False)
        self.space = space
        self.amplitudes = amps

    def to_dm(self) -> "DensityMatrix":
        return DensityMatrix(self.space, np.outer(self.amplitudes, self.amplitudes.conj()))

    def overlap(self, other: "StateVector") -> complex:
        _check_same(self.space, other.space)
        return complex(np.vdot(self.amplitudes, other.amplitudes))


class DensityMatrix:
    """Dense density matrix.

    With ``check=True`` (default) the unit-trace, Hermiticity and positivity
    contracts are enforced at construction. Integrator snapshots are built
    with ``check=False`` because trace drift is a reported diagnostic there.
    """

    __slots__ = ("space", "matrix")

    TRACE_TOL = 1e-10
    HERM_TOL = 1e-12
    PSD_TOL = 1e-8

    def __init__(self, space: HilbertSpace, matrix, check: bool = True):
        m = np.array(matrix, dtype=complex)
        if m.shape != (space.dim, space.dim):
            raise ValueError(f"matrix shape {m.shape} does not match space dim {space.dim}")
        if check:
            tr = np.trace(m)
            if abs(tr - 1.0) > self.TRACE_TOL:
                raise ValueError(f"trace {tr:.12g} differs from 1")
            herm = float(np.abs(m - m.conj().T).max())
            if herm > self.HERM_TOL:
                raise ValueError(f"matrix not Hermitian (max deviation {herm:.3g})")
            lo = float(np.linalg.eigvalsh(m).min())
            if lo < -self.PSD_TOL:
                raise ValueError(f"matrix not positive semidefinite (min eigenvalue {lo:.3g})")
        m.setflags(write=False)
        self.space = space
        self.matrix = m

    @property
    def trace(self) -> complex:
        return complex(np.trace(self.matrix))

    def hermiticity_error(self) -> float:
        return float(np.abs(self.matrix - self.matrix.conj().T).max())

    def min_eigenvalue(self) -> float:
        h = 0.5 * (self.matrix + self.matrix.conj().T)
        return float(np.linalg.eigvalsh(h).min())


def fock_state(space: HilbertSpace, occupations: Mapping[str, int] | None = None) -> StateVector:
    amps = np.zeros(space.dim, dtype=complex)
    amps[space.basis_index(occupations or {})] = 1.0
    return StateVector(space, amps)


def vacuum(space: HilbertSpace) -> StateVector:
    return fock_state(space, {})


def coherent_amplitudes(alpha: complex, dim: int) -> np.ndarray:
    """Unnormalized coefficients exp(-|a|^2/2) a^n / sqrt(n!) for n < dim."""
    alpha = complex(alpha)
    n = np.arange(dim)
    out = np.zeros(dim, dtype=complex)
    if alpha == 0:
        out[0] = 1.0
        return out
    r, phi = abs(alpha), np.angle(alpha)
    # log-space to avoid factorial overflow
    logmag = -0.5 * r * r + n * log(r) - 0.5 * np.array([lgamma(k + 1.0) for k in n])
    return np.exp(logmag) * np.exp(1j * phi * n)


def poisson_tail(mean: float, dim: int) -> float:
    """Probability mass of a Poisson(mean) variable at n >= dim."""
    if mean == 0:
        return 0.0
    head = np.abs(coherent_amplitudes(np.sqrt(mean), dim)) ** 2
    tail = 1.0 - float(head.sum())
    # the direct difference loses accuracy below ~1e-15; sum explicit terms instead
    if tail < 1e-9:
        k = np.arange(dim, dim + 400)
        logp = -mean + k * log(mean) - np.array([lgamma(x + 1.0) for x in k])
        tail = float(np.exp(logp).sum())
    return max(tail, 0.0)


COHERENT_TAIL_TOL = 1e-6


def min_coherent_dim(alpha: complex, tol: float = COHERENT_TAIL_TOL) -> int:
    """Smallest truncation whose discarded Poisson weight is at most ``tol``."""
    mean = abs(alpha) ** 2
    d = 2
    while poisson_tail(mean, d) > tol:
        d += 1
    return d


def coherent_state(space: HilbertSpace, label: str, alpha: complex) -> StateVector:
    """Truncated, renormalized coherent state on ``label``; other modes in vacuum."""
    d = space.mode_dim(label)
    tail = poisson_tail(abs(alpha) ** 2, d)
    if tail > COHERENT_TAIL_TOL:
        raise TruncationError(
            f"dim {d} too small for alpha={alpha}: discarded weight {tail:.2e} > {COHERENT_TAIL_TOL:.0e}"
            f" (need dim >= {min_coherent_dim(alpha)})"
        )
    local = coherent_amplitudes(alpha, d)
    local = local / np.linalg.norm(local)
    k = space.index(label)
    amps = np.ones(1, dtype=complex)
    for i, m in enumerate(space.modes):
        factor = local if i == k else np.eye(m.dim, 1).ravel()
        amps = np.kron(amps, factor)
    return StateVector(space, amps, normalize=True)


def product_state(space: HilbertSpace, factors: Sequence[np.ndarray]) -> StateVector:
    """Tensor product of per-mode amplitude vectors in declaration order."""
    if len(factors) != len(space.modes):
        raise ValueError("one factor per mode required")
    amps = np.ones(1, dtype=complex)
    for f, m in zip(factors, space.modes):
        f = np.asarray(f, dtype=complex)
        if f.shape != (m.dim,):
            raise ValueError(f"factor for mode {m.label!r} has shape {f.shape}, expected ({m.dim},)")
        amps = np.kron(amps, f)
    return StateVector(space, amps, normalize=True)


def expectation(rho, op: Operator) -> complex:
    """Tr[op rho] for a DensityMatrix, or <psi|op|psi> for a StateVector."""
    _check_same(rho.space, op.space)
    if isinstance(rho, StateVector):
        return complex(np.vdot(rho.amplitudes, op.sparse @ rho.amplitudes))
    m = rho.matrix
    if op.is_sparse:
        # Tr[A rho] = sum_ij A_ij rho_ji
        a = op.sparse.tocoo()
        return complex(np.sum(a.data * m[a.col, a.row]))
    return complex(np.einsum("ij,ji->", op.dense, m))
