"""Lindblad master equations: generator, integrators, steady states, metrics.

The density matrix is propagated directly as a matrix-valued ODE

    drho/dt = -i (H_eff rho - rho H_eff^dag) + sum_k kappa_k c_k rho c_k^dag,
    H_eff   = H(t) - (i/2) sum_k kappa_k c_k^dag c_k,

which is the Lindblad form with L(o)rho = (2 o rho o^dag - o^dag o rho - rho o^dag o)/2.
"""

from __future__ import annotations

import ctypes
import math
import os
import sys
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping, Sequence, Union

import numpy as np
import scipy.sparse as sp

from .hilbert import (
    DensityMatrix,
    HilbertSpace,
    Mode,
    Operator,
    SpaceMismatchError,
    StateVector,
)


_ALLOCATOR_TUNED = False


def _tune_allocator() -> None:
    """Keep freed multi-megabyte buffers in the glibc heap.

    Every right-hand-side call allocates a handful of density-matrix-sized
    temporaries; returning them to the OS makes each fresh allocation
    page-fault and roughly doubles the cost of an integration step.
    Set ENSQ_NO_MALLOC_TUNING=1 to leave the allocator alone.
    """
    global _ALLOCATOR_TUNED
    if _ALLOCATOR_TUNED:
        return
    _ALLOCATOR_TUNED = True
    if os.environ.get("ENSQ_NO_MALLOC_TUNING") or not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 32 << 20)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 256 << 20)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


class IntegrationError(RuntimeError):
    """Step-size underflow, NaN, or step budget exhausted."""


class NonConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeProfile:
    """Scalar time dependence ``amplitude * exp(i * frequency * t)``."""

    amplitude: complex = 1.0
    frequency: float = 0.0

    def __call__(self, t: float) -> complex:
        if self.frequency == 0.0:
            return complex(self.amplitude)
        return complex(self.amplitude) * complex(math.cos(self.frequency * t), math.sin(self.frequency * t))

    @property
    def is_constant(self) -> bool:
        return self.frequency == 0.0

    def conj(self) -> "TimeProfile":
        return TimeProfile(complex(self.amplitude).conjugate(), -self.frequency)


CONSTANT = TimeProfile()

HTerm = tuple[Operator, TimeProfile]
CTerm = tuple[float, Operator]


def _max_abs(m) -> float:
    if sp.issparse(m):
        return float(abs(m).max()) if m.nnz else 0.0
    return float(np.abs(m).max(initial=0.0))


@dataclass(frozen=True)
class MasterEquation:
    space: HilbertSpace
    h_terms: tuple[HTerm, ...] = ()
    c_terms: tuple[CTerm, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "h_terms", tuple((op, prof) for op, prof in self.h_terms))
        object.__setattr__(self, "c_terms", tuple((float(r), op) for r, op in self.c_terms))
        for op, _ in self.h_terms:
            if op.space != self.space:
                raise SpaceMismatchError("Hamiltonian term on a different space")
        for rate, op in self.c_terms:
            if op.space != self.space:
                raise SpaceMismatchError("collapse operator on a different space")
            if rate < 0 or not math.isfinite(rate):
                raise ValueError(f"collapse rate must be finite and >= 0, got {rate}")
        self._check_pairing()

    def _check_pairing(self):
        static = self.static_hamiltonian().sparse
        scale = max(_max_abs(static), 1.0)
        if _max_abs(static - static.conj().T) > 1e-12 * scale:
            raise ValueError("static Hamiltonian part is not Hermitian")
        dynamic = [(op, p) for op, p in self.h_terms if not p.is_constant]
        for op, prof in dynamic:
            want = prof.conj()
            target = (op.sparse * prof.amplitude).conj().T
            for other, oprof in dynamic:
                if oprof.frequency == want.frequency and _max_abs(other.sparse * oprof.amplitude - target) <= 1e-12 * scale:
                    break
            else:
                raise ValueError("time-dependent term lacks its Hermitian-conjugate partner")

    def static_hamiltonian(self) -> Operator:
        out = sp.csr_matrix((self.space.dim, self.space.dim), dtype=complex)
        for op, prof in self.h_terms:
            if prof.is_constant:
                out = out + op.sparse * complex(prof.amplitude)
        return Operator(self.space, out)

    def hamiltonian(self, t: float = 0.0) -> Operator:
        out = sp.csr_matrix((self.space.dim, self.space.dim), dtype=complex)
        for op, prof in self.h_terms:
            out = out + op.sparse * prof(t)
        return Operator(self.space, out)

    def with_terms(self, h_terms: Sequence[HTerm] = (), c_terms: Sequence[CTerm] = ()) -> "MasterEquation":
        return MasterEquation(self.space, self.h_terms + tuple(h_terms), self.c_terms + tuple(c_terms))

    def frequency_scale(self) -> float:
        """Largest frequency or rate the generator can produce (nu_max)."""
        h = self.static_hamiltonian().sparse
        dyn = sum(abs(complex(p.amplitude)) * _norm2(op.sparse) for op, p in self.h_terms if not p.is_constant)
        dyn += max((abs(p.frequency) for _, p in self.h_terms), default=0.0)
        spread = _spread(h) + 2.0 * dyn
        damping = sum(rate * _norm2(op.sparse.conj().T @ op.sparse) for rate, op in self.c_terms)
        return max(spread, damping)

    @cached_property
    def generator(self) -> "Generator":
        return Generator(self)


def _spread(h: sp.spmatrix) -> float:
    if h.nnz == 0:
        return 0.0
    if h.shape[0] <= 1024:
        w = np.linalg.eigvalsh(h.toarray())
        return float(w[-1] - w[0])
    return 2.0 * float(abs(h).sum(axis=1).max())


def _norm2(m: sp.spmatrix) -> float:
    if m.nnz == 0:
        return 0.0
    if m.shape[0] <= 1024:
        return float(np.linalg.norm(m.toarray(), 2))
    return float(math.sqrt(abs(m).sum(axis=0).max() * abs(m).sum(axis=1).max()))


class Generator:
    """Compiled right-hand side; accepts Hermitian rho of shape (d, d) or (B, d, d).

    Uses rho = rho^dag, so that rho H_eff^dag = (H_eff rho)^dag and
    c rho c^dag = c (c rho)^dag: every step is a sparse-times-dense product.
    """

    def __init__(self, me: MasterEquation):
        d = me.space.dim
        self.dim = d
        heff = me.static_hamiltonian().sparse.astype(complex)
        jumps = []
        for rate, op in me.c_terms:
            if rate > 0:
                c = op.sparse * math.sqrt(rate)
                heff = heff - 0.5j * (c.conj().T @ c)
                jumps.append(sp.csr_matrix(c))
        self.n_jumps = len(jumps)
        self.stack = sp.vstack([heff] + jumps, format="csr")
        self.jump_block = sp.block_diag(jumps, format="csr") if jumps else None
        self.dynamic = [(prof, op.sparse.tocsr()) for op, prof in me.h_terms if not prof.is_constant]

    def __call__(self, t: float, rho: np.ndarray) -> np.ndarray:
        if rho.ndim == 2:
            return self._apply(t, rho[None])[0]
        return self._apply(t, rho)

    def _apply(self, t: float, rho: np.ndarray) -> np.ndarray:
        b, d, _ = rho.shape
        # columns of all batch members side by side: X[:, k*d:(k+1)*d] = rho[k]
        x = rho.transpose(1, 0, 2).reshape(d, b * d)
        y = self.stack @ x
        a = y[:d]
        for prof, op in self.dynamic:
            a = a + prof(t) * (op @ x)
        out = np.multiply(a.reshape(d, b, d).transpose(1, 0, 2), -1j)
        work = np.empty_like(out)
        np.conjugate(out, out=work)
        out += work.transpose(0, 2, 1)
        if self.n_jumps:
            m = self.n_jumps
            cx = y[d:].reshape(m, d, b, d)  # [k, i, batch, j] = (c_k rho_batch)[i, j]
            cxd = np.conjugate(cx.transpose(0, 3, 2, 1))  # (c_k rho)^dag, column-stacked
            z = (self.jump_block @ cxd.reshape(m * d, b * d)).reshape(m, d, b, d)
            zs = z[0] if m == 1 else z.sum(axis=0)
            out += zs.transpose(1, 0, 2)
        return out


def _as_matrix(rho, space: HilbertSpace) -> np.ndarray:
    if isinstance(rho, StateVector):
        if rho.space != space:
            raise SpaceMismatchError("initial state on a different space")
        return np.outer(rho.amplitudes, rho.amplitudes.conj())
    if isinstance(rho, DensityMatrix):
        if rho.space != space:
            raise SpaceMismatchError("initial state on a different space")
        return np.array(rho.matrix)
    raise TypeError(f"expected DensityMatrix or StateVector, got {type(rho).__name__}")


def liouvillian_apply(me: MasterEquation, rho: DensityMatrix, t: float = 0.0) -> np.ndarray:
    """drho/dt at time ``t``."""
    return me.generator(t, _as_matrix(rho, me.space))


SUPEROPERATOR_MAX_DIM = 64


def liouvillian_superoperator(me: MasterEquation, t: float = 0.0) -> np.ndarray:
    """Dense generator acting on the row-major flattening ``rho.ravel()``.

    Meant as an independent reference for small spaces (dim <= 64).
    """
    d = me.space.dim
    if d > SUPEROPERATOR_MAX_DIM:
        raise ValueError(f"superoperator of a {d}-dimensional space is too large; limit {SUPEROPERATOR_MAX_DIM}")
    eye = np.eye(d)
    h = me.hamiltonian(t).dense
    out = -1j * (np.kron(h, eye) - np.kron(eye, h.T))
    for rate, op in me.c_terms:
        c = op.dense
        cdc = c.conj().T @ c
        out += rate * (np.kron(c, c.conj()) - 0.5 * np.kron(cdc, eye) - 0.5 * np.kron(eye, cdc.T))
    return out


@dataclass(frozen=True)
class IntegratorConfig:
    """``rk4``: fixed step ``dt`` (default ``dt_factor / nu_max``).
    ``rk45``: Dormand-Prince with embedded error control."""

    method: str = "rk4"
    dt: float | None = None
    dt_factor: float = 0.02
    rtol: float = 1e-8
    atol: float = 1e-10
    max_steps: int = 50_000_000
    monitor_positivity: bool = True

    def __post_init__(self):
        if self.method not in ("rk4", "rk45"):
            raise ValueError(f"unknown integrator method {self.method!r}")


RK4 = IntegratorConfig()
RK45 = IntegratorConfig(method="rk45")

Observable = Union[Operator, Callable[[np.ndarray, float], complex]]


@dataclass
class Trajectory:
    times: np.ndarray
    observables: dict[str, np.ndarray]
    states: list[DensityMatrix] | None
    trace_error: np.ndarray
    hermiticity_error: np.ndarray
    min_eigenvalue: np.ndarray
    steps: int = 0

    def __post_init__(self):
        n = len(self.times)
        for name, series in self.observables.items():
            if len(series) != n:
                raise ValueError(f"observable {name!r} has {len(series)} samples for {n} times")

    @property
    def final_state(self) -> DensityMatrix | None:
        return self.states[-1] if self.states else None


def _observable_fn(obs: Observable) -> Callable[[np.ndarray, float], complex]:
    if isinstance(obs, Operator):
        coo = obs.sparse.tocoo()
        rows, cols, vals = coo.row, coo.col, coo.data
        return lambda m, t: complex(np.sum(vals * m[cols, rows]))
    return obs


def _check_finite(rho: np.ndarray, t: float) -> None:
    s = rho.sum()
    if not (math.isfinite(s.real) and math.isfinite(s.imag)):
        raise IntegrationError(f"non-finite density matrix at t={t:.6g}")


def _rk4_step(f, t, y, h):
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + (0.5 * h) * k1)
    k3 = f(t + 0.5 * h, y + (0.5 * h) * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# Dormand-Prince 5(4) tableau
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_E = (
    71 / 57600,
    0.0,
    -71 / 16695,
    71 / 1920,
    -17253 / 339200,
    22 / 525,
    -1 / 40,
)


def _herm(y: np.ndarray) -> np.ndarray:
    return 0.5 * (y + np.swapaxes(y, -1, -2).conj())


def propagate(
    gen: Callable[[float, np.ndarray], np.ndarray],
    rho0: np.ndarray,
    t_grid: np.ndarray,
    config: IntegratorConfig,
    nu_max: float,
    record: Callable[[int, float, np.ndarray], None],
) -> int:
    """Integrate from t_grid[0], calling ``record(i, t, rho)`` at every grid point.

    ``rho0`` may carry a leading batch axis. Returns the number of steps taken.
    """
    _tune_allocator()
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or len(t_grid) < 1:
        raise ValueError("t_grid must be a non-empty 1-D sequence")
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    y = _herm(np.array(rho0, dtype=complex))
    record(0, float(t_grid[0]), y)
    if len(t_grid) == 1:
        return 0
    steps = 0
    if config.method == "rk4":
        dt = config.dt if config.dt is not None else config.dt_factor / max(nu_max, 1e-300)
        for i in range(1, len(t_grid)):
            t0, t1 = float(t_grid[i - 1]), float(t_grid[i])
            n = max(1, math.ceil((t1 - t0) / dt - 1e-9))
            h = (t1 - t0) / n
            for k in range(n):
                t = t0 + k * h
                y = _herm(_rk4_step(gen, t, y, h))
                steps += 1
                if steps > config.max_steps:
                    raise IntegrationError(f"step budget {config.max_steps} exhausted at t={t:.6g}")
            _check_finite(y, t1)
            record(i, t1, y)
        return steps

    # adaptive Dormand-Prince
    t = float(t_grid[0])
    h = config.dt if config.dt is not None else config.dt_factor / max(nu_max, 1e-300)
    k1 = gen(t, y)
    for i in range(1, len(t_grid)):
        t_target = float(t_grid[i])
        while t < t_target:
            h_min = 1e-13 * max(abs(t), abs(t_target), 1.0)
            if t_target - t <= h_min:
                # rounding remainder of the previous step
                t = t_target
                break
            last = t + h >= t_target - h_min
            h_try = t_target - t if last else h
            if h_try < h_min:
                raise IntegrationError(f"step size underflow (h={h_try:.3g}) at t={t:.6g}")
            ks = [k1]
            for s in range(1, 7):
                acc = y + h_try * sum(a * k for a, k in zip(_DP_A[s], ks) if a != 0.0)
                ks.append(gen(t + _DP_C[s] * h_try, acc))
            y_new = y + h_try * sum(b * k for b, k in zip(_DP_B, ks) if b != 0.0)
            err_vec = h_try * sum(e * k for e, k in zip(_DP_E, ks) if e != 0.0)
            scale = config.atol + config.rtol * np.maximum(np.abs(y), np.abs(y_new))
            err = float(np.max(np.abs(err_vec) / scale))
            if not math.isfinite(err):
                raise IntegrationError(f"non-finite error estimate at t={t:.6g}")
            steps += 1
            if steps > config.max_steps:
                raise IntegrationError(f"step budget {config.max_steps} exhausted at t={t:.6g}")
            if err <= 1.0:
                t = t_target if last else t + h_try
                y = _herm(y_new)
                k1 = ks[6]  # FSAL: last stage is f(y_new); symmetrization only moves rounding
                factor = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
                if not last or factor < 1.0:
                    h = h_try * factor
            else:
                h = h_try * max(0.2, 0.9 * err ** -0.2)
        _check_finite(y, t)
        record(i, t, y)
    return steps


def evolve(
    me: MasterEquation,
    rho0,
    t_grid: Sequence[float],
    config: IntegratorConfig | None = None,
    observables: Mapping[str, Observable] | None = None,
    keep_states: bool = False,
) -> Trajectory:
    """Integrate ``me`` from ``rho0`` (given at ``t_grid[0]``) and record along ``t_grid``."""
    config = config or RK4
    t_grid = np.asarray(t_grid, dtype=float)
    rho = _as_matrix(rho0, me.space)
    fns = {name: _observable_fn(o) for name, o in (observables or {}).items()}
    n = len(t_grid)
    series = {name: np.zeros(n, dtype=complex) for name in fns}
    tr_err = np.zeros(n)
    herm_err = np.zeros(n)
    min_eig = np.zeros(n)
    states: list[DensityMatrix] | None = [] if keep_states else None

    def record(i, t, y):
        for name, fn in fns.items():
            series[name][i] = fn(y, t)
        tr_err[i] = abs(np.trace(y) - 1.0)
        herm_err[i] = float(np.abs(y - y.conj().T).max())
        min_eig[i] = float(np.linalg.eigvalsh(y).min()) if config.monitor_positivity else np.nan
        if states is not None:
            states.append(DensityMatrix(me.space, y, check=False))

    steps = propagate(me.generator, rho, t_grid, config, me.frequency_scale(), record)
    return Trajectory(t_grid, series, states, tr_err, herm_err, min_eig, steps)


def steady_state(
    me: MasterEquation,
    rho0,
    config: IntegratorConfig | None = None,
    check_interval: float | None = None,
    t_max: float | None = None,
    change_tol: float = 1e-10,
    residual_tol: float = 1e-9,
) -> DensityMatrix:
    """Relax ``rho0`` under ``me`` until it stops changing.

    Integration rather than a null-space solve: with several conserved
    quantities the stationary state depends on where the evolution starts.
    Converged when ``max|rho(t+T) - rho(t)| < change_tol`` over one check
    interval ``T`` and ``max|L rho| <= residual_tol``.
    """
    if not any(rate > 0 for rate, _ in me.c_terms):
        raise ValueError("steady_state needs at least one collapse term with nonzero rate")
    # relaxation is smooth, so error control takes far fewer steps than the fixed-step rule
    config = config or RK45
    slowest = min(rate for rate, _ in me.c_terms if rate > 0)
    interval = check_interval if check_interval is not None else 1.0 / slowest
    t_max = t_max if t_max is not None else 200.0 * interval
    gen = me.generator
    nu = me.frequency_scale()
    rho = _herm(_as_matrix(rho0, me.space))
    t = 0.0
    holder = {}

    def record(i, tt, y):
        holder["y"] = y

    while t < t_max:
        propagate(gen, rho, np.array([t, t + interval]), config, nu, record)
        new = holder["y"]
        change = float(np.abs(new - rho).max())
        rho, t = new, t + interval
        if change < change_tol and float(np.abs(gen(t, rho)).max()) <= residual_tol:
            return DensityMatrix(me.space, rho, check=False)
    raise NonConvergenceError(f"no steady state within t_max={t_max:.6g} (last change {change:.3g})")


def _psd_sqrt(m: np.ndarray, tol: float) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.conj().T))
    if w.min() < -tol:
        raise ValueError(f"input not positive semidefinite (min eigenvalue {w.min():.3g})")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.conj().T


def fidelity(rho, sigma, psd_tol: float = 1e-6) -> float:
    """Uhlmann fidelity in the squared convention, F = (Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2."""
    a = _as_matrix(rho, rho.space)
    b = _as_matrix(sigma, rho.space) if sigma.space == rho.space else None
    if b is None:
        raise SpaceMismatchError("fidelity of states on different spaces")
    ra = _psd_sqrt(a, psd_tol)
    _psd_sqrt(b, psd_tol)  # validation only
    m = ra @ b @ ra
    ev = np.clip(np.linalg.eigvalsh(0.5 * (m + m.conj().T)), 0.0, None)
    f = float(np.sum(np.sqrt(ev)) ** 2)
    return min(max(f, 0.0), 1.0)


def partial_trace(rho: DensityMatrix, keep_labels: Sequence[str]) -> DensityMatrix:
    space = rho.space
    keep = [space.index(lbl) for lbl in keep_labels]
    if len(set(keep)) != len(keep):
        raise ValueError("duplicate label in keep_labels")
    keep = sorted(keep)
    n = len(space.modes)
    dims = space.dims
    letters = "abcdefghijklmnopqrstuvwxyz"
    if 2 * n > len(letters):
        raise ValueError("too many modes for partial_trace")
    row = [letters[i] for i in range(n)]
    col = [letters[n + i] if i in keep else letters[i] for i in range(n)]
    out = [row[i] for i in keep] + [col[i] for i in keep]
    expr = "".join(row) + "".join(col) + "->" + "".join(out)
    t = np.einsum(expr, rho.matrix.reshape(dims + dims))
    sub = HilbertSpace(tuple(Mode(space.modes[i].label, dims[i]) for i in keep))
    return DensityMatrix(sub, t.reshape(sub.dim, sub.dim), check=False)
