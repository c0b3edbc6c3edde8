"""Lab-frame eigenstructure versus pump frequency and the pump/two-excitation avoided crossing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .hilbert import HilbertSpace, Operator, annihilation, make_space, number
from .model import ModelParams, Truncations, derive


class NoCrossingError(RuntimeError):
    """The tracked level pair has no interior minimum of separation in the scan window."""


SCAN_TRUNCATIONS = Truncations(dim_p=2, dim_s=4, dim_b=4)


def eigenenergies(H: Operator | np.ndarray, k: int | None = None, vectors: bool = False, herm_tol: float = 1e-10):
    """The ``k`` smallest eigenvalues of a Hermitian operator, ascending."""
    m = H.dense if isinstance(H, Operator) else np.asarray(H)
    scale = max(float(np.abs(m).max(initial=0.0)), 1.0)
    if np.abs(m - m.conj().T).max(initial=0.0) > herm_tol * scale:
        raise ValueError("eigenenergies needs a Hermitian operator")
    k = m.shape[0] if k is None else k
    if not 0 < k <= m.shape[0]:
        raise ValueError(f"requested {k} levels from a {m.shape[0]}-dimensional space")
    w, v = np.linalg.eigh(0.5 * (m + m.conj().T))
    return (w[:k], v[:, :k]) if vectors else w[:k]


def lab_hamiltonian(params: ModelParams, omega_p: float, space: HilbertSpace) -> Operator:
    """omega_s n_s + omega_p n_p + omega_q n_b + g_col (a_s^dag s + h.c.) + J (a_p a_s^dag^2 + h.c.)."""
    p = params.validate()
    ap, as_, b = (annihilation(space, lbl) for lbl in ("p", "s", "b"))
    return (
        (p.omega_q + p.Delta_q) * number(space, "s")
        + omega_p * number(space, "p")
        + p.omega_q * number(space, "b")
        + p.g_col * (as_.dag() @ b + as_ @ b.dag())
        + p.J * (ap @ as_.dag() @ as_.dag() + ap.dag() @ as_ @ as_)
    )


def scan_space(truncations: Truncations = SCAN_TRUNCATIONS) -> HilbertSpace:
    t = truncations
    return make_space([("p", t.dim_p), ("s", t.dim_s), ("b", t.dim_b)])


def _relative_levels(params, omega_p, space, k):
    w, v = eigenenergies(lab_hamiltonian(params, omega_p, space), k, vectors=True)
    return w - w[0], v


@dataclass
class SpectrumScan:
    """Levels relative to the ground level, sorted per point; ``tracked`` follows eigenvector character."""

    omega_p_values: np.ndarray
    levels: np.ndarray
    tracked: np.ndarray
    params: ModelParams
    truncations: Truncations

    def __post_init__(self):
        if self.levels.shape[0] != len(self.omega_p_values):
            raise ValueError("one row of levels per scan point")

    @property
    def space(self) -> HilbertSpace:
        return scan_space(self.truncations)

    def levels_at(self, omega_p: float, k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        return _relative_levels(self.params, omega_p, self.space, k or self.levels.shape[1])


def scan_pump_frequency(
    params: ModelParams,
    wp_min: float = 1.96,
    wp_max: float = 2.06,
    points: int = 201,
    k: int = 6,
    truncations: Truncations = SCAN_TRUNCATIONS,
) -> SpectrumScan:
    if not wp_min < wp_max:
        raise ValueError("wp_min must be below wp_max")
    if k < 4:
        raise ValueError("k must be at least 4")
    if points < 3:
        raise ValueError("need at least 3 scan points")
    p = params.validate()
    space = scan_space(truncations)
    if k > space.dim:
        raise ValueError(f"k={k} exceeds the scan space dimension {space.dim}")
    grid = np.linspace(wp_min, wp_max, points)
    levels = np.empty((points, k))
    tracked = np.empty((points, k))
    prev = None
    for i, wp in enumerate(grid):
        w, v = _relative_levels(p, wp, space, k)
        levels[i] = w
        if prev is None:
            order = np.arange(k)
        else:
            # assign each previous curve to the current eigenvector it overlaps most
            overlap = np.abs(prev.conj().T @ v) ** 2
            order = np.full(k, -1)
            taken = set()
            for j in np.argsort(-overlap.max(axis=1)):
                for c in np.argsort(-overlap[j]):
                    if c not in taken:
                        order[j] = c
                        taken.add(c)
                        break
        tracked[i] = w[order]
        prev = v[:, order]
    return SpectrumScan(grid, levels, tracked, p, truncations)


@dataclass(frozen=True)
class Crossing:
    omega_p_star: float
    gap: float
    gap_over_chi: float
    predicted_location: float
    hybridization: tuple[float, float, float, float]  # |<pump photon|lower>|^2, |<two excitations|lower>|^2, same for upper


def avoided_crossing(scan: SpectrumScan, level_pair: tuple[int, int] = (3, 4), xtol: float = 1e-10) -> Crossing:
    """Minimum separation of two sorted levels, refined by golden-section search."""
    lo, hi = level_pair
    if not (0 <= lo < hi < scan.levels.shape[1]):
        raise ValueError(f"level_pair {level_pair} outside the {scan.levels.shape[1]} scanned levels")
    gaps = scan.levels[:, hi] - scan.levels[:, lo]
    i = int(np.argmin(gaps))
    if i == 0 or i == len(gaps) - 1:
        raise NoCrossingError("separation is smallest at the edge of the scan window")
    x = scan.omega_p_values

    def gap_at(wp):
        w, _ = scan.levels_at(wp, hi + 1)
        return w[hi] - w[lo]

    res = minimize_scalar(gap_at, bracket=(x[i - 1], x[i], x[i + 1]), method="golden", tol=xtol)
    wp_star = float(res.x)
    w, v = scan.levels_at(wp_star, hi + 1)
    space = scan.space
    pump = space.basis_index({"p": 1, "s": 0, "b": 0})
    pair = space.basis_index({"p": 0, "s": 0, "b": 2})
    hyb = tuple(float(abs(v[idx, n]) ** 2) for n in (lo, hi) for idx in (pump, pair))
    d = derive(scan.params)
    return Crossing(
        omega_p_star=wp_star,
        gap=float(w[hi] - w[lo]),
        gap_over_chi=float((w[hi] - w[lo]) / d.chi),
        predicted_location=2.0 * scan.params.omega_q + d.delta,
        hybridization=hyb,
    )
