"""Physical parameters, derived rates, and master equations for each model tier.

Frequencies are in units of omega_q. The Full tier is written in the frame
rotating at omega_q (n_s + n_b) + 2 omega_q n_p, which leaves only the
detunings Delta_q (signal) and delta (pump) on the diagonal.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, fields, replace

from .dynamics import CONSTANT, MasterEquation, TimeProfile
from .hilbert import HilbertSpace, annihilation, make_space, min_coherent_dim, number


class RegimeWarning(UserWarning):
    """Parameters leave the dispersive / adiabatic regime the reductions assume."""


class ModelTier(str, enum.Enum):
    FULL = "full"
    TIME_AVERAGED = "timeaveraged"
    ADIABATIC = "adiabatic"
    QUBIT = "qubit"

    @classmethod
    def parse(cls, name) -> "ModelTier":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "").replace("-", "")
        for tier in cls:
            if tier.value == key:
                return tier
        raise ValueError(f"unknown tier {name!r}; choose from {[t.value for t in cls]}")


@dataclass(frozen=True)
class Truncations:
    dim_p: int = 3
    dim_s: int = 4
    dim_b: int = 8


def default_dim_b(alpha: complex = 0.0) -> int:
    """Ensemble truncation for a coherent start of amplitude ``alpha``.

    max(8, ceil(|a|^2 + 4|a| + 3)), raised further if needed so the discarded
    Poisson weight of |alpha> stays below the coherent-state tail bound.
    """
    a = abs(alpha)
    return max(8, math.ceil(a * a + 4 * a + 3), min_coherent_dim(alpha))


def _two_excitation_rate(chi: float, kappa_p: float) -> float:
    """4 chi^2 / kappa_p; zero without parametric coupling, infinite without pump loss."""
    if chi == 0:
        return 0.0
    return 4.0 * chi * chi / kappa_p if kappa_p > 0 else math.inf


@dataclass(frozen=True)
class ModelParams:
    """User-facing parameters. ``None`` entries resolve to the standard operating point:
    J = 3 g_col, Delta_q = 20 g_col, kappa_p = 5 chi, kappa_s = 0.3 kappa_p,
    Omega_d = 0.1 kappa_2at, delta_inh = 0.1 delta_q."""

    omega_q: float = 1.0
    g_col: float = 0.03
    J: float | None = None
    Delta_q: float | None = None
    kappa_p: float | None = None
    kappa_s: float | None = None
    Omega_d: float | None = None
    theta_d: float = 0.0
    N_atoms: int = 6
    delta_inh: float | None = None
    truncations: Truncations = Truncations()

    def resolved(self) -> "ModelParams":
        g = self.g_col
        J = 3.0 * g if self.J is None else self.J
        Dq = 20.0 * g if self.Delta_q is None else self.Delta_q
        chi = g * g * J / (Dq * Dq) if Dq else math.nan
        kp = 5.0 * chi if self.kappa_p is None else self.kappa_p
        ks = 0.3 * kp if self.kappa_s is None else self.kappa_s
        k2 = _two_excitation_rate(chi, kp)
        Od = 0.1 * k2 if self.Omega_d is None else self.Omega_d
        dinh = (0.1 * g * g / Dq if Dq else math.nan) if self.delta_inh is None else self.delta_inh
        return replace(self, J=J, Delta_q=Dq, kappa_p=kp, kappa_s=ks, Omega_d=Od, delta_inh=dinh)

    def defaults_applied(self) -> list[str]:
        notes = {
            "J": "J = 3 g_col",
            "Delta_q": "Delta_q = 20 g_col",
            "kappa_p": "kappa_p = 5 chi",
            "kappa_s": "kappa_s = 0.3 kappa_p",
            "Omega_d": "Omega_d = 0.1 kappa_2at",
            "delta_inh": "delta_inh = 0.1 delta_q",
        }
        return [text for key, text in notes.items() if getattr(self, key) is None]

    def validate(self) -> "ModelParams":
        p = self.resolved()
        if not p.Delta_q > 0:
            raise ValueError(f"Delta_q must be > 0, got {p.Delta_q} (default is 20 g_col)")
        for f in ("omega_q", "g_col", "J", "Delta_q", "kappa_p", "kappa_s", "Omega_d", "delta_inh"):
            v = getattr(p, f)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f} must be finite and >= 0, got {v}")
        if not p.Delta_q > 0:
            raise ValueError(f"Delta_q must be > 0, got {p.Delta_q}")
        if int(p.N_atoms) < 1:
            raise ValueError(f"N_atoms must be positive, got {p.N_atoms}")
        return p

    def scaled(self, factor: float) -> "ModelParams":
        """All frequencies and rates multiplied by ``factor``."""
        p = self.resolved()
        keys = ("omega_q", "g_col", "J", "Delta_q", "kappa_p", "kappa_s", "Omega_d", "delta_inh")
        return replace(p, **{k: getattr(p, k) * factor for k in keys})


@dataclass(frozen=True)
class DerivedParams:
    chi: float
    kappa_2at: float
    delta_q_shift: float
    delta: float
    Delta_p: float
    gamma: float
    omega_d: float  # resonant with the Lamb-shifted ensemble line
    omega_s: float
    omega_p: float

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _pump_detuning(g: float, J: float, Dq: float) -> float:
    """delta solving delta = 2J^2/Delta_p - 2g^2/Delta_q with Delta_p = 2 Delta_q - delta.

    Rearranged: delta^2 - (a - b) delta - (a b - c) = 0 with a = 2 Delta_q,
    b = 2 g^2 / Delta_q, c = 2 J^2; the small root is the perturbative branch.
    """
    a, b, c = 2.0 * Dq, 2.0 * g * g / Dq, 2.0 * J * J
    disc = (a - b) ** 2 + 4.0 * (a * b - c)
    if disc < 0:
        raise ValueError("no real pump detuning compensates the level shifts")
    return 0.5 * ((a - b) - math.sqrt(disc))


def derive(params: ModelParams) -> DerivedParams:
    p = params.validate()
    g, J, Dq = p.g_col, p.J, p.Delta_q
    if g / Dq > 0.1:
        warnings.warn(f"g_col/Delta_q = {g / Dq:.3g} > 0.1: not largely detuned", RegimeWarning, stacklevel=2)
    chi = g * g * J / (Dq * Dq)
    delta = _pump_detuning(g, J, Dq)
    Dp = 2.0 * Dq - delta
    if not Dp > 0:
        raise ValueError(f"pump detuning Delta_p = {Dp:.6g} is not positive")
    if J / Dp > 0.1:
        warnings.warn(f"J/Delta_p = {J / Dp:.3g} > 0.1: not largely detuned", RegimeWarning, stacklevel=2)
    k2 = _two_excitation_rate(chi, p.kappa_p)
    dq = g * g / Dq
    if k2 > 0:
        gamma = 4.0 * p.Omega_d**2 / k2
    else:
        gamma = 0.0 if p.Omega_d == 0 else math.inf
    return DerivedParams(
        chi=chi,
        kappa_2at=k2,
        delta_q_shift=dq,
        delta=delta,
        Delta_p=Dp,
        gamma=gamma,
        omega_d=p.omega_q - dq,
        omega_s=p.omega_q + Dq,
        omega_p=2.0 * p.omega_q + delta,
    )


def second_order_shifts(params: ModelParams) -> dict[str, float]:
    """Dispersive shifts per ensemble excitation and per pump photon."""
    p = params.validate()
    d = derive(p)
    return {
        "lamb_shift_ensemble": -p.g_col**2 / p.Delta_q,
        "pump_shift": -2.0 * p.J**2 / d.Delta_p,
    }


def tier_space(tier: ModelTier | str, truncations: Truncations) -> HilbertSpace:
    tier = ModelTier.parse(tier)
    t = truncations
    if tier is ModelTier.FULL:
        return make_space([("p", t.dim_p), ("s", t.dim_s), ("b", t.dim_b)])
    if tier is ModelTier.TIME_AVERAGED:
        return make_space([("p", t.dim_p), ("b", t.dim_b)])
    if tier is ModelTier.ADIABATIC:
        return make_space([("b", t.dim_b)])
    return make_space([("q", 2)])


def build_full(params: ModelParams, truncations: Truncations | None = None) -> MasterEquation:
    p = params.validate()
    d = derive(p)
    space = tier_space(ModelTier.FULL, truncations or p.truncations)
    ap, as_, b = (annihilation(space, lbl) for lbl in ("p", "s", "b"))
    H = (
        p.Delta_q * number(space, "s")
        + d.delta * number(space, "p")
        + p.g_col * (as_.dag() @ b + as_ @ b.dag())
        + p.J * (ap @ as_.dag() @ as_.dag() + ap.dag() @ as_ @ as_)
    )
    return MasterEquation(space, ((H, CONSTANT),), ((p.kappa_p, ap), (p.kappa_s, as_)))


def build_time_averaged(params: ModelParams, truncations: Truncations | None = None) -> MasterEquation:
    p = params.validate()
    d = derive(p)
    space = tier_space(ModelTier.TIME_AVERAGED, truncations or p.truncations)
    ap, b = annihilation(space, "p"), annihilation(space, "b")
    H = d.chi * (ap @ b.dag() @ b.dag() + ap.dag() @ b @ b)
    return MasterEquation(space, ((H, CONSTANT),), ((p.kappa_p, ap),))


def build_adiabatic(params: ModelParams, truncations: Truncations | None = None) -> MasterEquation:
    p = params.validate()
    d = derive(p)
    space = tier_space(ModelTier.ADIABATIC, truncations or p.truncations)
    b = annihilation(space, "b")
    return MasterEquation(space, (), ((d.kappa_2at, b @ b),))


def build_drive(params: ModelParams, frame: ModelTier | str, space: HilbertSpace | None = None):
    """Resonant drive Omega_d (e^{-i theta} s + e^{i theta} s^dag) as Hamiltonian terms.

    In the Full-tier frame the drive tracks the dressed ensemble line, which
    sits at the Lamb shift -delta_q, so the lowering part carries e^{-i delta_q t}.
    """
    p = params.validate()
    frame = ModelTier.parse(frame)
    if space is None:
        space = tier_space(frame, p.truncations)
    label = "q" if frame is ModelTier.QUBIT else "b"
    s = annihilation(space, label)
    lower = complex(math.cos(p.theta_d), -math.sin(p.theta_d)) * p.Omega_d
    if frame is ModelTier.FULL:
        w = -derive(p).delta_q_shift
        return ((s, TimeProfile(lower, w)), (s.dag(), TimeProfile(lower.conjugate(), -w)))
    return ((lower * s + lower.conjugate() * s.dag(), CONSTANT),)


def build_qubit(params: ModelParams) -> MasterEquation:
    p = params.validate()
    d = derive(p)
    space = tier_space(ModelTier.QUBIT, p.truncations)
    sm = annihilation(space, "q")  # |0><1| on a two-level mode
    return MasterEquation(space, build_drive(p, ModelTier.QUBIT, space), ((d.gamma, sm),))


BUILDERS = {
    ModelTier.FULL: build_full,
    ModelTier.TIME_AVERAGED: build_time_averaged,
    ModelTier.ADIABATIC: build_adiabatic,
}


def build_tier(tier: ModelTier | str, params: ModelParams, truncations: Truncations | None = None) -> MasterEquation:
    tier = ModelTier.parse(tier)
    if tier is ModelTier.QUBIT:
        return build_qubit(params)
    return BUILDERS[tier](params, truncations)
