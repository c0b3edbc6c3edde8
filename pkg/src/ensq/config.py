"""Flat ``key = value`` run configuration shared by all subcommands.

Keys are case-insensitive and ``-`` is read as ``_``. Values are numbers,
booleans, strings or comma lists. A results CSV can be used as a config file:
its ``#@ key = value`` header lines hold the resolved configuration.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float(text: str) -> float:
    return float(text)


def _int(text: str) -> int:
    v = float(text)
    if v != int(v):
        raise ValueError(f"not an integer: {text!r}")
    return int(v)


def _complex_list(text: str) -> list[complex]:
    return [complex(part.strip().replace(" ", "")) for part in text.split(",") if part.strip()]


def _str_list(text: str) -> list[str]:
    return [part.strip().lower() for part in text.split(",") if part.strip()]


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none", "default") else float(text)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


def _fmt_complex(z: complex) -> str:
    z = complex(z)
    return repr(z.real) if z.imag == 0 else repr(z).strip("()")


# Frequencies in units of omega_q unless stated.
KEYS: dict[str, Key] = {
    "omega_q": Key(_float, 1.0, "ensemble transition frequency (unit)"),
    "g_col": Key(_float, 0.03, "collective ensemble-signal coupling"),
    "j": Key(_opt_float, None, "pump-signal parametric coupling (default 3 g_col)"),
    "delta_q": Key(_opt_float, None, "signal-ensemble detuning (default 20 g_col)"),
    "kappa_p": Key(_opt_float, None, "pump loss rate (default 5 chi)"),
    "kappa_s": Key(_opt_float, None, "signal loss rate (default 0.3 kappa_p)"),
    "omega_d": Key(_float, 0.1, "drive amplitude in units of kappa_2at"),
    "theta_d": Key(_float, 0.0, "drive phase in radians"),
    "n_atoms": Key(_int, 6, "atoms in the broadening model"),
    "delta_inh": Key(_float, 0.1, "rms inhomogeneous detuning in units of delta_q"),
    "dim_p": Key(_int, 0, "pump truncation (0: automatic)"),
    "dim_s": Key(_int, 4, "signal truncation"),
    "dim_b": Key(_int, 0, "ensemble truncation (0: automatic)"),
    "alpha": Key(_complex_list, [1.0], "initial coherent amplitudes, one output file each"),
    "tiers": Key(_str_list, None, "model tiers to compare"),
    "t_end": Key(_opt_float, None, "run length: chi t (stabilize) or kappa_2at t (rabi, broadening)"),
    "points": Key(_int, 0, "output rows (0: per-command default)"),
    "levels": Key(_int, 6, "spectrum levels to report"),
    "wp_min": Key(_float, 1.96, "spectrum scan start, pump frequency"),
    "wp_max": Key(_float, 2.06, "spectrum scan end, pump frequency"),
    "seeds": Key(_int, 10, "disorder realizations"),
    "seed_base": Key(_int, 0, "first disorder seed"),
    "atom_dim": Key(_int, 4, "per-atom truncation in the broadening model"),
    "max_excitations": Key(_int, 3, "total excitation cap in the broadening model (0: none)"),
    "method": Key(lambda s: s.strip().lower(), "auto", "integrator: auto, rk4 or rk45"),
    "dt_factor": Key(_float, 0.02, "fixed step as a fraction of 1/nu_max"),
    "gcol_mhz": Key(_opt_float, None, "g_col / 2 pi in MHz; adds a t_us column"),
}

COMMAND_DEFAULTS: dict[str, dict[str, Any]] = {
    "stabilize": {"tiers": ["timeaveraged", "adiabatic"], "t_end": 2.0, "points": 101},
    "rabi": {"tiers": ["adiabatic", "qubit"], "t_end": 200.0, "points": 2001},
    "broadening": {"t_end": 20.0, "points": 201},
    "spectrum": {"points": 201},
    "params": {},
}


def normalize_key(key: str) -> str:
    k = key.strip().lower()
    if k.startswith("--"):
        k = k[2:]
    return k.replace("-", "_")


def parse_assignments(lines, source: str) -> dict[str, str]:
    """Raw ``key = value`` pairs. If any ``#@`` line is present only those are read."""
    lines = list(lines)
    header = [ln[2:] for ln in lines if ln.startswith("#@")]
    use = header if header else [ln for ln in lines if not ln.lstrip().startswith("#")]
    out: dict[str, str] = {}
    for n, raw in enumerate(use, 1):
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {n}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[normalize_key(key)] = value.strip()
    return out


def read_config_file(path: str | Path) -> dict[str, str]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc.strerror}") from None
    return parse_assignments(text.splitlines(), str(p))


def resolve(command: str, file_values: Mapping[str, str], flag_values: Mapping[str, str]) -> dict[str, Any]:
    """Defaults, then file values, then flags. Unknown keys and bad values raise ConfigError."""
    values = {k: v.default for k, v in KEYS.items()}
    values.update(COMMAND_DEFAULTS.get(command, {}))
    for origin, raw in (("config file", file_values), ("command line", flag_values)):
        for key, text in raw.items():
            if key not in KEYS:
                raise ConfigError(f"unknown key {key!r} ({origin})")
            try:
                values[key] = KEYS[key].parse(text)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {key!r} ({origin}): {text!r} ({exc})") from None
    return values


def format_value(value: Any) -> str:
    if value is None:
        return "default"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(_fmt_complex(v) if isinstance(v, complex) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, complex):
        return _fmt_complex(value)
    return str(value)


def header_lines(values: Mapping[str, Any]) -> list[str]:
    return [f"#@ {k} = {format_value(values[k])}" for k in sorted(values)]
