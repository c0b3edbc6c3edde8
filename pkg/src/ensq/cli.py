"""Command-line runner: ``ensq <params|spectrum|stabilize|rabi|broadening>``.

Exit codes: 0 success, 2 configuration error, 3 physics or budget guard,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import math
import sys
import warnings
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .broadening import ideal_modulus, phase_linearity, seed_study
from .config import KEYS, ConfigError, format_value, header_lines, normalize_key, read_config_file, resolve
from .dynamics import RK45, IntegrationError, IntegratorConfig, NonConvergenceError
from .effective import (
    RABI_DIM_B,
    BudgetError,
    ValidityError,
    default_truncations,
    fit_rabi,
    rabi_experiment,
    stabilization_experiment,
)
from .hilbert import TruncationError
from .model import ModelParams, ModelTier, RegimeWarning, Truncations, derive
from .spectrum import SCAN_TRUNCATIONS, NoCrossingError, avoided_crossing, scan_pump_frequency

COMMANDS = ("params", "spectrum", "stabilize", "rabi", "broadening")
EXIT_CONFIG, EXIT_GUARD, EXIT_NUMERIC = 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _num(x: float) -> str:
    return format(float(x), ".9g")


def build_params(values: dict[str, Any]) -> ModelParams:
    base = ModelParams(
        omega_q=values["omega_q"],
        g_col=values["g_col"],
        J=values["j"],
        Delta_q=values["delta_q"],
        kappa_p=values["kappa_p"],
        kappa_s=values["kappa_s"],
        theta_d=values["theta_d"],
        N_atoms=values["n_atoms"],
    )
    d = derive(base)
    # drive and disorder are given relative to the rates they perturb
    return replace(
        base,
        Omega_d=values["omega_d"] * d.kappa_2at,
        delta_inh=values["delta_inh"] * d.delta_q_shift,
    )


def _integrator(values) -> IntegratorConfig | None:
    method = values["method"]
    if method == "auto":
        if values["dt_factor"] != KEYS["dt_factor"].default:
            return IntegratorConfig(dt_factor=values["dt_factor"])
        return None
    if method == "rk4":
        return IntegratorConfig(dt_factor=values["dt_factor"])
    if method == "rk45":
        return RK45
    raise ConfigError(f"bad value for 'method': {method!r} (auto, rk4 or rk45)")


class Output:
    """CSV writer with ``#`` metadata lines and ``.9g`` numbers."""

    def __init__(self, command: str, values: dict[str, Any], seed: int):
        self.lines = [f"# ensq {__version__}", f"# command = {command}", f"# seed = {seed}"]
        self.lines += header_lines(values)

    def comment(self, key: str, value) -> None:
        text = _num(value) if isinstance(value, (float, int, np.floating)) and not isinstance(value, bool) else str(value)
        self.lines.append(f"# {key} = {text}")

    def table(self, columns: list[str], rows: np.ndarray) -> None:
        self.lines.append(",".join(columns))
        for row in rows:
            self.lines.append(",".join(_num(v) for v in row))

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.lines) + "\n")


def _time_columns(values, t_dimless: np.ndarray, rate_omega_q: float, columns, data):
    """Append t_us when g_col in MHz is given: t_us = t_dimless / rate / omega_q[1/us]."""
    if values["gcol_mhz"] is None:
        return columns, data
    omega_q_per_us = 2.0 * math.pi * values["gcol_mhz"] / values["g_col"]
    t_us = t_dimless / rate_omega_q / omega_q_per_us
    return columns + ["t_us"], np.column_stack([data, t_us])


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise IntegrationError(f"non-finite values in {what}")


def cmd_params(values, out_dir: Path, threads: int, seed_base: int) -> int:
    p = build_params(values)
    d = derive(p)
    rows = [
        ("chi", d.chi, "omega_q"),
        ("kappa_2at", d.kappa_2at, "omega_q"),
        ("delta_q", d.delta_q_shift, "omega_q"),
        ("delta", d.delta, "omega_q"),
        ("Delta_p", d.Delta_p, "omega_q"),
        ("gamma", d.gamma, "omega_q"),
        ("omega_d", d.omega_d, "omega_q"),
        ("omega_p", d.omega_p, "omega_q"),
        ("kappa_p", p.resolved().kappa_p, "omega_q"),
        ("kappa_s", p.resolved().kappa_s, "omega_q"),
        ("Omega_d", p.resolved().Omega_d, "omega_q"),
    ]
    raw = ModelParams(g_col=values["g_col"], J=values["j"], Delta_q=values["delta_q"], kappa_p=values["kappa_p"], kappa_s=values["kappa_s"])
    for name, value, unit in rows:
        print(f"{name} = {_num(value)} {unit}")
    for note in raw.defaults_applied():
        print(f"default: {note}")
    return 0


def cmd_spectrum(values, out_dir: Path, threads: int, seed_base: int) -> int:
    p = build_params(values)
    k = values["levels"]
    scan = scan_pump_frequency(p, values["wp_min"], values["wp_max"], values["points"], k, SCAN_TRUNCATIONS)
    crossing = avoided_crossing(scan)
    out = Output("spectrum", values, seed_base)
    out.comment("energy_reference", "ground level at each pump frequency")
    out.table(["omega_p_over_omega_q"] + [f"level_{i}" for i in range(k)], np.column_stack([scan.omega_p_values, scan.levels]))
    out.comment("gap_over_chi", crossing.gap_over_chi)
    out.comment("gap", crossing.gap)
    out.comment("omega_p_star", crossing.omega_p_star)
    out.comment("predicted_omega_p_star", crossing.predicted_location)
    out.write(out_dir / "spectrum.csv")
    return 0


def _alpha_tag(alpha: complex) -> str:
    alpha = complex(alpha)
    tag = f"{alpha.real:g}" if alpha.imag == 0 else f"{alpha.real:g}{alpha.imag:+g}j"
    return tag.replace(".", "p").replace("+", "p").replace("-", "m")


def cmd_stabilize(values, out_dir: Path, threads: int, seed_base: int) -> int:
    p = build_params(values)
    d = derive(p)
    tiers = [ModelTier.parse(t) for t in values["tiers"]]
    for alpha in values["alpha"]:
        truncs = {}
        for tier in tiers:
            auto = default_truncations(tier, alpha)
            truncs[tier.value] = Truncations(
                dim_p=values["dim_p"] or auto.dim_p,
                dim_s=values["dim_s"] or auto.dim_s,
                dim_b=values["dim_b"] or auto.dim_b,
            )
        comp = stabilization_experiment(
            p, alpha, [t.value for t in tiers], values["t_end"], values["points"], truncs, _integrator(values), threads
        )
        columns, data = ["t_chi"], [comp.times]
        for name in comp.tiers:
            for col in ("eta", "trace_err", "parity"):
                columns.append(f"{col}_{name}")
                data.append(comp.series[name][col])
        data = np.column_stack(data)
        _check_finite(data, "stabilization output")
        columns, data = _time_columns(values, comp.times, d.chi, columns, data)
        out = Output("stabilize", values, seed_base)
        out.comment("alpha", format_value(complex(alpha)))
        out.table(columns, data)
        for name in comp.tiers:
            out.comment(f"final_eta_{name}", comp.series[name]["eta"][-1])
            out.comment(f"truncations_{name}", "{dim_p},{dim_s},{dim_b}".format(**truncs[name].__dict__))
        if values["gcol_mhz"] is not None:
            out.comment("t_us_note", "t_us = chi t / chi with chi taken from gcol_mhz; no further calibration")
        out.write(out_dir / f"stabilize_alpha{_alpha_tag(alpha)}.csv")
    return 0


def cmd_rabi(values, out_dir: Path, threads: int, seed_base: int) -> int:
    p = build_params(values)
    d = derive(p)
    dim_b = values["dim_b"] or RABI_DIM_B
    comp = rabi_experiment(p, values["tiers"], values["t_end"], values["points"], dim_b, _integrator(values), threads, fit=False)
    fits, fit_error = {}, None
    if p.Omega_d > 0:
        try:
            for name in comp.tiers:
                fits[name] = fit_rabi(comp.times, comp.series[name]["P1"])
        except ValidityError as exc:
            fits, fit_error = {}, str(exc)
            print(f"ensq: no decay fit: {exc}", file=sys.stderr)
    columns, data = ["t_k2at"], [comp.times]
    for name in comp.tiers:
        columns += [f"P0_{name}", f"P1_{name}"]
        data += [comp.series[name]["P0"], comp.series[name]["P1"]]
    data = np.column_stack(data)
    _check_finite(data, "Rabi output")
    columns, data = _time_columns(values, comp.times, d.kappa_2at, columns, data)
    out = Output("rabi", values, seed_base)
    out.table(columns, data)
    if fits:
        primary = "adiabatic" if "adiabatic" in fits else comp.tiers[0]
        out.comment("gamma_over_k2at", fits[primary]["gamma"])
        out.comment("fit_tier", primary)
        for name in comp.tiers:
            out.comment(f"gamma_over_k2at_{name}", fits[name]["gamma"])
            out.comment(f"omega_over_k2at_{name}", fits[name]["omega"])
    elif fit_error:
        out.comment("fit_unavailable", fit_error)
    out.comment("gamma_predicted_over_k2at", d.gamma / d.kappa_2at)
    out.write(out_dir / "rabi.csv")
    return 0


def cmd_broadening(values, out_dir: Path, threads: int, seed_base: int) -> int:
    p = build_params(values)
    d = derive(p)
    alphas = values["alpha"]
    if len(alphas) != 1:
        raise ConfigError("broadening takes a single alpha")
    alpha = alphas[0]
    n_seeds = values["seeds"]
    if n_seeds < 1:
        raise ConfigError("seeds must be >= 1")
    seeds = [seed_base + i for i in range(n_seeds)]
    pairs = seed_study(p, seeds, values["t_end"], values["points"], alpha, values["atom_dim"], values["max_excitations"] or None, threads)
    ideal = ideal_modulus(alpha)
    cols = ["t_k2at", "modulus_protected", "phase_protected", "modulus_unprotected", "phase_unprotected"]
    stack = []
    for seed, (prot, unprot) in zip(seeds, pairs):
        t = prot.times * d.kappa_2at
        data = np.column_stack([t, prot.modulus, prot.phase, unprot.modulus, unprot.phase])
        _check_finite(data, "broadening output")
        stack.append(data[:, 1:])
        columns, table = _time_columns(values, t, d.kappa_2at, cols, data)
        out = Output("broadening", values, seed)
        out.comment("detunings_over_delta_q", " ".join(_num(x / d.delta_q_shift) for x in prot.deltas))
        out.table(columns, table)
        out.comment("ideal_modulus", ideal)
        try:
            fit = phase_linearity(prot, d.delta_q_shift)
        except ValueError as exc:
            out.comment("phase_fit_unavailable", str(exc))
        else:
            out.comment("phase_slope_over_delta_q", fit.slope)
            out.comment("phase_r_squared", fit.r_squared)
        out.write(out_dir / f"broadening_seed{seed}.csv")
    arr = np.array(stack)
    mean, std = arr.mean(axis=0), arr.std(axis=0, ddof=1) if len(stack) > 1 else np.zeros_like(arr[0])
    agg_cols = ["t_k2at"]
    agg = [pairs[0][0].times * d.kappa_2at]
    for j, name in enumerate(cols[1:]):
        agg_cols += [f"{name}_mean", f"{name}_std"]
        agg += [mean[:, j], std[:, j]]
    columns, table = _time_columns(values, agg[0], d.kappa_2at, agg_cols, np.column_stack(agg))
    out = Output("broadening", values, seed_base)
    out.comment("seeds", f"{seeds[0]}..{seeds[-1]}")
    out.table(columns, table)
    out.comment("ideal_modulus", ideal)
    out.comment("final_modulus_protected_mean", mean[-1, 0])
    out.comment("final_modulus_protected_std", std[-1, 0])
    out.comment("final_modulus_unprotected_mean", mean[-1, 2])
    out.comment("final_modulus_unprotected_std", std[-1, 2])
    out.write(out_dir / "broadening_aggregate.csv")
    return 0


HANDLERS = {
    "params": cmd_params,
    "spectrum": cmd_spectrum,
    "stabilize": cmd_stabilize,
    "rabi": cmd_rabi,
    "broadening": cmd_broadening,
}


def _split_flags(extra: Sequence[str]) -> dict[str, str]:
    flags: dict[str, str] = {}
    items = list(extra)
    i = 0
    while i < len(items):
        item = items[i]
        if not item.startswith("--"):
            raise ConfigError(f"unexpected argument {item!r}")
        if "=" in item:
            key, value = item[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(items):
                raise ConfigError(f"missing value for {item}")
            key, value = item[2:], items[i + 1]
            i += 2
        flags[normalize_key(key)] = value
    return flags


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ensq", description="Ensemble qubit stabilized by two-excitation loss: experiment runner.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key = value file, or a results CSV to rerun")
    parser.add_argument("--out", default=".", help="output directory (default: current)")
    parser.add_argument("--threads", type=int, default=1, help="worker processes for independent runs")
    parser.add_argument("--seed-base", type=int, default=None, help="first disorder seed (default 0)")
    parser.epilog = "Model and experiment keys are passed as --key value: " + ", ".join(sorted(KEYS))
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if any(a in ("-h", "--help") for a in argv):
        make_parser().print_help()
        return 0
    try:
        args, extra = make_parser().parse_known_args(argv)
        file_values = read_config_file(args.config) if args.config else {}
        flags = _split_flags(extra)
        if args.seed_base is not None:
            flags["seed_base"] = str(args.seed_base)
        values = resolve(args.command, file_values, flags)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        with warnings.catch_warnings():
            warnings.simplefilter("always", RegimeWarning)
            return HANDLERS[args.command](values, Path(args.out), args.threads, values["seed_base"])
    except ConfigError as exc:
        print(f"ensq: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BudgetError, TruncationError, ValidityError, NoCrossingError, NonConvergenceError) as exc:
        print(f"ensq: {exc}", file=sys.stderr)
        return EXIT_GUARD
    except (IntegrationError, FloatingPointError) as exc:
        print(f"ensq: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # parameter validation (negative rates, unsolvable detunings)
        print(f"ensq: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
