"""Command-line interface: analyze, verify, simulate, examples.

Exit codes: 0 success, 1 configuration error, 2 domain error, 3 a residual over tolerance.
stdout carries only the requested artifact; diagnostics go to stderr.
"""
from __future__ import annotations

import json
import math
import sys
from pathlib import Path

import click
import numpy as np

from . import curvature, fpe
from .errors import (ArityError, CFLViolation, DomainError, ExprSyntaxError, GammazError, NonFinite,
                     SchemaError, UnknownExample, UnknownIdentifier)
from .fields import (BUILTINS, admissible_box, builtin, check_domain, hormander_rank,
                     invariant_measure_residual, load_structure, sample_points,
                     stationarity_residual)
from .gamma import bochner_correction, gamma2_direct, gamma2_laplacian
from .polynomials import PolynomialFamily
from .tensor import LAMBDA_TOL, MODES, assemble, decomposition_residual

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DOMAIN, EXIT_TOLERANCE = 0, 1, 2, 3
DEFAULT_MAX_CELLS = 10_000
CONFIG_ERRORS = (SchemaError, UnknownExample, ExprSyntaxError, UnknownIdentifier, ArityError, ValueError,
                 CFLViolation, OSError)
DOMAIN_ERRORS = (DomainError, NonFinite, FloatingPointError)


class ConfigError(click.ClickException):
    exit_code = EXIT_CONFIG


# ---------------------------------------------------------------- serialization

def _encode(obj, indent: int, level: int) -> str:
    pad, inner = " " * (indent * level), " " * (indent * (level + 1))
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(inner + _encode(v, indent, level + 1) for v in obj) + "\n" + pad + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return format(v, ".17g") if math.isfinite(v) else "null"
    if obj is None:
        return "null"
    return json.dumps(str(obj))


def dumps(obj) -> str:
    """Deterministic JSON with floats at 17 significant digits; non-finite floats become null."""
    return _encode(obj, 2, 0) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


# ---------------------------------------------------------------- configuration

def _param_value(raw: str):
    try:
        v = float(raw)
    except ValueError:
        return raw
    return int(v) if v.is_integer() and "." not in raw and "e" not in raw.lower() else v


def _parse_params(pairs) -> dict:
    out = {}
    for item in pairs:
        key, sep, val = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--param expects k=v, got {item!r}")
        out[key.strip()] = _param_value(val.strip())
    return out


def _structure(builtin_name, config_path, params):
    if bool(builtin_name) == bool(config_path):
        raise ConfigError("give exactly one of --builtin NAME or --config PATH")
    if builtin_name:
        return builtin(builtin_name, params)
    try:
        cfg = json.loads(Path(config_path).read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{config_path}: invalid JSON ({err})")
    if params:
        cfg = dict(cfg)
        cfg["params"] = {**cfg.get("params", {}), **params}
    return load_structure(cfg)


def _box(S, box_spec):
    if box_spec is None:
        return admissible_box(S)
    return curvature.parse_box(box_spec, S.dim)


def common_options(fn):
    opts = [
        click.option("--builtin", "builtin_name", help="Name of a built-in structure."),
        click.option("--config", "config_path", type=click.Path(), help="JSON structure file."),
        click.option("--param", "params", multiple=True, help="Parameter override k=v (repeatable)."),
        click.option("--mode", default="generalized", show_default=True,
                     type=click.Choice(list(MODES))),
        click.option("--drift", is_flag=True, help="Use the drift-clock generator L + 2b·grad."),
        click.option("--weight", default="vol", show_default=True, help="vol or custom:EXPR (log weight)."),
        click.option("--box", "box_spec", help="lo:hi[,lo:hi...]; defaults to an admissible box."),
        click.option("--res", default=None, help="N[,N...] grid points per axis."),
        click.option("--out", help="Write the artifact to this path instead of stdout."),
        click.option("--format", "fmt", default="json", show_default=True, type=click.Choice(["json", "csv"])),
        click.option("--seed", default=0, show_default=True, type=int),
        click.option("--tol-lambda", default=LAMBDA_TOL, show_default=True, type=float),
        click.option("--tol-decomp", default=1e-8, show_default=True, type=float),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _header(command: str, S, mode, drift, weight, seed) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": command,
            "structure": {"name": S.name, "params": {k: v for k, v in sorted(S.params.items())}},
            "mode": mode, "drift": bool(drift), "weight": weight, "seed": seed}


# ---------------------------------------------------------------- commands

@click.group()
def cli():
    """Generalized Gamma z calculus: curvature bounds, identity checks and Fokker-Planck runs."""


@cli.command()
@common_options
def analyze(builtin_name, config_path, params, mode, drift, weight, box_spec, res, out, fmt, seed,
            tol_lambda, tol_decomp):
    """Scan κ(x) over a box and report the minimum."""
    S = _structure(builtin_name, config_path, _parse_params(params))
    box = _box(S, box_spec)
    report = curvature.scan(S, box, res or "5", mode, drift, weight, seed=seed, lambda_tol=tol_lambda)
    if fmt == "csv":
        _emit(report.to_csv(S.variables), out)
    else:
        doc = _header("analyze", S, mode, drift, weight, seed)
        doc["tolerances"] = {"lambda": tol_lambda}
        doc.update(report.to_dict())
        _emit(dumps(doc), out)
    ok = [r for r in report.records if r["status"] == "ok"]
    if not ok and report.records:
        click.echo("no grid point could be evaluated", err=True)
        sys.exit(EXIT_DOMAIN)
    if any(r["lambda_residual"] > tol_lambda for r in ok):
        click.echo(f"Λ residual above {tol_lambda:g} at {sum(r['lambda_residual'] > tol_lambda for r in ok)} "
                   "point(s)", err=True)
        sys.exit(EXIT_TOLERANCE)


def _check(name, value, tol, **extra) -> dict:
    return {"check": name, "value": value, "tolerance": tol,
            "passed": bool(value is not None and value <= tol), **extra}


@cli.command()
@common_options
@click.option("--points", default=10, show_default=True, type=int, help="Random points per check.")
@click.option("--functions", default=20, show_default=True, type=int, help="Random polynomials per point.")
@click.option("--weak-res", default=0, show_default=True, type=int,
              help="Also run the weak commutator check at this resolution per axis (0 skips).")
def verify(builtin_name, config_path, params, mode, drift, weight, box_spec, res, out, fmt, seed,
           tol_lambda, tol_decomp, points, functions, weak_res):
    """Check the algebraic identities at random points against the direct oracles."""
    S = _structure(builtin_name, config_path, _parse_params(params))
    rng = np.random.default_rng(seed)
    if box_spec is None and S.name in BUILTINS:
        pts = sample_points(S, points, rng)
    else:
        box = np.array(_box(S, box_spec))
        pts = rng.uniform(box[:, 0], box[:, 1], (points, S.dim))
    for x in pts:
        check_domain(S, x)
    checks = []

    sym_res = invariant_measure_residual(S, pts)
    if sym_res <= 1e-10:
        checks.append(_check("invariant_measure", sym_res, 1e-10, kind="symmetric"))
    else:
        stat = stationarity_residual(S, pts)
        checks.append(_check("invariant_measure", stat, 1e-10, kind="stationary, not symmetric",
                             symmetric_residual=sym_res))

    fam = PolynomialFamily(S.dim, functions, rng)
    dec, lam, boch = [], [], []
    with np.errstate(all="raise"):
        for x in pts:
            ap = assemble(S, x)
            chk = decomposition_residual(S, fam.jet(x), x, mode, drift, weight, ap)
            dec.append(float(chk))
            lam.append(chk.lambda_residual)
            fj = fam.jet(x)
            direct = gamma2_laplacian(S, fj, x) - gamma2_direct(S, fj, x)
            closed = bochner_correction(S, x)(fj.d1)
            boch.append(float(np.max(np.abs(direct - closed) / (1 + np.abs(direct)))))
    checks.append(_check("lambda_residual", max(lam), tol_lambda))
    checks.append(_check("decomposition", max(dec), tol_decomp))
    checks.append(_check("bochner_correction", max(boch), tol_decomp))
    if weak_res:
        if S.m_z == 0:
            raise ConfigError("the weak commutator check needs z columns")
        box = _box(S, box_spec)
        grid = fpe.Grid(tuple(b[0] for b in box), tuple(b[1] for b in box), (weak_res,) * S.dim)
        # distinct weights keep h free of coordinate-swap symmetries that would make both sides vanish
        h = " + ".join(f"sin({v})/{i + 1}" for i, v in enumerate(S.variables)) + " + " + "*".join(S.variables[:2])
        w = fpe.weak_identity_check(S, h, grid=grid)
        checks.append(_check("weak_commutator", w["gap"], 1e-3, lhs=w["lhs"], rhs=w["rhs"]))
    rank, depth = hormander_rank(S, pts[0], 3)
    doc = _header("verify", S, mode, drift, weight, seed)
    doc.update(points=len(pts), functions=functions, checks=checks,
               hormander={"rank": rank, "depth": depth, "dim": S.dim},
               passed=all(c["passed"] for c in checks))
    if fmt == "csv":
        lines = ["check,value,tolerance,passed"]
        lines += [f"{c['check']},{curvature._fmt(c['value'])},{c['tolerance']!r},{str(c['passed']).lower()}"
                  for c in checks]
        _emit("\n".join(lines) + "\n", out)
    else:
        _emit(dumps(doc), out)
    for c in checks:
        click.echo(f"{'PASS' if c['passed'] else 'FAIL'}  {c['check']:<20} {c['value']:.3e} "
                   f"(tol {c['tolerance']:.0e})", err=True)
    if not doc["passed"]:
        sys.exit(EXIT_TOLERANCE)


@cli.command()
@common_options
@click.option("--T", "T", default=2.0, show_default=True, type=float, help="Final time.")
@click.option("--dt", default="auto", show_default=True, help="Time step or 'auto' (CFL bound).")
@click.option("--init", default="perturbed", show_default=True,
              type=click.Choice(["perturbed", "random", "steady"]))
@click.option("--samples", default=200, show_default=True, type=int, help="Approximate number of samples.")
@click.option("--summary", "summary_path", help="Write the summary JSON here (CSV format only).")
@click.option("--max-cells", default=DEFAULT_MAX_CELLS, show_default=True, type=int,
              help="Refuse grids with more cells than this.")
def simulate(builtin_name, config_path, params, mode, drift, weight, box_spec, res, out, fmt, seed,
             tol_lambda, tol_decomp, T, dt, init, samples, summary_path, max_cells):
    """Run the Fokker-Planck flow and fit the Fisher-information decay rate."""
    S = _structure(builtin_name, config_path, _parse_params(params))
    box = _box(S, box_spec)
    cells = curvature.parse_res(res or ("32" if S.dim <= 2 else "16"), S.dim)
    total = int(np.prod(cells))
    if total > max_cells:
        raise ConfigError(f"grid of {total} cells exceeds the limit of {max_cells} (raise --max-cells)")
    grid = fpe.Grid(tuple(b[0] for b in box), tuple(b[1] for b in box), tuple(cells))
    if init == "steady":
        rho0 = fpe.steady_state(S, grid)
    elif init == "random":
        rho0 = fpe.random_smooth_density(S, grid, np.random.default_rng(seed))
    else:
        rho0 = fpe.perturbed_density(S, grid)
    step_dt = fpe.cfl_dt(S, grid) if dt == "auto" else float(dt)
    nsteps = max(1, math.ceil(T / step_dt - 1e-9))
    ts = fpe.simulate(S, rho0, T, step_dt, max(1, nsteps // max(samples, 1)))
    use_drift = drift or S.has_drift
    kscan = curvature.scan(S, box, [5] * S.dim, mode, use_drift, weight, lambda_tol=tol_lambda)
    kappa = kscan.summary["min_kappa"]
    summary = _header("simulate", S, mode, use_drift, weight, seed)
    summary.update(grid={"lo": list(grid.lo), "hi": list(grid.hi), "cells": list(grid.cells)},
                   T=T, dt=ts.dt, steps=nsteps, init=init, samples=len(ts.times),
                   fitted_rate=fpe.fit_decay(ts, "fisher_az"),
                   entropy_rate=fpe.fit_decay(ts, "entropy"),
                   kappa_min=kappa, reference_rate=None if kappa is None else 2 * kappa,
                   final_mass=ts.mass[-1], error=ts.error)
    if fmt == "csv":
        _emit(ts.to_csv(), out)
        if summary_path:
            Path(summary_path).write_text(dumps(summary))
        else:
            click.echo(dumps(summary), err=True, nl=False)
    else:
        summary["series"] = {"t": ts.times, "mass": ts.mass, "entropy": ts.entropy,
                             "fisher_a": ts.fisher_a, "fisher_z": ts.fisher_z, "fisher_az": ts.fisher_az}
        _emit(dumps(summary), out)
    if ts.error:
        click.echo(f"simulation stopped early: {ts.error}", err=True)
        sys.exit(EXIT_DOMAIN)


@cli.command()
@click.option("--json", "as_json", is_flag=True, help="Machine-readable listing.")
def examples(as_json):
    """List the built-in structures and their default parameters."""
    entries = []
    for info in BUILTINS.values():
        S = builtin(info.name)
        entries.append({"name": info.name, "family": info.family, "params": info.params,
                        "variables": list(S.variables), "dim": S.dim, "columns": S.n, "z_columns": S.m_z,
                        "summary": info.summary})
    if as_json:
        click.echo(dumps({"schema_version": SCHEMA_VERSION, "examples": entries}), nl=False)
        return
    for e in entries:
        ps = ", ".join(f"{k}={v}" for k, v in e["params"].items()) or "-"
        click.echo(f"{e['name']:<15} {e['family']:<20} params: {ps}")
        click.echo(f"{'':<15} {e['summary']}")


# ---------------------------------------------------------------- entry point

def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="gammaz", standalone_mode=False)
    except SystemExit as err:
        return int(err.code or 0)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_CONFIG
    except click.ClickException as err:
        err.show()
        return EXIT_CONFIG
    except DOMAIN_ERRORS as err:
        click.echo(f"domain error: {err}", err=True)
        return EXIT_DOMAIN
    except CONFIG_ERRORS as err:
        click.echo(f"configuration error: {err}", err=True)
        return EXIT_CONFIG
    except GammazError as err:
        click.echo(f"error: {err}", err=True)
        return EXIT_CONFIG
    return EXIT_OK


def run() -> None:
    sys.exit(main())


__all__ = ["cli", "main", "run", "dumps"]
