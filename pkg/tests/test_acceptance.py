"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line (collected in the run summary).

Run alone with `python3 -m pytest tests/test_acceptance.py -v`.
"""
import math
import time

import numpy as np

from acceptance_log import report
from gammaz.curvature import kappa_at, scan, to_u_form, total_ricci
from gammaz.expr import parse
from gammaz.fields import (builtin, invariant_measure_residual, rotate_structure, sample_points,
                           transform_function)
from gammaz.fpe import (Grid, check_zlsi, fit_decay, perturbed_density, random_smooth_density, simulate,
                        weak_identity_check)
from gammaz.polynomials import PolynomialFamily
from gammaz.tensor import assemble, decomposition_residual, drift_correction, ricci_a, solve_lambda
from randexpr import TOLS, fd_errors, sample_cases

SE2_REFERENCE_A = np.array([[0.99, -0.05, 0.0], [-0.05, 0.99, -0.05], [0.0, -0.05, 0.5]])
# minimum of the 11³ se2 scan on [-0.1, 0.1]³ (frozen golden, see test_curvature)
SE2_SCAN_MIN = 0.46124650039112175

# mode and drift flag under which each builtin's Λ system is solvable
DECOMPOSITION_CASES = [("euclidean", "horizontal", False), ("heisenberg", "z_plain", False),
                       ("su2", "generalized", False), ("grushin", "horizontal", False),
                       ("langevin_const", "generalized", True), ("se2", "generalized", True),
                       ("conformal2d", "horizontal", True)]


def test_criterion_01_se2_bound():
    t0 = time.perf_counter()
    S = builtin("se2", {"beta": 0.1, "V": "theta^2 + x^2/2 + y^2/2"})
    x = [0.0, 0.0, 0.0]
    U = to_u_form(S, x, total_ricci(S, x, "generalized", drift=True))
    lam_min = float(np.linalg.eigvalsh(U.A).min())
    entry_err = float(np.abs(U.A - SE2_REFERENCE_A).max())
    elapsed = time.perf_counter() - t0
    ok = entry_err <= 1e-12 and abs(lam_min - 0.495) <= 0.005 and elapsed < 1.0
    report(1, ok, f"max|A - A_ref| = {entry_err:.3e}, λ_min = {lam_min:.15f} (target 0.495 ± 0.005), "
                  f"{elapsed:.2f} s; computed A = diag({', '.join(f'{v:.12g}' for v in np.diag(U.A))})")
    assert ok


def test_criterion_02_grushin_closed_form():
    t0 = time.perf_counter()
    worst_r = worst_k = 0.0
    for k in (1, 2, 3):
        S = builtin("grushin", {"k": k})
        for xv in (0.5, 1.0, 2.0):
            x = [xv, 0.25]
            ap = assemble(S, x)
            R = ricci_a(ap, solve_lambda(ap, "horizontal")).M
            ref = np.diag([-k * k / xv ** 2, -(2 * k * k + k) * xv ** (2 * k - 2)])
            worst_r = max(worst_r, float(np.abs(R - ref).max() / np.abs(ref).max()))
            kap = kappa_at(S, x, "horizontal")
            worst_k = max(worst_k, abs(kap + (2 * k * k + k) / xv ** 2) / ((2 * k * k + k) / xv ** 2))
    elapsed = time.perf_counter() - t0
    ok = worst_r <= 1e-10 and worst_k <= 1e-10 and elapsed < 1.0
    report(2, ok, f"ricci_a rel err {worst_r:.2e}, κ rel err {worst_k:.2e}, {elapsed:.2f} s")
    assert ok


def test_criterion_03_decomposition_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_dec = worst_lam = 0.0
    for name, mode, drift in DECOMPOSITION_CASES:
        S = builtin(name)
        fam = PolynomialFamily(S.dim, 100, rng, degree=4)
        for x in sample_points(S, 10, rng):
            chk = decomposition_residual(S, fam.jet(x), x, mode, drift)
            worst_dec = max(worst_dec, float(chk))
            worst_lam = max(worst_lam, chk.lambda_residual)
    elapsed = time.perf_counter() - t0
    ok = worst_dec <= 1e-8 and worst_lam <= 1e-8 and elapsed < 30
    report(3, ok, f"7 builtins x 10 points x 100 polynomials: max residual {worst_dec:.2e}, "
                  f"max Λ residual {worst_lam:.2e}, {elapsed:.1f} s")
    assert ok


def test_criterion_04_langevin_drift_tensor():
    worst = 0.0
    computed = []
    for gamma, u in ((1.0, 1.0), (0.5, 2.0), (2.0, 0.3)):
        S = builtin("langevin_const", {"gamma": gamma, "u": u})
        x = [0.4, -0.3]
        M = drift_correction(assemble(S, x), S, x, "a")
        for g in ((1.0, 0.0), (0.0, 1.0), (1.0, 1.0)):
            fx, fv = g
            target = 8 * gamma ** 2 * u ** 2 * fv ** 2 - 8 * gamma * u * fx * fv
            got = float(M(np.array(g)))
            worst = max(worst, abs(got - target))
            computed.append((g, got, target))
    ok = worst <= 1e-12
    g, got, target = computed[1]
    report(4, ok, f"max |form - 8γ²u²f_v² + 8γu f_x f_v| = {worst:.3e}; e.g. at (f_x,f_v)={g} "
                  f"computed {got:g} vs {target:g} (computed form is 4γ²u²f_v² - 4γu f_x f_v)")
    assert ok


def test_criterion_05_invariant_measures():
    rng = np.random.default_rng(5)
    su2 = builtin("su2")
    lang = builtin("langevin_const")
    r_su2 = invariant_measure_residual(su2, sample_points(su2, 100, rng))
    r_lang = invariant_measure_residual(lang, sample_points(lang, 100, rng))
    ok = r_su2 <= 1e-10 and r_lang <= 1e-10
    report(5, ok, f"SU(2) residual {r_su2:.2e}, langevin_const residual {r_lang:.3g} "
                  "(Langevin drift has a Hamiltonian part; e^-V is stationary but not symmetric)")
    assert ok


def _langevin_kappa(z1, z2, points):
    S = builtin("langevin_const", {"z1": float(z1), "z2": float(z2)})
    return min(kappa_at(S, x, "generalized", drift=True) for x in points), S


def test_criterion_06_fisher_decay():
    t0 = time.perf_counter()
    # κ depends on x only through U''(x) = cos x and not on v, so a line v = 0 covers the domain
    xs = np.linspace(-np.pi, np.pi, 9)
    line = [np.array([x, 0.0]) for x in xs]
    best = (-np.inf, None)
    for z1 in np.arange(-4.0, 4.01, 0.5):
        for z2 in np.arange(-4.0, 4.01, 0.5):
            if z1 == 0 and z2 == 0:
                continue
            k, _ = _langevin_kappa(z1, z2, line)
            if k > best[0]:
                best = (k, (float(z1), float(z2)))
    kappa, z = best
    _, S = _langevin_kappa(*z, line)
    off_line = kappa_at(S, [xs[0], 1.3], "generalized", drift=True)
    grid = Grid((-math.pi, -math.pi), (math.pi, math.pi), (64, 64))
    T = 3 / kappa if kappa > 0 else 3.0
    ts = simulate(S, perturbed_density(S, grid), T, sample_every=10)
    t = ts.column("times")
    I = ts.column("fisher_az")
    rate = fit_decay(ts)
    if kappa > 0:
        past = t >= 0.1 * T
        i0 = int(np.argmax(past))
        bound_ok = bool(np.all(I[past] <= 1.05 * np.exp(-2 * kappa * (t[past] - t[i0])) * I[i0]))
        ok = bound_ok and rate >= 1.6 * kappa and time.perf_counter() - t0 < 60
        detail = f"z = {z}, κ = {kappa:.4f}, bound holds: {bound_ok}, fitted rate {rate:.3f}"
    else:
        ok = False
        detail = (f"no constant z in [-4,4]² gives κ > 0 (best κ = {kappa:.4f} at z = {z}; "
                  f"κ off the v = 0 line {off_line:.4f}); observed Fisher decay rate {rate:.3f} on 64², T = 3")
    report(6, ok, detail + f", {time.perf_counter() - t0:.1f} s")
    assert ok


def test_criterion_07_zlsi():
    S = builtin("se2", {"beta": 0.1})
    kappa = scan(S, "-0.1:0.1", 11, "generalized", drift=True).summary["min_kappa"]
    grid = Grid((-0.1,) * 3, (0.1,) * 3, (12, 12, 12))
    rng = np.random.default_rng(7)
    margins = [check_zlsi(random_smooth_density(S, grid, rng), S, kappa)["margin"] for _ in range(20)]
    ok = abs(kappa - SE2_SCAN_MIN) <= 1e-10 * SE2_SCAN_MIN and min(margins) >= -1e-6
    report(7, ok, f"κ = {kappa:.6f} (scan minimum), 20 densities, smallest margin {min(margins):.3e}")
    assert ok


def test_criterion_08_weak_commutator():
    S = builtin("heisenberg")
    h = parse("sin(x1) + cos(x2)*x3", S.variables)
    gaps = {}
    for n in (32, 64):
        gaps[n] = weak_identity_check(S, h, grid=Grid((-1.0,) * 3, (1.0,) * 3, (n,) * 3))["gap"]
    order = math.log2(gaps[32] / gaps[64])
    ok = gaps[64] <= 1e-3 and order >= 1.8
    report(8, ok, f"gap 32³ {gaps[32]:.3e}, 64³ {gaps[64]:.3e}, observed order {order:.2f}")
    assert ok


def test_criterion_09_jets_vs_finite_differences():
    worst = {1: 0.0, 2: 0.0, 3: 0.0}
    cases = list(sample_cases(1000, 2025))
    for e, x in cases:
        for k, v in fd_errors(e, x).items():
            worst[k] = max(worst[k], v)
    ok = len(cases) == 1000 and all(worst[k] <= TOLS[k] for k in worst)
    report(9, ok, f"{len(cases)} expressions, worst relative error by order "
                  + ", ".join(f"{k}: {worst[k]:.1e} (tol {TOLS[k]:.0e})" for k in worst))
    assert ok


def test_criterion_10_rotation_equivariance():
    worst_k = worst_r = 0.0
    t = 0.7
    R = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    for name, mode, drift in (("langevin_const", "generalized", True), ("euclidean", "horizontal", False)):
        S = builtin(name)
        T = rotate_structure(S, R)
        f = parse(f"sin({S.variables[0]})*{S.variables[1]}^2 + {S.variables[0]}^3", S.variables)
        g = transform_function(f, R)
        for x in sample_points(S, 10, np.random.default_rng(10)):
            y = R @ x
            worst_k = max(worst_k, abs(kappa_at(T, y, mode, drift) - kappa_at(S, x, mode, drift)))
            worst_r = max(worst_r, abs(float(decomposition_residual(T, g, y, mode, drift))
                                       - float(decomposition_residual(S, f, x, mode, drift))))
    ok = worst_k <= 1e-10 and worst_r <= 1e-10
    report(10, ok, f"max |Δκ| = {worst_k:.2e}, max |Δ residual| = {worst_r:.2e}")
    assert ok
