import csv
import io
import json
import math

import numpy as np
import pytest

from gammaz.curvature import scan
from gammaz.errors import CFLViolation, NonFinite, SchemaError
from gammaz.expr import parse
from gammaz.fields import builtin, load_structure
from gammaz.fpe import (DensityField, Grid, TimeSeries, cfl_dt, check_zlsi, fit_decay, functionals,
                        perturbed_density, random_smooth_density, simulate, steady_state, step,
                        weak_identity_check)
from golden import FIXTURES, RUNS, run

TORUS2 = Grid((-math.pi, -math.pi), (math.pi, math.pi), (24, 24))


def torus_oracle():
    n = 10 ** 6
    w = 2 * np.pi / n
    x = -np.pi + (np.arange(n) + 0.5) * w
    r = (1 + 0.5 * np.cos(x)) / (2 * np.pi)
    dr = -0.5 * np.sin(x) / (2 * np.pi)
    return np.sum(r * np.log(2 * np.pi * r)) * w, np.sum(dr ** 2 / r) * w


def torus_functionals(N):
    g = Grid((-math.pi,), (math.pi,), (N,))
    c = g.centers()[..., 0]
    return functionals(DensityField(g, (1 + 0.5 * np.cos(c)) / (2 * np.pi)), builtin("euclidean", {"D": 1}))


def test_grid_validation():
    with pytest.raises(SchemaError):
        Grid((0.0,), (1.0,), (4,))
    with pytest.raises(SchemaError):
        Grid((0.0,) * 4, (1.0,) * 4, (8,) * 4)
    with pytest.raises(SchemaError):
        Grid((1.0,), (0.0,), (8,))
    g = Grid((0.0, 0.0), (1.0, 2.0), (8, 16))
    assert g.cell_volume == pytest.approx(1 / 64) and g.periodic == (True, True)


def test_uniform_steady_state():
    g = Grid((0.0, 0.0), (1.0, 2.0), (8, 8))
    rs = steady_state(builtin("euclidean"), g)
    assert np.ptp(rs.values) == 0.0 and rs.mass == pytest.approx(1.0, rel=1e-14)


def test_langevin_steady_state_shape():
    S = builtin("langevin_const")
    rs = steady_state(S, TORUS2)
    c = TORUS2.centers()
    ref = np.exp(-c[..., 1] ** 2 / 2 - (1 - np.cos(c[..., 0])))
    ref /= ref.sum() * TORUS2.cell_volume
    np.testing.assert_allclose(rs.values, ref, rtol=1e-13)


def test_su2_steady_state_follows_volume():
    S = builtin("su2")
    g = Grid((0.3, -math.pi, -math.pi), (math.pi - 0.3, math.pi, math.pi), (16, 8, 8))
    rs = steady_state(S, g).values
    theta = g.centers()[..., 0]
    ratio = rs / np.sin(theta)
    assert np.ptp(ratio) <= 1e-13 * ratio.max()


@pytest.mark.parametrize("name, grid", [
    ("langevin_const", TORUS2),
    ("su2", Grid((0.3, -math.pi, -math.pi), (math.pi - 0.3, math.pi, math.pi), (10, 8, 8))),
    ("se2", Grid((-0.5,) * 3, (0.5,) * 3, (8, 8, 8))),
    ("conformal2d", Grid((-1.0, -1.0), (1.0, 1.0), (16, 16))),
])
def test_steady_state_is_fixed_point(name, grid):
    S = builtin(name)
    rs = steady_state(S, grid)
    nxt = step(rs, S, cfl_dt(S, grid))
    assert np.abs(nxt.values - rs.values).max() <= 1e-13 * rs.values.max()


def test_uniform_stays_uniform():
    S = builtin("euclidean")
    g = Grid((0.0, 0.0), (1.0, 1.0), (8, 8))
    rho = DensityField(g, np.ones(g.cells))
    assert np.array_equal(step(rho, S, cfl_dt(S, g)).values, rho.values)


@pytest.mark.parametrize("name", ["langevin_const", "langevin_var", "heisenberg"])
def test_mass_conserved(name):
    S = builtin(name)
    g = TORUS2 if S.dim == 2 else Grid((-1.0,) * 3, (1.0,) * 3, (8, 8, 8))
    rho = random_smooth_density(S, g, np.random.default_rng(0))
    m0 = rho.mass
    for _ in range(20):
        rho = step(rho, S, cfl_dt(S, g))
    assert abs(rho.mass - m0) <= 1e-12 * m0
    assert rho.values.min() > 0


def test_langevin_entropy_decreases_each_step():
    S = builtin("langevin_const")
    rho = perturbed_density(S, TORUS2)
    dt = cfl_dt(S, TORUS2)
    prev = functionals(rho, S)["D"]
    for _ in range(30):
        rho = step(rho, S, dt)
        cur = functionals(rho, S)["D"]
        assert cur <= prev
        prev = cur


def test_functionals_vanish_at_steady_state():
    S = builtin("langevin_const")
    f = functionals(steady_state(S, TORUS2), S)
    assert abs(f["D"]) <= 1e-14 and abs(f["I_a"]) <= 1e-14 and abs(f["I_z"]) <= 1e-14
    assert f["mass"] == pytest.approx(1.0, abs=1e-12) and not f["floored"]


def test_functionals_nonnegative_for_random_densities():
    S = builtin("langevin_var")
    rng = np.random.default_rng(1)
    for _ in range(5):
        f = functionals(random_smooth_density(S, TORUS2, rng), S)
        assert f["I_a"] >= 0 and f["I_z"] >= 0 and f["D"] >= 0
        assert f["mass"] == pytest.approx(1.0, abs=1e-12)


def test_floored_cells_are_flagged():
    S = builtin("euclidean")
    g = Grid((0.0, 0.0), (1.0, 1.0), (8, 8))
    v = np.ones(g.cells)
    v[0, 0] = 0.0
    assert functionals(DensityField(g, v), S)["floored"]


def test_torus_functionals_against_fine_quadrature():
    D_ref, I_ref = torus_oracle()
    f = torus_functionals(512)
    assert abs(f["D"] - D_ref) <= 1e-4 * abs(D_ref)
    assert abs(f["I_a"] - I_ref) <= 1e-4 * abs(I_ref)


def test_functional_error_order():
    _, I_ref = torus_oracle()
    errs = [abs(torus_functionals(N)["I_a"] - I_ref) for N in (64, 128, 256)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.8), orders


def test_fit_decay_synthetic():
    t = np.linspace(0, 2, 41)
    ts = TimeSeries()
    for ti in t:
        ts.append(ti, {"mass": 1.0, "D": math.exp(-3 * ti), "I_a": math.exp(-3 * ti), "I_z": 0.0})
    assert fit_decay(ts, "entropy") == pytest.approx(3.0, abs=1e-6)
    assert fit_decay(ts) == pytest.approx(3.0, abs=1e-6)
    flat = TimeSeries()
    for ti in t:
        flat.append(ti, {"mass": 1.0, "D": 0.5, "I_a": 0.5, "I_z": 0.0})
    assert fit_decay(flat, "entropy") == 0.0


def test_time_series_rejects_non_increasing_times():
    ts = TimeSeries()
    ts.append(0.0, {"mass": 1, "D": 0, "I_a": 0, "I_z": 0})
    with pytest.raises(ValueError):
        ts.append(0.0, {"mass": 1, "D": 0, "I_a": 0, "I_z": 0})


def test_simulate_from_steady_state_is_zero():
    S = builtin("langevin_const")
    ts = simulate(S, steady_state(S, TORUS2), 0.2)
    assert np.abs(ts.column("entropy")).max() <= 1e-13
    assert np.abs(ts.column("fisher_az")).max() <= 1e-13


def test_zlsi_at_steady_state_and_vacuous_case():
    S = builtin("langevin_const")
    rs = steady_state(S, TORUS2)
    out = check_zlsi(rs, S, 0.5)
    assert out["holds"] is True and abs(out["lhs"]) <= 1e-14 and abs(out["rhs"]) <= 1e-14
    assert check_zlsi(rs, S, -1.0)["holds"] == "not-applicable"
    assert check_zlsi(rs, S, 0.0)["holds"] == "not-applicable"


def test_cfl_violation():
    S = builtin("euclidean")
    g = Grid((0.0, 0.0), (1.0, 1.0), (8, 8))
    rho = DensityField(g, np.ones(g.cells))
    with pytest.raises(CFLViolation):
        step(rho, S, 2 * cfl_dt(S, g))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_returns_partial_series():
    S = builtin("euclidean")
    g = Grid((0.0, 0.0), (1.0, 1.0), (8, 8))
    v = np.ones(g.cells)
    v[3, 3] = np.inf
    with pytest.raises(NonFinite):
        step(DensityField(g, v), S, cfl_dt(S, g))
    ts = simulate(S, DensityField(g, v), 10 * cfl_dt(S, g))
    assert ts.error and len(ts.times) == 1


def test_csv_header():
    S = builtin("euclidean")
    g = Grid((0.0, 0.0), (1.0, 1.0), (8, 8))
    ts = simulate(S, perturbed_density(S, g), 0.01, sample_every=5)
    rows = list(csv.reader(io.StringIO(ts.to_csv())))
    assert rows[0] == ["t", "mass", "entropy", "fisher_a", "fisher_z", "fisher_az"]
    assert len(rows) == len(ts.times) + 1


@pytest.mark.parametrize("name", sorted(RUNS))
def test_golden_runs(name):
    meta = json.loads((FIXTURES / f"{name}.json").read_text())
    ref = np.array([[float(v) for v in row] for row in list(csv.reader(io.StringIO(
        (FIXTURES / f"{name}.csv").read_text())))[1:]])
    ts = run(name)
    got = np.array([[float(v) for v in row] for row in list(csv.reader(io.StringIO(ts.to_csv())))[1:]])
    assert ts.dt == meta["dt"] and len(ts.times) == meta["samples"]
    np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-15)
    D = ts.column("entropy")
    assert np.all(np.diff(D) <= 0)
    assert np.all(np.abs(ts.column("mass") - 1) <= 1e-12)


def test_langevin_golden_fisher_settles():
    ts = run("langevin_const")
    I = ts.column("fisher_az")
    tail = I[len(I) // 4:]
    assert np.all(np.diff(tail) <= 0)
    assert fit_decay(ts) > 0


def test_decay_bound_with_positive_curvature():
    # se2 near the origin has κ > 0.46; the Fisher sum must stay under e^{-2κt}·I0 with 5% slack
    S = builtin("se2")
    kappa = scan(S, "-0.1:0.1", 3, "generalized", drift=True).summary["min_kappa"]
    assert kappa > 0.4
    g = Grid((-0.1,) * 3, (0.1,) * 3, (8, 8, 8))
    ts = simulate(S, perturbed_density(S, g), 0.01, sample_every=5)
    t = ts.column("times")
    I = ts.column("fisher_az")
    assert np.all(I <= np.exp(-2 * kappa * t) * I[0] * 1.05)


@pytest.mark.parametrize("cfg", [
    {"variables": ["x1", "x2", "x3"], "a": [["1", "0"], ["0", "2"], ["0.5", "1"]], "z": [["0.3"], ["1"], ["0"]]},
    {"variables": ["x1", "x2"], "a": [["1 + x1^2/3"], ["sin(x2)"]], "z": [["1 + x1^2/3"], ["sin(x2)"]]},
])
def test_weak_identity_vanishing_cases(cfg):
    S = load_structure(cfg)
    g = Grid((-1.0,) * S.dim, (1.0,) * S.dim, (16,) * S.dim)
    h = {3: "sin(x1) + cos(x2)*x3", 2: "sin(x1) + x1*x2"}[S.dim]
    out = weak_identity_check(S, h, grid=g)
    assert abs(out["lhs"]) <= 1e-13 and abs(out["rhs"]) <= 1e-13


def test_weak_identity_heisenberg_converges():
    S = builtin("heisenberg")
    h = parse("sin(x1) + cos(x2)*x3", S.variables)
    gaps = []
    for n in (16, 32):
        out = weak_identity_check(S, h, grid=Grid((-1.0,) * 3, (1.0,) * 3, (n,) * 3))
        gaps.append(out["gap"])
    # Z commutes with X and Y, so the commutator vanishes pointwise and only quadrature error remains
    assert abs(out["lhs"]) <= 1e-15
    assert math.log2(gaps[0] / gaps[1]) >= 1.8


def test_weak_identity_nontrivial_commutator():
    S = load_structure({"variables": ["x1", "x2"], "a": [["1"], ["x1"]], "z": [["x2"], ["1"]]})
    outs = [weak_identity_check(S, "sin(x1) + x1*x2", grid=Grid((-1.0, -1.0), (1.0, 1.0), (n, n)))
            for n in (32, 64, 128)]
    assert outs[-1]["lhs"] > 0.4
    assert outs[-1]["gap"] <= 2e-4
    for coarse, fine in zip(outs, outs[1:]):
        assert math.log2(coarse["gap"] / fine["gap"]) >= 1.8
