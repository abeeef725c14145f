"""Problem instances: diffusion matrix a, auxiliary directions z, drift b, volume.

A Structure holds parsed expressions over a fixed coordinate list. Built-in
examples cover the Heisenberg group, SU(2), the Grushin plane, kinetic
Langevin dynamics, the displacement group SE(2), a conformal metric and flat
space.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError, GammazError, SchemaError, UnknownExample
from .expr import (
    Expression,
    _add,
    _mul,
    _sub,
    Jet,
    Num,
    Var,
    differentiate,
    eval_jet,
    from_node,
    linear_combination,
    node_source,
    parse,
    substitute,
)


@dataclass(frozen=True)
class Structure:
    name: str
    variables: tuple
    a: tuple  # D rows of n expressions
    z: tuple = ()  # D rows of m_z expressions (empty rows when m_z = 0)
    b: tuple | None = None
    log_vol: Expression | None = None
    potential: Expression | None = None
    params: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return len(self.variables)

    @property
    def n(self) -> int:
        return len(self.a[0])

    @property
    def m_z(self) -> int:
        return len(self.z[0]) if self.z else 0

    @property
    def has_drift(self) -> bool:
        return self.b is not None and any(e.ast != Num(0.0) for e in self.b)

    def const(self, value: float) -> Expression:
        return from_node(Num(float(value)), self.variables)


@dataclass
class FieldJets:
    """Jets of every structure field at a point (or batch of points)."""

    a: Jet  # leading shape batch + (D, n)
    z: Jet  # batch + (D, m_z)
    b: Jet  # batch + (D,)
    log_vol: Jet  # batch
    potential: Jet  # batch

    @property
    def log_weight(self) -> Jet:
        """log of the effective weight Vol * exp(-V)."""
        return self.log_vol - self.potential


def stack_jets(jets: Sequence[Jet], shape: tuple) -> Jet:
    """Arrange a flat list of same-shape jets into a jet with extra leading axes `shape`."""
    order = min(j.order for j in jets)
    batch_nd = jets[0].value.ndim
    parts = []
    for k in range(order + 1):
        arrs = [j.parts()[k] for j in jets]
        st = np.stack(arrs, axis=batch_nd)
        tail = st.shape[batch_nd + 1:]
        parts.append(st.reshape(st.shape[:batch_nd] + tuple(shape) + tail))
    return Jet(*parts + [None] * (4 - len(parts)))


def _grid_jet(grid: tuple, point, order: int, dim: int, shape: tuple) -> Jet:
    flat = [e for row in grid for e in row]
    pt = np.asarray(point, dtype=float)
    if not flat:
        batch = pt.shape[:-1]
        parts = [np.zeros(batch + tuple(shape))]
        for k in range(1, order + 1):
            parts.append(np.zeros(batch + tuple(shape) + (dim,) * k))
        return Jet(*parts + [None] * (4 - len(parts)))
    return stack_jets([eval_jet(e, pt, order) for e in flat], shape)


def field_jets(S: Structure, x, order: int = 2) -> FieldJets:
    x = np.asarray(x, dtype=float)
    D = S.dim
    batch = x.shape[:-1]
    a = _grid_jet(S.a, x, order, D, (D, S.n))
    z = _grid_jet(S.z if S.m_z else (), x, order, D, (D, S.m_z))
    if S.b is not None:
        b = stack_jets([eval_jet(e, x, order) for e in S.b], (D,))
    else:
        b = Jet.constant(0.0, batch + (D,), D, order)
    zero = Jet.constant(0.0, batch, D, order)
    lv = eval_jet(S.log_vol, x, order) if S.log_vol is not None else zero
    pot = eval_jet(S.potential, x, order) if S.potential is not None else zero
    return FieldJets(a, z, b, lv, pot)


# ---------------------------------------------------------------- config

def _parse_entry(src, variables, params, where: str) -> Expression:
    if isinstance(src, (int, float)) and not isinstance(src, bool):
        src = repr(float(src))
    if not isinstance(src, str):
        raise SchemaError(f"{where}: expected an expression string, got {type(src).__name__}")
    try:
        return parse(src, variables, params)
    except GammazError as err:
        err.location = where
        err.args = (f"{where}: {err}",)
        raise


def _parse_matrix(rows, variables, params, key: str, required: bool) -> tuple:
    if rows is None:
        if required:
            raise SchemaError(f"missing required field {key!r}")
        return ()
    if not isinstance(rows, list) or any(not isinstance(r, list) for r in rows):
        raise SchemaError(f"{key!r} must be a list of rows")
    D = len(variables)
    if len(rows) != D:
        raise SchemaError(f"{key!r} has {len(rows)} rows, expected one per coordinate ({D})")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise SchemaError(f"{key!r} rows have inconsistent lengths {sorted(widths)}")
    width = widths.pop()
    if key == "a" and width < 1:
        raise SchemaError("'a' needs at least one column")
    if width == 0:
        return ()
    return tuple(
        tuple(_parse_entry(src, variables, params, f"{key}[{i}][{j}]") for j, src in enumerate(row))
        for i, row in enumerate(rows)
    )


def load_structure(config: Mapping) -> Structure:
    """Build a Structure from a config mapping (see README for the schema)."""
    if isinstance(config, (str, bytes)):
        config = json.loads(config)
    if not isinstance(config, Mapping):
        raise SchemaError("structure config must be a JSON object")
    allowed = {"name", "variables", "a", "z", "b", "log_vol", "potential", "params"}
    extra = set(config) - allowed
    if extra:
        raise SchemaError(f"unknown fields {sorted(extra)}")
    variables = config.get("variables")
    if not isinstance(variables, list) or not variables or not all(isinstance(v, str) for v in variables):
        raise SchemaError("'variables' must be a nonempty list of names")
    if len(set(variables)) != len(variables):
        raise SchemaError("'variables' must be distinct")
    params = config.get("params") or {}
    if not isinstance(params, Mapping):
        raise SchemaError("'params' must be an object")
    for k, v in params.items():
        if isinstance(v, bool) or not isinstance(v, (int, float, str)):
            raise SchemaError(f"parameter {k!r} must be a number or expression string")
    clash = set(params) & set(variables)
    if clash:
        raise SchemaError(f"parameters shadow coordinates: {sorted(clash)}")
    variables = tuple(variables)
    a = _parse_matrix(config.get("a"), variables, params, "a", True)
    z = _parse_matrix(config.get("z"), variables, params, "z", False)
    b = None
    if config.get("b") is not None:
        raw = config["b"]
        if not isinstance(raw, list) or len(raw) != len(variables):
            raise SchemaError(f"'b' must be a list of {len(variables)} expressions")
        b = tuple(_parse_entry(s, variables, params, f"b[{i}]") for i, s in enumerate(raw))
    lv = config.get("log_vol")
    lv = _parse_entry(lv, variables, params, "log_vol") if lv is not None else None
    pot = config.get("potential")
    pot = _parse_entry(pot, variables, params, "potential") if pot is not None else None
    if z and len(z[0]) > len(variables):
        raise SchemaError("'z' has more columns than coordinates")
    return Structure(str(config.get("name", "custom")), variables, a, z, b, lv, pot, dict(params))


def load_structure_file(path) -> Structure:
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as err:
            raise SchemaError(f"{path}: invalid JSON ({err})") from None
    return load_structure(cfg)


def serialize(S: Structure) -> dict:
    src = lambda e: e.to_source()  # noqa: E731
    out = {
        "name": S.name,
        "variables": list(S.variables),
        "a": [[src(e) for e in row] for row in S.a],
    }
    if S.m_z:
        out["z"] = [[src(e) for e in row] for row in S.z]
    if S.b is not None:
        out["b"] = [src(e) for e in S.b]
    if S.log_vol is not None:
        out["log_vol"] = src(S.log_vol)
    if S.potential is not None:
        out["potential"] = src(S.potential)
    if S.params:
        out["params"] = dict(S.params)
    return out


# ---------------------------------------------------------------- builtins

@dataclass(frozen=True)
class BuiltinInfo:
    name: str
    family: str
    params: dict
    summary: str


BUILTINS = {
    "heisenberg": BuiltinInfo(
        "heisenberg", "nilpotent Lie group", {},
        "Heisenberg group, horizontal fields X=d1-x2/2 d3, Y=d2+x1/2 d3, z=(x2/2,-x1/2,1)"),
    "su2": BuiltinInfo(
        "su2", "compact Lie group", {},
        "SU(2) in Euler angles (theta,phi,psi), Vol=sin(theta), z=[X1,X2]=d_psi"),
    "grushin": BuiltinInfo(
        "grushin", "degenerate plane", {"k": 1},
        "Grushin plane a=diag(1,x^k), no z"),
    "langevin_const": BuiltinInfo(
        "langevin_const", "kinetic", {"gamma": 1.0, "u": 1.0, "z1": 1.0, "z2": -1.0, "U": "1 - cos(x)"},
        "kinetic Langevin, constant friction u, constant z=(z1,z2), potential V=v^2/2+U(x)"),
    "langevin_var": BuiltinInfo(
        "langevin_var", "kinetic", {"gamma": 1.0, "u": "1 + 0.5*sin(x)", "z1": "1", "z2": "-1 + 0.25*cos(x)",
                                   "U": "1 - cos(x)"},
        "kinetic Langevin with friction u(x) and z=(z1(x,v),z2(x,v))"),
    "se2": BuiltinInfo(
        "se2", "displacement group", {"beta": 0.1, "V": "theta^2 + x^2/2 + y^2/2"},
        "displacement group SE(2) with gradient drift b=-aa^T grad V/2 and weight exp(-V)"),
    "conformal2d": BuiltinInfo(
        "conformal2d", "conformal metric", {"eps": 0.3, "phi": "eps*sin(x1)*cos(x2)"},
        "conformal metric a=exp(-phi) Id in 2D with the Laplace-Beltrami drift, Vol=exp(2 phi)"),
    "euclidean": BuiltinInfo(
        "euclidean", "flat", {"D": 2},
        "flat space, a = identity"),
}


def _deriv_sources(src: str, variables, params) -> list[str]:
    e = parse(src, variables, params)
    return [node_source(differentiate(e.ast, i), variables) for i in range(len(variables))]


def builtin(name: str, params: Mapping | None = None) -> Structure:
    """One of the built-in examples; unspecified params take the listed defaults."""
    if name not in BUILTINS:
        raise UnknownExample(f"unknown example {name!r}; choose from {sorted(BUILTINS)}")
    info = BUILTINS[name]
    unknown = set(params or {}) - set(info.params)
    if unknown:
        raise SchemaError(f"{name} does not take parameters {sorted(unknown)}")
    p = dict(info.params)
    p.update(params or {})
    cfg: dict = {"name": name, "params": p}
    if name == "heisenberg":
        cfg.update(variables=["x1", "x2", "x3"],
                   a=[["1", "0"], ["0", "1"], ["-x2/2", "x1/2"]],
                   z=[["x2/2"], ["-x1/2"], ["1"]])
    elif name == "su2":
        cfg.update(variables=["theta", "phi", "psi"],
                   a=[["cos(psi)", "-sin(psi)"],
                      ["sin(psi)/sin(theta)", "cos(psi)/sin(theta)"],
                      ["-cos(theta)*sin(psi)/sin(theta)", "-cos(theta)*cos(psi)/sin(theta)"]],
                   z=[["0"], ["0"], ["1"]],
                   log_vol="log(sin(theta))")
    elif name == "grushin":
        k = p["k"]
        if float(k) != int(k) or int(k) < 1:
            raise SchemaError("grushin needs an integer k >= 1")
        cfg.update(variables=["x", "y"], a=[["1", "0"], ["0", "x^k"]])
    elif name in ("langevin_const", "langevin_var"):
        var = ["x", "v"]
        dU = _deriv_sources("U", var, p)[0]
        cfg.update(variables=var,
                   a=[["0"], ["sqrt(2*gamma*u)"]],
                   z=[["z1"], ["z2"]],
                   b=["v", f"-gamma*u*v - {dU}"],
                   potential="v^2/2 + U")
    elif name == "se2":
        var = ["theta", "x", "y"]
        gV = _deriv_sources("V", var, p)
        # b = -aa^T grad V / 2 with aa^T = [[1,0,0],[0,e^{2 beta theta},e^{beta theta}],[0,e^{beta theta},1]]
        cfg.update(variables=var,
                   a=[["1", "0"], ["0", "exp(beta*theta)"], ["0", "1"]],
                   z=[["0"], ["0"], ["-beta"]],
                   b=[f"-({gV[0]})/2",
                      f"-(exp(2*beta*theta)*({gV[1]}) + exp(beta*theta)*({gV[2]}))/2",
                      f"-(exp(beta*theta)*({gV[1]}) + ({gV[2]}))/2"],
                   potential="V")
    elif name == "conformal2d":
        var = ["x1", "x2"]
        gphi = _deriv_sources("phi", var, p)
        # Laplace-Beltrami of exp(2 phi) delta equals L + 2b.grad with b = exp(-2 phi) grad(phi) / 2
        cfg.update(variables=var,
                   a=[["exp(-(phi))", "0"], ["0", "exp(-(phi))"]],
                   b=[f"exp(-2*(phi))*({g})/2" for g in gphi],
                   log_vol="2*(phi)")
    elif name == "euclidean":
        D = int(p["D"])
        if D < 1 or D != float(p["D"]):
            raise SchemaError("euclidean needs an integer D >= 1")
        var = [f"x{i + 1}" for i in range(D)]
        cfg.update(variables=var, a=[["1" if i == j else "0" for j in range(D)] for i in range(D)])
        cfg["params"] = {}
        S = load_structure(cfg)
        return Structure(S.name, S.variables, S.a, S.z, S.b, S.log_vol, S.potential, {"D": D})
    return load_structure(cfg)


def sample_points(S: Structure, count: int, rng: np.random.Generator) -> np.ndarray:
    """Random admissible points for the built-in examples (away from coordinate singularities)."""
    D = S.dim
    if S.name == "su2":
        th = rng.uniform(0.3, np.pi - 0.3, count)
        rest = rng.uniform(-np.pi, np.pi, (count, 2))
        return np.column_stack([th, rest])
    if S.name == "grushin":
        x = rng.uniform(0.5, 2.0, count) * rng.choice([-1.0, 1.0], count)
        return np.column_stack([x, rng.uniform(-1, 1, count)])
    if S.name == "se2":
        return rng.uniform(-0.5, 0.5, (count, D))
    if S.name.startswith("langevin"):
        return np.column_stack([rng.uniform(-np.pi, np.pi, count), rng.uniform(-3, 3, count)])
    return rng.uniform(-1.0, 1.0, (count, D))


def admissible_box(S: Structure) -> list[tuple[float, float]]:
    """A coordinate box inside the natural domain, matching sample_points."""
    if S.name == "su2":
        return [(0.3, np.pi - 0.3), (-np.pi, np.pi), (-np.pi, np.pi)]
    if S.name == "grushin":
        return [(0.5, 2.0), (-1.0, 1.0)]
    if S.name == "se2":
        return [(-0.5, 0.5)] * 3
    if S.name.startswith("langevin"):
        return [(-np.pi, np.pi), (-np.pi, np.pi)]
    return [(-1.0, 1.0)] * S.dim


# ---------------------------------------------------------------- identities

def a_otimes_grad_a(S: Structure, x) -> np.ndarray:
    """(a⊗∇a)_p = sum_k a_pk div(a_k)."""
    a = field_jets(S, x, 1).a
    div = np.einsum("...pkp->...k", a.d1)
    return np.einsum("...pk,...k->...p", a.value, div)


def invariant_measure_residual(S: Structure, points) -> float:
    """max over points of |a⊗∇a - 2b + aa^T ∇ log(Vol e^{-V})|_inf."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    fj = field_jets(S, pts, 1)
    a = fj.a
    div = np.einsum("...pkp->...k", a.d1)
    ada = np.einsum("...pk,...k->...p", a.value, div)
    aat = np.einsum("...pk,...qk->...pq", a.value, a.value)
    glog = fj.log_weight.d1
    res = ada - 2 * fj.b.value + np.einsum("...pq,...q->...p", aat, glog)
    return float(np.abs(res).max())


def invariant_measure_defect(S: Structure, points) -> np.ndarray:
    """The vector field a⊗∇a - 2b + aa^T ∇ log(Vol e^{-V}) at each point (nonreversible part of the drift)."""
    pts = np.asarray(points, dtype=float)
    fj = field_jets(S, pts, 1)
    a = fj.a
    div = np.einsum("...pkp->...k", a.d1)
    ada = np.einsum("...pk,...k->...p", a.value, div)
    aat = np.einsum("...pk,...qk->...pq", a.value, a.value)
    return ada - 2 * fj.b.value + np.einsum("...pq,...q->...p", aat, fj.log_weight.d1)


def stationarity_residual(S: Structure, points) -> float:
    """max over points of |div(ρ* r)/ρ*| with r the invariant-measure defect.

    Zero whenever ρ* ∝ Vol e^{-V} is invariant, symmetric or not.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    fj = field_jets(S, pts, 2)
    a, da, dda = fj.a.value, fj.a.d1, fj.a.d2
    g, dg = fj.log_weight.d1, fj.log_weight.d2
    div = np.einsum("...pkp->...k", da)
    ddiv = np.einsum("...pkps->...ks", dda)
    aat = np.einsum("...pk,...qk->...pq", a, a)
    r = np.einsum("...pk,...k->...p", a, div) - 2 * fj.b.value + np.einsum("...pq,...q->...p", aat, g)
    div_r = (np.einsum("...pkp,...k->...", da, div) + np.einsum("...pk,...kp->...", a, ddiv)
             - 2 * np.einsum("...pp->...", fj.b.d1)
             + np.einsum("...pkp,...qk,...q->...", da, a, g) + np.einsum("...pk,...qkp,...q->...", a, da, g)
             + np.einsum("...pq,...qp->...", aat, dg))
    res = div_r + np.einsum("...p,...p->...", r, g)
    return float(np.abs(res).max())


def _bracket_nodes(V: Sequence, W: Sequence, D: int) -> list:
    """Components of [V, W] = V.grad W - W.grad V as ASTs."""
    out = []
    for q in range(D):
        acc = Num(0.0)
        for p in range(D):
            acc = _add(acc, _mul(V[p], differentiate(W[q], p)))
            acc = _sub(acc, _mul(W[p], differentiate(V[q], p)))
        out.append(acc)
    return out


def _field_value(nodes: Sequence, variables, x: np.ndarray) -> np.ndarray:
    return np.array([eval_jet(from_node(n, variables), x, 0).value for n in nodes], dtype=float)


def hormander_rank(S: Structure, x, max_depth: int) -> tuple[int, int]:
    """Rank of the span of a's columns and their iterated brackets up to length `max_depth`.

    Returns (rank, depth) where depth is the shortest bracket length that reaches
    the final rank.
    """
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    x = np.asarray(x, dtype=float)
    D = S.dim
    base = [[S.a[q][k].ast for q in range(D)] for k in range(S.n)]
    level = base
    vectors: list[np.ndarray] = []
    best_rank, best_depth = 0, 1
    for depth in range(1, max_depth + 1):
        if depth > 1:
            nxt = []
            for Vf in level:
                for Wf in base:
                    if Vf is Wf:
                        continue
                    nxt.append(_bracket_nodes(Wf, Vf, D))
            level = nxt
        for fld in level:
            vectors.append(_field_value(fld, S.variables, x))
        M = np.array(vectors)
        sv = np.linalg.svd(M, compute_uv=False)
        rank = int(np.sum(sv > 1e-9 * sv.max())) if sv.size and sv.max() > 0 else 0
        if rank > best_rank:
            best_rank, best_depth = rank, depth
        if rank == D:
            break
    return best_rank, best_depth


# ---------------------------------------------------------------- coordinate changes

def rotate_structure(S: Structure, R) -> Structure:
    """Push S forward along the linear map x' = R x (R orthogonal)."""
    R = np.asarray(R, dtype=float)
    D = S.dim
    if R.shape != (D, D):
        raise ValueError("rotation has the wrong shape")
    reps = [linear_combination(R[:, i], [Var(j) for j in range(D)]) for i in range(D)]
    comp = lambda e: substitute(e, reps, S.variables)  # noqa: E731

    def rotate_columns(grid):
        cols = len(grid[0]) if grid else 0
        moved = [[comp(e) for e in row] for row in grid]
        return tuple(
            tuple(from_node(linear_combination(R[p], [moved[q][k].ast for q in range(D)]), S.variables)
                  for k in range(cols))
            for p in range(D)
        )

    a = rotate_columns(S.a)
    z = rotate_columns(S.z) if S.m_z else ()
    b = None
    if S.b is not None:
        moved = [comp(e).ast for e in S.b]
        b = tuple(from_node(linear_combination(R[p], moved), S.variables) for p in range(D))
    lv = comp(S.log_vol) if S.log_vol is not None else None
    pot = comp(S.potential) if S.potential is not None else None
    return Structure(S.name, S.variables, a, z, b, lv, pot, dict(S.params))


def transform_function(f: Expression, R) -> Expression:
    """f∘R^T, i.e. the same function written in the rotated coordinates x' = R x."""
    R = np.asarray(R, dtype=float)
    D = f.dim
    reps = [linear_combination(R[:, i], [Var(j) for j in range(D)]) for i in range(D)]
    return substitute(f, reps, f.variables)


def check_domain(S: Structure, x) -> None:
    """Raise DomainError if some field cannot be evaluated (or is not finite) at x."""
    fj = field_jets(S, x, 0)
    for arr in (fj.a.value, fj.z.value, fj.b.value, fj.log_vol.value, fj.potential.value):
        if not np.all(np.isfinite(arr)):
            raise DomainError("non-finite field value", None, np.asarray(x).reshape(-1, S.dim)[0])


__all__ = [
    "Structure", "FieldJets", "BUILTINS", "builtin", "load_structure", "load_structure_file",
    "serialize", "field_jets", "a_otimes_grad_a", "invariant_measure_residual",
    "invariant_measure_defect", "stationarity_residual", "hormander_rank", "rotate_structure", "transform_function",
    "sample_points", "admissible_box", "check_domain",
]
