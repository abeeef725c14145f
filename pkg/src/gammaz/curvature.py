"""Curvature lower bounds κ(x) from the assembled Ricci forms, and domain scans."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, GammazError, RankError
from .fields import Structure
from .forms import QuadraticForm, sym
from .polynomials import PolynomialFamily
from .tensor import (
    LAMBDA_TOL,
    LambdaSolution,
    _effective_mode,
    assemble,
    decomposition_residual,
    ricci_total,
    solve_lambda,
)

RANK_TOL = 1e-9
FACTOR_TOL = 1e-9


@dataclass(frozen=True)
class UForm:
    A: np.ndarray
    residual: float


def frame(S: Structure, x, mode: str) -> np.ndarray:
    """W = [a^T; z^T] (only a^T in horizontal mode), so that Γ1 + Γ1^z = |W grad f|²."""
    ap = assemble(S, x)
    if _effective_mode(mode, S.m_z) == "horizontal":
        return ap.at
    return np.vstack([ap.at, ap.zt])


def total_ricci(S: Structure, x, mode: str, drift: bool = False, weight="vol") -> QuadraticForm:
    return ricci_total(S, np.asarray(x, dtype=float), mode, drift, weight)


def _u_form_from(W: np.ndarray, M: np.ndarray) -> UForm:
    sv = np.linalg.svd(W, compute_uv=False)
    rank = int(np.sum(sv > RANK_TOL * sv.max())) if sv.size and sv.max() > 0 else 0
    if rank < W.shape[0]:
        raise RankError(f"frame has rank {rank} < {W.shape[0]} rows")
    Wp = np.linalg.pinv(W)
    A = sym(Wp.T @ M @ Wp)
    res = float(np.linalg.norm(M - W.T @ A @ W, 2))
    return UForm(A, res)


def to_u_form(S: Structure, x, M: QuadraticForm, mode: str = "generalized") -> UForm:
    """Express M (gradient basis) as W^T A W in the coordinates U = W grad f."""
    return _u_form_from(frame(S, x, mode), M.M)


def pencil_min(M: np.ndarray, G: np.ndarray, tol: float = 1e-9) -> float:
    """Largest κ with v^T M v >= κ v^T G v for all v (G positive semidefinite); -inf if none."""
    M = sym(M)
    w, V = np.linalg.eigh(sym(G))
    scale = max(w.max(initial=0.0), 1e-300)
    rng_mask = w > tol * scale
    R, K = V[:, rng_mask], V[:, ~rng_mask]
    if R.shape[1] == 0:
        return -np.inf
    Mrr, Mrk, Mkk = R.T @ M @ R, R.T @ M @ K, K.T @ M @ K
    mscale = max(np.abs(M).max(initial=0.0), 1.0)
    if K.shape[1]:
        wk, Vk = np.linalg.eigh(Mkk)
        if wk.min() < -tol * mscale:
            return -np.inf
        pos = wk > tol * mscale
        K0 = Vk[:, ~pos]
        if K0.shape[1] and np.abs(Mrk @ K0).max() > tol * mscale:
            return -np.inf
        Kp = Vk[:, pos]
        if Kp.shape[1]:
            B = Mrk @ Kp
            Mrr = Mrr - B @ np.diag(1.0 / wk[pos]) @ B.T
    Grr = R.T @ G @ R
    gw, gv = np.linalg.eigh(sym(Grr))
    isq = gv @ np.diag(1.0 / np.sqrt(gw)) @ gv.T
    return float(np.linalg.eigvalsh(sym(isq @ Mrr @ isq)).min())


def kappa_at(S: Structure, x, mode: str = "generalized", drift: bool = False, weight="vol",
             details: bool = False):
    """Pointwise curvature bound: ℛ ⪰ κ (Γ1 + Γ1^z) in the smallest-eigenvalue sense."""
    x = np.asarray(x, dtype=float)
    ap = assemble(S, x)
    lam = solve_lambda(ap, mode)
    M = ricci_total(S, x, mode, drift, weight, ap, lam)
    W = ap.at if _effective_mode(mode, S.m_z) == "horizontal" else np.vstack([ap.at, ap.zt])
    factor_res = np.nan
    try:
        U = _u_form_from(W, M.M)
        factor_res = U.residual
        if U.residual > FACTOR_TOL * max(1.0, np.abs(M.M).max()):
            raise RankError("form is not supported on the frame's row space")
        kappa = float(np.linalg.eigvalsh(U.A).min())
        method = "U"
    except RankError:
        kappa = pencil_min(M.M, W.T @ W)
        method = "pencil"
    if details:
        return {"kappa": kappa, "method": method, "lambda_residual": lam.residual,
                "factorization_residual": factor_res, "form": M, "lambda": lam}
    return kappa


def cd_dimension(S: Structure, x, lam: LambdaSolution) -> dict:
    """Both dimension candidates: the number of columns of a, and the count of complete squares."""
    ap = assemble(S, x)
    rows = [ap.Q]
    if _effective_mode(lam.mode, ap.m_z) != "horizontal":
        rows.append(ap.P)
    stacked = np.vstack(rows)
    scale = max(np.abs(stacked).max(initial=0.0), 1e-300)
    d_all = int(np.sum(np.abs(stacked).max(axis=1) > 1e-12 * scale))
    return {"d_diag": S.n, "d_all": d_all}


# ---------------------------------------------------------------- scans

def parse_box(spec, dim: int) -> list[tuple[float, float]]:
    """'lo:hi[,lo:hi...]' (or a list of pairs); a single interval applies to every axis."""
    if isinstance(spec, str):
        pairs = []
        for part in spec.split(","):
            lo, sep, hi = part.partition(":")
            if not sep:
                raise ValueError(f"bad interval {part!r}; expected lo:hi")
            pairs.append((float(lo), float(hi)))
    else:
        pairs = [tuple(map(float, p)) for p in spec]
    if len(pairs) == 1:
        pairs = pairs * dim
    if len(pairs) != dim:
        raise ValueError(f"box has {len(pairs)} intervals for {dim} coordinates")
    for lo, hi in pairs:
        if not hi >= lo:
            raise ValueError(f"empty interval {lo}:{hi}")
    return pairs


def parse_res(spec, dim: int) -> list[int]:
    if isinstance(spec, str):
        vals = [int(v) for v in spec.replace("x", ",").split(",")]
    elif isinstance(spec, int):
        vals = [spec]
    else:
        vals = [int(v) for v in spec]
    if len(vals) == 1:
        vals = vals * dim
    if len(vals) != dim or min(vals) < 1:
        raise ValueError("resolution must give a positive count per coordinate")
    return vals


def grid_points(box, res) -> np.ndarray:
    axes = [np.linspace(lo, hi, r) if r > 1 else np.array([0.5 * (lo + hi)]) for (lo, hi), r in zip(box, res)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass
class CurvatureReport:
    mode: str
    grid: dict
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "grid": self.grid, "summary": self.summary, "records": self.records}

    def to_csv(self, variables) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(variables) + ["kappa", "lambda_residual", "factorization_residual",
                                      "decomposition_spotcheck", "status"])
        for r in self.records:
            w.writerow([_fmt(v) for v in r["x"]]
                       + [_fmt(r.get(k)) for k in ("kappa", "lambda_residual", "factorization_residual",
                                                   "decomposition_spotcheck")]
                       + [r["status"]])
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    v = float(v)
    if np.isnan(v):
        return "nan"
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, ".17g")


def scan(S: Structure, box, res, mode: str = "generalized", drift: bool = False, weight="vol",
         spotcheck_fns: int = 0, seed: int = 0, lambda_tol: float = LAMBDA_TOL) -> CurvatureReport:
    """κ on a tensor grid over a coordinate box; failing points are recorded, never fatal."""
    box = parse_box(box, S.dim)
    res = parse_res(res, S.dim)
    pts = grid_points(box, res)
    rng = np.random.default_rng(seed)
    fam = PolynomialFamily(S.dim, spotcheck_fns, rng) if spotcheck_fns else None
    report = CurvatureReport(mode, {"box": [list(b) for b in box], "res": res, "points": len(pts)})
    for x in pts:
        rec = {"x": [float(v) for v in x]}
        try:
            with np.errstate(all="raise"):
                info = kappa_at(S, x, mode, drift, weight, details=True)
                rec.update(kappa=info["kappa"], lambda_residual=info["lambda_residual"],
                           factorization_residual=info["factorization_residual"], method=info["method"])
                if fam is not None:
                    chk = decomposition_residual(S, fam.jet(x), x, mode, drift, weight)
                    rec["decomposition_spotcheck"] = float(np.max(chk.residual))
                else:
                    rec["decomposition_spotcheck"] = None
            rec["status"] = "ok"
        except (DomainError, FloatingPointError, GammazError, np.linalg.LinAlgError) as err:
            rec.update(kappa=None, lambda_residual=None, factorization_residual=None,
                       decomposition_spotcheck=None, status=f"skipped: {err}")
        report.records.append(rec)
    ok = [r for r in report.records if r["status"] == "ok"]
    if ok:
        i = int(np.argmin([r["kappa"] for r in ok]))
        report.summary = {
            "min_kappa": ok[i]["kappa"],
            "argmin": ok[i]["x"],
            "fraction_lambda_ok": sum(r["lambda_residual"] <= lambda_tol for r in ok) / len(ok),
            "max_lambda_residual": max(r["lambda_residual"] for r in ok),
            "evaluated": len(ok),
            "skipped": len(report.records) - len(ok),
        }
    else:
        report.summary = {"min_kappa": None, "argmin": None, "fraction_lambda_ok": 0.0,
                          "max_lambda_residual": None, "evaluated": 0, "skipped": len(report.records)}
    return report


__all__ = [
    "UForm", "CurvatureReport", "frame", "total_ricci", "to_u_form", "pencil_min", "kappa_at",
    "cd_dimension", "parse_box", "parse_res", "grid_points", "scan",
]
