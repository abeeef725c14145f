"""Assembled tensors, the Λ systems and the Ricci forms of the Γ2 decompositions.

Index conventions (a^T is n×D, z^T is m×D, D-indices written in capitals):

    Q[(i,k),(I,K)] = a^T_{iI} a^T_{kK}           (n² × D²)
    P[(j,i),(I,K)] = z^T_{jI} a^T_{iK}           (m n × D²)
    X              = Hessian of f flattened as (I,K)

Every vector that is linear in grad f (C, D, E, F, G, Λ1, Λ2) is stored as the
coefficient matrix acting on grad f. With these, for the operator
L = sum_i (a^T grad)_i (a^T grad)_i,

    Γ2 + Γ2^z + div terms = |QX + QΛ1 g|² + |PX + PΛ2 g|² + g^T R g,   g = grad f,

whenever sym(Q^TQ Λ1 + P^TP Λ2) = sym(C + Q^T D + F + P^T E + G).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, SchemaError
from .expr import Jet, eval_jet
from .fields import Structure, field_jets
from .forms import LinearFormMap, QuadraticForm, sym
from .gamma import GammaContext, resolve_weight

MODES = ("horizontal", "z_plain", "generalized")
LAMBDA_TOL = 1e-8


@dataclass(frozen=True)
class AssembledPoint:
    point: np.ndarray
    Q: np.ndarray
    P: np.ndarray
    C: LinearFormMap
    F: LinearFormMap
    G: LinearFormMap
    Dvec: LinearFormMap
    Evec: LinearFormMap
    gram_a: np.ndarray
    gram_z: np.ndarray
    # raw ingredients reused by the Ricci forms
    at: np.ndarray
    zt: np.ndarray
    dat: np.ndarray
    dzt: np.ndarray
    ddat: np.ndarray
    ddzt: np.ndarray

    @property
    def dim(self) -> int:
        return self.at.shape[1]

    @property
    def n(self) -> int:
        return self.at.shape[0]

    @property
    def m_z(self) -> int:
        return self.zt.shape[0]


@dataclass(frozen=True)
class LambdaSolution:
    mode: str
    lambda1: LinearFormMap
    lambda2: LinearFormMap | None
    residual: float
    QL1: np.ndarray  # Q Λ1 as an (n², D) map: the gauge-free part
    PL2: np.ndarray  # P Λ2, (m n, D); empty when no z

    def satisfied(self, tol: float = LAMBDA_TOL) -> bool:
        return self.residual <= tol


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise SchemaError(f"unknown mode {mode!r}; choose from {MODES}")


def _effective_mode(mode: str, m_z: int) -> str:
    _check_mode(mode)
    return "horizontal" if m_z == 0 else mode


def _raw(S: Structure, x) -> tuple:
    fj = field_jets(S, np.asarray(x, dtype=float), 2)
    at = fj.a.value.T.copy()
    dat = np.transpose(fj.a.d1, (1, 0, 2))
    ddat = np.transpose(fj.a.d2, (1, 0, 2, 3))
    zt = fj.z.value.T.copy()
    dzt = np.transpose(fj.z.d1, (1, 0, 2))
    ddzt = np.transpose(fj.z.d2, (1, 0, 2, 3))
    return fj, at, dat, ddat, zt, dzt, ddzt


def assemble(S: Structure, x) -> AssembledPoint:
    x = np.asarray(x, dtype=float)
    fj, at, dat, ddat, zt, dzt, ddzt = _raw(S, x)
    D, n, m = S.dim, S.n, S.m_z
    ein = np.einsum
    Q = ein("iI,kK->ikIK", at, at).reshape(n * n, D * D)
    P = ein("jI,iK->jiIK", zt, at).reshape(m * n, D * D)
    C = (ein("iI,iJ,kKJ,ks->IKs", at, at, dat, at)
         - ein("kJ,iK,iIJ,ks->IKs", at, at, dat, at)).reshape(D * D, D)
    Dm = ein("iI,ksI->iks", at, dat).reshape(n * n, D)
    if m:
        F = (ein("iI,iJ,kKJ,ks->IKs", at, at, dzt, zt)
             - ein("kJ,iK,iIJ,ks->IKs", zt, at, dat, zt)).reshape(D * D, D)
        E = ein("iI,ksI->kis", at, dzt).reshape(m * n, D)
        G = (ein("jL,jM,iIM,is->ILs", zt, zt, dat, at)
             + ein("jL,jM,isM,iI->ILs", zt, zt, dat, at)
             - ein("iI,iM,jLM,js->ILs", at, at, dzt, zt)
             - ein("iI,iM,jsM,jL->ILs", at, at, dzt, zt)).reshape(D * D, D)
    else:
        F = np.zeros((D * D, D))
        E = np.zeros((0, D))
        G = np.zeros((D * D, D))
    return AssembledPoint(
        point=x, Q=Q, P=P, C=LinearFormMap(C), F=LinearFormMap(F), G=LinearFormMap(G),
        Dvec=LinearFormMap(Dm), Evec=LinearFormMap(E),
        gram_a=at.T @ at, gram_z=zt.T @ zt,
        at=at, zt=zt, dat=dat, dzt=dzt, ddat=ddat, ddzt=ddzt,
    )


def _sym_projector(D: int) -> np.ndarray:
    """Projection of D²-vectors onto their index-symmetric part."""
    I = np.eye(D * D)
    swap = I.reshape(D, D, D, D).transpose(1, 0, 2, 3).reshape(D * D, D * D)
    return 0.5 * (I + swap)


def lambda_rhs(ap: AssembledPoint, mode: str) -> np.ndarray:
    mode = _effective_mode(mode, ap.m_z)
    rhs = ap.C.coeffs + ap.Q.T @ ap.Dvec.coeffs
    if mode in ("z_plain", "generalized"):
        rhs = rhs + ap.F.coeffs + ap.P.T @ ap.Evec.coeffs
    if mode == "generalized":
        rhs = rhs + ap.G.coeffs
    return rhs


def _equilibrated_lstsq(A: np.ndarray, B: np.ndarray, rcond: float) -> np.ndarray:
    """Least squares after scaling rows and columns to unit max-abs, so tiny blocks are not cut off."""
    r = np.abs(A).max(axis=1)
    r = np.where(r > 0, 1.0 / np.where(r > 0, r, 1.0), 1.0)
    As = A * r[:, None]
    c = np.abs(As).max(axis=0)
    c = np.where(c > 0, 1.0 / np.where(c > 0, c, 1.0), 1.0)
    y, *_ = np.linalg.lstsq(As * c[None, :], B * r[:, None], rcond=rcond)
    return y * c[:, None]


def check_horizontal_rank(ap: AssembledPoint, tol: float = 1e-12) -> None:
    """Raise DomainError where the columns of a become dependent (the distribution changes rank)."""
    sv = np.linalg.svd(ap.at, compute_uv=False)
    if sv.size == 0 or sv.max() == 0 or sv.min() <= tol * sv.max():
        raise DomainError("the columns of a are linearly dependent here; the horizontal distribution "
                          "degenerates", None, ap.point)


def solve_lambda(ap: AssembledPoint, mode: str, rcond: float = 1e-10,
                 exact_tol: float = 1e-12) -> LambdaSolution:
    """Least-squares Λ with deterministic tie-breaking.

    The full equation Q^TQ Λ1 (+ P^TP Λ2) = RHS is tried first; when it is
    consistent its solution fixes QΛ1 uniquely. Otherwise only the symmetric
    index pairs are constrained. Rows and columns are equilibrated before the
    SVD cutoff. The reported residual is always the operator norm of the
    symmetric defect.
    """
    check_horizontal_rank(ap)
    mode_eff = _effective_mode(mode, ap.m_z)
    D = ap.dim
    Sp = _sym_projector(D)
    rhs = lambda_rhs(ap, mode_eff)
    QtQ = ap.Q.T @ ap.Q
    full = QtQ if mode_eff == "horizontal" else np.hstack([QtQ, ap.P.T @ ap.P])
    sol = _equilibrated_lstsq(full, rhs, rcond)
    defect_full = full @ sol - rhs
    row_scale = np.maximum(np.abs(full).max(axis=1), np.abs(rhs).max(axis=1))
    row_scale = np.where(row_scale > 0, row_scale, 1.0)
    if np.abs(defect_full / row_scale[:, None]).max(initial=0.0) > exact_tol:
        sol = _equilibrated_lstsq(Sp @ full, Sp @ rhs, rcond)
    defect = Sp @ (full @ sol - rhs)
    residual = float(np.linalg.norm(defect, 2)) if defect.size else 0.0
    L1 = sol[: D * D]
    L2 = sol[D * D:] if mode_eff != "horizontal" else None
    QL1 = ap.Q @ L1
    PL2 = ap.P @ L2 if L2 is not None else np.zeros((ap.P.shape[0], D))
    return LambdaSolution(mode, LinearFormMap(L1), None if L2 is None else LinearFormMap(L2),
                          residual, QL1, PL2)


# ---------------------------------------------------------------- Ricci forms

def _derivative_sums(at, dat, ddat, outer, douter, ddouter) -> np.ndarray:
    """The four first/second-derivative sums of the horizontal (outer = a) or z (outer = z) Ricci form.

    Returned unsymmetrized, as B[K, s] with the quadratic form g_K B_Ks g_s.
    """
    ein = np.einsum
    s1 = ein("iJ,iIJ,kKI,ks->Ks", at, dat, douter, outer)
    s2 = ein("iJ,iI,kKIJ,ks->Ks", at, at, ddouter, outer)
    s3 = -ein("kK,iJK,iIJ,ks->Is", outer, dat, dat, outer)
    s4 = -ein("kK,iJ,iIJK,ks->Is", outer, at, ddat, outer)
    return s1 + s2 + s3 + s4


def ricci_a(ap: AssembledPoint, lam: LambdaSolution) -> QuadraticForm:
    """Horizontal Ricci form; in z modes it carries the −|PΛ2|² and E^TE terms as well."""
    mode = _effective_mode(lam.mode, ap.m_z)
    M = -lam.QL1.T @ lam.QL1 + ap.Dvec.coeffs.T @ ap.Dvec.coeffs
    if mode != "horizontal":
        M = M - lam.PL2.T @ lam.PL2 + ap.Evec.coeffs.T @ ap.Evec.coeffs
    M = M + sym(_derivative_sums(ap.at, ap.dat, ap.ddat, ap.at, ap.dat, ap.ddat))
    return QuadraticForm(sym(M))


def ricci_z(ap: AssembledPoint) -> QuadraticForm:
    if ap.m_z == 0:
        return QuadraticForm.zero(ap.dim)
    B = _derivative_sums(ap.at, ap.dat, ap.ddat, ap.zt, ap.dzt, ap.ddzt)
    return QuadraticForm(sym(B))


def _frozen_div(gram_d: np.ndarray, gram_dd: np.ndarray, other: np.ndarray, other_d: np.ndarray,
                glog: np.ndarray) -> np.ndarray:
    """Gradient-only part of (1/Ψ) div(Ψ MM^T W) with W_K = g^T d_K(NN^T) g.

    gram_d[s,t,K] = d_K (NN^T)_{st}, gram_dd[s,t,K,p] its derivative; other = MM^T.
    """
    ein = np.einsum
    return (ein("pKp,stK->st", other_d, gram_d)
            + ein("pK,stKp->st", other, gram_dd)
            + ein("p,pK,stK->st", glog, other, gram_d))


def _gram_jets(at, dat, ddat):
    """MM^T and its first and second derivatives from the transposed columns."""
    ein = np.einsum
    G = at.T @ at
    dG = ein("iSp,iT->STp", dat, at)
    dG = dG + np.swapaxes(dG, 0, 1)
    ddG = ein("iSpq,iT->STpq", ddat, at) + ein("iSp,iTq->STpq", dat, dat)
    ddG = ddG + np.swapaxes(ddG, 0, 1)
    return G, dG, ddG


def ricci_psi(S: Structure, x, weight="vol", ap: AssembledPoint | None = None) -> QuadraticForm:
    """Gradient-only part of the divergence correction; its Hessian part is 2 G^T X."""
    ap = ap if ap is not None else assemble(S, x)
    if ap.m_z == 0:
        return QuadraticForm.zero(ap.dim)
    lw = resolve_weight(S, weight)
    x = np.asarray(x, dtype=float)
    glog = eval_jet(lw, x, 1).d1 if lw is not None else field_jets(S, x, 1).log_weight.d1
    GA, dGA, ddGA = _gram_jets(ap.at, ap.dat, ap.ddat)
    GZ, dGZ, ddGZ = _gram_jets(ap.zt, ap.dzt, ap.ddzt)
    M = _frozen_div(dGA, ddGA, GZ, dGZ, glog) - _frozen_div(dGZ, ddGZ, GA, dGA, glog)
    return QuadraticForm(sym(M))


def drift_correction(ap: AssembledPoint, S: Structure, x, direction: str = "a") -> QuadraticForm:
    """Extra Ricci term produced by the first-order part 2b·grad of the generator."""
    if direction not in ("a", "z"):
        raise ValueError("direction must be 'a' or 'z'")
    D = ap.dim
    if S.b is None:
        return QuadraticForm.zero(D)
    bj = field_jets(S, np.asarray(x, dtype=float), 1).b
    b, db = bj.value, bj.d1
    outer, douter = (ap.at, ap.dat) if direction == "a" else (ap.zt, ap.dzt)
    if outer.shape[0] == 0:
        return QuadraticForm.zero(D)
    B = (np.einsum("iI,KI,is->Ks", outer, db, outer)
         - np.einsum("K,iIK,is->Is", b, douter, outer))
    return QuadraticForm(-2.0 * sym(B))


# ---------------------------------------------------------------- evaluation

def _function_parts(f, S: Structure, x, order: int = 2) -> Jet:
    if isinstance(f, Jet):
        return f
    return GammaContext(S, x, None).function_jet(f, order)


def hessian_square(ap: AssembledPoint, lam: LambdaSolution, f, x=None, S: Structure | None = None) -> np.ndarray:
    """|QX + QΛ1 g|² (+ |PX + PΛ2 g|² in z modes) for the Hessian X and gradient g of f."""
    if not isinstance(f, Jet):
        if S is None:
            raise ValueError("a Structure is needed to evaluate an expression")
        f = _function_parts(f, S, ap.point if x is None else x)
    D = ap.dim
    X = f.d2.reshape(f.d2.shape[:-2] + (D * D,))
    g = f.d1
    h = np.einsum("rc,...c->...r", ap.Q, X) + np.einsum("rs,...s->...r", lam.QL1, g)
    out = np.einsum("...r,...r->...", h, h)
    if _effective_mode(lam.mode, ap.m_z) != "horizontal":
        k = np.einsum("rc,...c->...r", ap.P, X) + np.einsum("rs,...s->...r", lam.PL2, g)
        out = out + np.einsum("...r,...r->...", k, k)
    return out


def ricci_total(S: Structure, x, mode: str, drift: bool = False, weight="vol",
                ap: AssembledPoint | None = None, lam: LambdaSolution | None = None) -> QuadraticForm:
    """Sum of the Ricci forms that enter the decomposition for `mode` (gradient basis)."""
    ap = ap if ap is not None else assemble(S, x)
    lam = lam if lam is not None else solve_lambda(ap, mode)
    mode_eff = _effective_mode(mode, ap.m_z)
    R = ricci_a(ap, lam)
    if mode_eff != "horizontal":
        R = R + ricci_z(ap)
    if mode_eff == "generalized":
        R = R + ricci_psi(S, x, weight, ap)
    if drift:
        R = R + drift_correction(ap, S, x, "a")
        if mode_eff != "horizontal":
            R = R + drift_correction(ap, S, x, "z")
    return R


def oracle_lhs(S: Structure, f, x, mode: str, drift: bool = False, weight="vol") -> np.ndarray:
    """Γ2 (+ Γ2^z, + divergence correction) computed directly by jets."""
    mode_eff = _effective_mode(mode, S.m_z)
    ctx = GammaContext(S, x, f, weight)
    extra = ctx.vector_field("drift") if drift else None
    out = ctx.gamma2("a", extra)
    if mode_eff != "horizontal":
        out = out + ctx.gamma2("z", extra)
    if mode_eff == "generalized":
        out = out + ctx.div_correction()
    return out


@dataclass(frozen=True)
class DecompositionCheck:
    residual: np.ndarray
    lambda_residual: float
    lhs: np.ndarray
    rhs: np.ndarray

    def __float__(self) -> float:
        return float(np.max(self.residual))


def decomposition_residual(S: Structure, f, x, mode: str, drift: bool = False, weight="vol",
                           ap: AssembledPoint | None = None) -> DecompositionCheck:
    """|oracle − (Hessian square + Ricci forms)| / (1 + |oracle|) for f at x.

    f may be an Expression or an order-3 Jet with leading batch axes (a batch of
    functions at the single point x).
    """
    x = np.asarray(x, dtype=float)
    ap = ap if ap is not None else assemble(S, x)
    lam = solve_lambda(ap, mode)
    fj = _function_parts(f, S, x, 3)
    lhs = oracle_lhs(S, fj, x, mode, drift, weight)
    R = ricci_total(S, x, mode, drift, weight, ap, lam)
    rhs = hessian_square(ap, lam, fj) + R(fj.d1)
    return DecompositionCheck(np.abs(lhs - rhs) / (1.0 + np.abs(lhs)), lam.residual, lhs, rhs)


__all__ = [
    "MODES", "LAMBDA_TOL", "AssembledPoint", "LambdaSolution", "QuadraticForm", "LinearFormMap",
    "assemble", "solve_lambda", "lambda_rhs", "ricci_a", "ricci_z", "ricci_psi", "drift_correction",
    "hessian_square", "ricci_total", "oracle_lhs", "decomposition_residual", "DecompositionCheck",
]
