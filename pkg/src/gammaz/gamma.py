"""Direct evaluation of carré du champ objects by jet composition.

Nothing here uses the assembled matrices of the tensor module: Γ1 is a sum of
products of first-order derivatives, L is applied to jets, and Γ2 is obtained as
½ L Γ1(f,f) − Γ1(Lf, f) with the scalar field Γ1(f,f) carried as a jet. These
values are the reference the tensor decompositions are tested against.

Test functions may be Expressions or precomputed order-3 Jets. A Jet may carry
extra leading batch axes (e.g. many functions at many points) as long as the
point batch is a trailing part of its leading shape.
"""
from __future__ import annotations

import numpy as np

from .errors import SchemaError
from .expr import Expression, Jet, eval_jet, parse
from .fields import FieldJets, Structure, field_jets
from .forms import QuadraticForm, sym


def resolve_weight(S: Structure, weight) -> Expression | None:
    """Log-weight expression for a weight spec; None means the structure's own log(Vol e^{-V}).

    Accepted specs: "vol", "custom:EXPR" (EXPR is the log of the weight), or an Expression.
    """
    if weight is None or weight == "vol":
        return None
    if isinstance(weight, Expression):
        return weight
    if isinstance(weight, str) and weight.startswith("custom:"):
        return parse(weight[len("custom:"):], S.variables, S.params)
    raise SchemaError(f"unknown weight {weight!r}; use 'vol' or 'custom:EXPR'")


def _diag_sum(j: Jet, ax: int) -> Jet:
    """Sum over p of j[..., p, ..., p] where the pair sits at leading axes ax, ax+1."""
    D = j.value.shape[ax]
    out = None
    for p in range(D):
        t = j.take(p, ax).take(p, ax)
        out = t if out is None else out + t
    return out


class GammaContext:
    """Field jets at a point (order 2) and the test function jet (order 3)."""

    def __init__(self, S: Structure, x, f=None, weight="vol", f_order: int = 3):
        self.S = S
        self.x = np.asarray(x, dtype=float)
        self.fields: FieldJets = field_jets(S, self.x, 2)
        self.f = None if f is None else self.function_jet(f, f_order)
        self.nb = self.f.value.ndim if self.f is not None else self.x.ndim - 1
        lw = resolve_weight(S, weight)
        self._log_weight = eval_jet(lw, self.x, 2) if lw is not None else self.fields.log_weight

    def function_jet(self, f, order: int) -> Jet:
        if isinstance(f, Jet):
            if f.order < order:
                raise ValueError(f"test function jet must have order >= {order}")
            return f
        if isinstance(f, str):
            f = parse(f, self.S.variables, self.S.params)
        return eval_jet(f, self.x, order)

    # -- field access lifted to the batch rank of the test function
    def _field(self, name: str) -> Jet:
        j = self._log_weight if name == "logw" else getattr(self.fields, name)
        extra = {"a": 2, "z": 2, "b": 1, "logw": 0}[name]
        while j.value.ndim < self.nb + extra:
            j = j.expand(0)
        return j

    def _cols(self, which: str) -> Jet:
        return self._field(which)

    # -- basic operators
    def directional(self, g: Jet, which: str = "a") -> Jet:
        """(a^T grad g)_i for each column i (or z^T grad g)."""
        nb = self.nb
        M = self._cols(which)
        return (M * g.grad().expand(nb + 1)).sum(nb)

    def gamma1(self, f: Jet, g: Jet, which: str = "a") -> Jet:
        nb = self.nb
        if which == "z" and self.S.m_z == 0:
            return Jet.constant(0.0, f.value.shape, self.S.dim, max(0, min(f.order, g.order) - 1))
        return (self.directional(f, which) * self.directional(g, which)).sum(nb)

    def vector_field(self, kind: str) -> Jet | None:
        """First-order part added to L: 2b for the drift clock, a⊗∇a for the horizontal Laplacian."""
        nb = self.nb
        if kind == "drift":
            return self._field("b") * 2.0
        if kind == "laplacian":
            a = self._field("a")
            div = _diag_sum(a.grad().transpose(self._perm_front_last(nb, 3)), nb)
            return (a * div.expand(nb)).sum(nb + 1)
        raise ValueError(kind)

    @staticmethod
    def _perm_front_last(nb: int, k: int) -> list:
        # move the last of k field axes to the front of them: (p, k, q) -> (p, q, k)
        return list(range(nb)) + [nb, nb + 2, nb + 1]

    def apply(self, g: Jet, extra: Jet | None = None) -> Jet:
        """L g = sum_i X_i X_i g, plus extra·grad g when a first-order field is supplied."""
        nb = self.nb
        a = self._field("a")
        Xg = self.directional(g, "a")  # (..., n)
        grads = Xg.grad()  # (..., n, D)
        aT = a.transpose(list(range(nb)) + [nb + 1, nb])
        out = (aT * grads).sum(nb + 1).sum(nb)
        if extra is not None:
            out = out + (extra * g.grad()).sum(nb)
        return out

    def gamma2(self, which: str = "a", extra: Jet | None = None) -> np.ndarray:
        """½ L Γ1^{which}(f,f) − Γ1^{which}(Lf, f) for the operator L + extra·∇."""
        f = self.f
        if which == "z" and self.S.m_z == 0:
            return np.zeros(f.value.shape)
        G = self.gamma1(f, f, which)
        Lf = self.apply(f, extra)
        return 0.5 * self.apply(G, extra).value - self.gamma1(Lf, f, which).value

    # -- divergence correction
    def _gram(self, which: str) -> Jet:
        nb = self.nb
        M = self._cols(which)
        return (M.expand(nb + 1) * M.expand(nb)).sum(nb + 2)

    def _gram_gradient_vector(self, which: str) -> Jet:
        """W_K = <grad f, d_K(MM^T) grad f>."""
        nb = self.nb
        dG = self._gram(which).grad()  # (..., D, D, D), order 1
        gf = self.f.grad().truncate(1)
        gs = gf.expand(nb + 1).expand(nb + 2)
        gt = gf.expand(nb).expand(nb + 2)
        return (dG * gs * gt).sum(nb).sum(nb)

    def _weighted_div(self, which: str, W: Jet) -> np.ndarray:
        """(1/Ψ) div(Ψ MM^T W) = div(MM^T W) + <grad log Ψ, MM^T W>."""
        nb = self.nb
        V = (self._gram(which).truncate(1) * W.expand(nb)).sum(nb + 1)
        div = np.einsum("...pp->...", V.d1)
        glog = self._field("logw").d1
        return div + np.einsum("...p,...p->...", glog, V.value)

    def div_correction(self) -> np.ndarray:
        if self.S.m_z == 0:
            return np.zeros(self.f.value.shape)
        return (self._weighted_div("z", self._gram_gradient_vector("a"))
                - self._weighted_div("a", self._gram_gradient_vector("z")))


def _ctx(S, f, x, weight="vol", order=3) -> GammaContext:
    return GammaContext(S, x, f, weight, order)


def apply_L(S: Structure, f, x, drift: bool = False) -> np.ndarray:
    c = _ctx(S, f, x, order=2)
    extra = c.vector_field("drift") if drift else None
    return c.apply(c.f, extra).value


def gamma1(S: Structure, f, g, x) -> np.ndarray:
    c = _ctx(S, f, x, order=1)
    return c.gamma1(c.f, c.function_jet(g, 1), "a").value


def gamma1_z(S: Structure, f, g, x) -> np.ndarray:
    c = _ctx(S, f, x, order=1)
    return c.gamma1(c.f, c.function_jet(g, 1), "z").value


def gamma2_direct(S: Structure, f, x, drift: bool = False) -> np.ndarray:
    c = _ctx(S, f, x)
    return c.gamma2("a", c.vector_field("drift") if drift else None)


def gamma2_z_direct(S: Structure, f, x, drift: bool = False) -> np.ndarray:
    c = _ctx(S, f, x)
    return c.gamma2("z", c.vector_field("drift") if drift else None)


def div_correction(S: Structure, f, x, weight="vol") -> np.ndarray:
    return _ctx(S, f, x, weight).div_correction()


def gamma2_z_psi(S: Structure, f, x, weight="vol", drift: bool = False) -> np.ndarray:
    c = _ctx(S, f, x, weight)
    return c.gamma2("z", c.vector_field("drift") if drift else None) + c.div_correction()


def gamma2_laplacian(S: Structure, f, x) -> np.ndarray:
    """Γ2 of the horizontal Laplacian div(aa^T grad) = L + (a⊗∇a)·grad."""
    c = _ctx(S, f, x)
    return c.gamma2("a", c.vector_field("laplacian"))


def bochner_correction(S: Structure, x) -> QuadraticForm:
    """Γ2 of the horizontal Laplacian minus Γ2 of L, as a form in grad f.

    With Y = sum_k div(a_k) X_k the difference is
    sum_{k,l} div(a_k) X_l f [X_k, X_l] f − sum_{k,l} X_l f X_l(div a_k) X_k f.
    """
    fj = field_jets(S, x, 2)
    a, da, dda = fj.a.value, fj.a.d1, fj.a.d2  # (D,n), (D,n,D), (D,n,D,D)
    div = np.einsum("pkp->k", da)
    ddiv = np.einsum("pkpq->kq", dda)  # d_q div(a_k)
    Xdiv = np.einsum("ql,kq->lk", a, ddiv)  # X_l div(a_k)
    Xa = np.einsum("pk,qlp->klq", a, da)  # (X_k a_l)_q
    bracket = Xa - np.swapaxes(Xa, 0, 1)  # [X_k, X_l]_q
    M = -np.einsum("sl,lk,tk->st", a, Xdiv, a)
    M = M + np.einsum("k,sl,klt->st", div, a, bracket)
    return QuadraticForm(sym(M))


__all__ = [
    "GammaContext", "resolve_weight", "apply_L", "gamma1", "gamma1_z", "gamma2_direct",
    "gamma2_z_direct", "div_correction", "gamma2_z_psi", "gamma2_laplacian", "bochner_correction",
]
