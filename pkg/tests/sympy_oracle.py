"""Independent symbolic reference for Γ-calculus quantities, built with sympy."""
from __future__ import annotations

import sympy as sp

from gammaz.fields import Structure


def _sym(e, syms):
    src = e.to_source().replace("^", "**")
    return sp.sympify(src, locals={v: s for v, s in zip(e.variables, syms)} | {"pow": sp.Pow})


class SymStructure:
    def __init__(self, S: Structure):
        self.S = S
        self.x = sp.symbols(" ".join(f"s{i}" for i in range(S.dim)))
        if S.dim == 1:
            self.x = (self.x,)
        self.a = sp.Matrix([[_sym(e, self.x) for e in row] for row in S.a])
        self.z = sp.Matrix([[_sym(e, self.x) for e in row] for row in S.z]) if S.m_z else sp.zeros(S.dim, 0)
        self.b = sp.Matrix([_sym(e, self.x) for e in S.b]) if S.b is not None else sp.zeros(S.dim, 1)
        lv = _sym(S.log_vol, self.x) if S.log_vol is not None else 0
        pot = _sym(S.potential, self.x) if S.potential is not None else 0
        self.logw = lv - pot

    def fn(self, e):
        return _sym(e, self.x)

    def grad(self, g):
        return sp.Matrix([sp.diff(g, v) for v in self.x])

    def dirs(self, g, M):
        return (M.T * self.grad(g))

    def L(self, g, extra=None):
        out = 0
        for i in range(self.a.shape[1]):
            col = self.a[:, i]
            Xg = (col.T * self.grad(g))[0]
            out += (col.T * self.grad(Xg))[0]
        if extra is not None:
            out += (extra.T * self.grad(g))[0]
        return out

    def gamma1(self, f, g, M):
        u, v = self.dirs(f, M), self.dirs(g, M)
        return (u.T * v)[0] if M.shape[1] else sp.Integer(0)

    def gamma2(self, f, M, extra=None):
        return sp.Rational(1, 2) * self.L(self.gamma1(f, f, M), extra) - self.gamma1(self.L(f, extra), f, M)

    def div_corr(self, f, logw=None):
        logw = self.logw if logw is None else logw
        gf = self.grad(f)
        D = len(self.x)

        def W(M):
            G = M * M.T
            return sp.Matrix([(gf.T * G.diff(self.x[K]) * gf)[0] for K in range(D)])

        def wdiv(M, vec):
            V = M * M.T * vec
            return sum(sp.diff(V[p], self.x[p]) for p in range(D)) + (self.grad(logw).T * V)[0]

        return wdiv(self.z, W(self.a)) - wdiv(self.a, W(self.z))

    def at(self, expr, point):
        return float(sp.N(expr.subs(dict(zip(self.x, point)))))
