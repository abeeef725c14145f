"""Random polynomial test functions with exact jets, evaluated in bulk."""
from __future__ import annotations

from itertools import permutations, product

import numpy as np

from .expr import Jet, parse


def exponents(dim: int, degree: int) -> np.ndarray:
    """All exponent vectors with total degree <= degree, shape (count, dim)."""
    rows = [e for e in product(range(degree + 1), repeat=dim) if sum(e) <= degree]
    return np.array(sorted(rows, key=lambda e: (sum(e), e[::-1])), dtype=int)


def _falling(e: np.ndarray, k: np.ndarray) -> np.ndarray:
    out = np.ones(np.broadcast(e, k).shape)
    for j in range(int(np.max(k, initial=0))):
        out = out * np.where(k > j, e - j, 1)
    return out


def monomial_derivatives(exps: np.ndarray, x: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """d^alpha x^e for every exponent row e, at point x."""
    pw = exps - alpha
    coef = np.prod(_falling(exps, alpha), axis=1)
    safe = np.where(pw >= 0, pw, 0)
    vals = np.prod(np.where(pw >= 0, x ** safe, 0.0), axis=1)
    return coef * vals


def monomial_jet(exps: np.ndarray, x) -> Jet:
    """Order-3 jet of every monomial at x; leading shape (count,)."""
    x = np.asarray(x, dtype=float)
    D = x.shape[-1]
    eye = np.eye(D, dtype=int)
    parts = [monomial_derivatives(exps, x, np.zeros(D, dtype=int))]
    for k in (1, 2, 3):
        arr = np.empty((len(exps),) + (D,) * k)
        for idx in product(range(D), repeat=k):
            if list(idx) != sorted(idx):
                continue
            alpha = eye[list(idx)].sum(axis=0)
            val = monomial_derivatives(exps, x, alpha)
            for perm in set(permutations(idx)):
                arr[(slice(None),) + perm] = val
        parts.append(arr)
    return Jet(*parts)


class PolynomialFamily:
    """A batch of random polynomials sharing one monomial basis."""

    def __init__(self, dim: int, count: int, rng: np.random.Generator, degree: int = 4):
        self.dim = dim
        self.exps = exponents(dim, degree)
        self.coeffs = rng.standard_normal((count, len(self.exps)))

    def jet(self, x) -> Jet:
        """Order-3 jet of every polynomial at x; leading shape (count,)."""
        m = monomial_jet(self.exps, x)
        parts = [np.tensordot(self.coeffs, p, axes=(1, 0)) for p in m.parts()]
        return Jet(*parts)

    def expression(self, index: int, variables):
        terms = []
        for c, e in zip(self.coeffs[index], self.exps):
            mono = "*".join(f"{v}^{int(p)}" for v, p in zip(variables, e) if p)
            terms.append(f"({float(c)!r})" + (f"*{mono}" if mono else ""))
        return parse(" + ".join(terms), variables)
