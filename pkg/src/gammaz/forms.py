"""Small containers for quadratic forms and linear-in-gradient maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def sym(M: np.ndarray) -> np.ndarray:
    """Symmetric part; the result is exactly symmetric."""
    S = 0.5 * (M + np.swapaxes(M, -1, -2))
    return 0.5 * (S + np.swapaxes(S, -1, -2))


@dataclass(frozen=True)
class QuadraticForm:
    """Symmetric matrix M acting on a vector v as v^T M v.

    basis is "gradient" (v = grad f) or "U" (v = (a^T grad f, z^T grad f)).
    """

    M: np.ndarray
    basis: str = "gradient"

    def __post_init__(self):
        M = np.asarray(self.M, dtype=float)
        object.__setattr__(self, "M", sym(M))

    def __call__(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return np.einsum("...s,...st,...t->...", v, self.M, v)

    def __add__(self, other: "QuadraticForm") -> "QuadraticForm":
        if self.basis != other.basis:
            raise ValueError("cannot add forms in different bases")
        return QuadraticForm(self.M + other.M, self.basis)

    def __neg__(self) -> "QuadraticForm":
        return QuadraticForm(-self.M, self.basis)

    def scaled(self, c: float) -> "QuadraticForm":
        return QuadraticForm(c * self.M, self.basis)

    @staticmethod
    def zero(dim: int, basis: str = "gradient") -> "QuadraticForm":
        return QuadraticForm(np.zeros((dim, dim)), basis)


@dataclass(frozen=True)
class LinearFormMap:
    """A vector that depends linearly on grad f, stored as its coefficient matrix.

    coeffs has shape (rows, D); applying it to grad f gives coeffs @ grad f.
    """

    coeffs: np.ndarray

    def __call__(self, grad) -> np.ndarray:
        return np.einsum("...rs,...s->...r", self.coeffs, np.asarray(grad, dtype=float))

    @property
    def shape(self) -> tuple:
        return self.coeffs.shape
