"""Random expression sources and finite-difference checks shared by the jet tests."""
from __future__ import annotations

import numpy as np

from gammaz.errors import DomainError
from gammaz.expr import eval_jet, parse

UNARY = ["sin", "cos", "tanh", "exp", "sinh", "cosh", "sqrt", "log", "tan"]
# order-k derivative is compared to a central difference of the exact order-(k-1) jet
STEPS = {1: 1e-5, 2: 1e-5, 3: 1e-4}
TOLS = {1: 1e-6, 2: 1e-6, 3: 1e-4}


def random_source(rng: np.random.Generator, variables, depth: int) -> str:
    if depth == 0 or rng.random() < 0.2:
        if rng.random() < 0.6:
            return str(variables[rng.integers(len(variables))])
        return repr(round(float(rng.uniform(0.1, 2.0)), 3))
    kind = rng.integers(5)
    a = random_source(rng, variables, depth - 1)
    if kind == 0:
        fn = UNARY[rng.integers(len(UNARY))]
        if fn in ("sqrt", "log"):
            return f"{fn}(1.5 + {a}^2)"
        if fn in ("exp", "sinh", "cosh"):
            return f"{fn}(tanh({a}))"
        if fn == "tan":
            return f"tan(0.5*tanh({a}))"
        return f"{fn}({a})"
    b = random_source(rng, variables, depth - 1)
    if kind == 1:
        return f"({a}) + ({b})"
    if kind == 2:
        return f"({a}) * ({b})"
    if kind == 3:
        return f"({a}) / (2 + sin({b}))"
    n = int(rng.integers(2, 4))
    return f"({a})^{n}" if rng.random() < 0.5 else f"-({a})"


def fd_errors(e, x: np.ndarray) -> dict:
    """Max relative error per order of the stored derivatives against central differences."""
    D = len(x)
    jet = eval_jet(e, x, 3)
    exact = {0: jet.value, 1: jet.d1, 2: jet.d2, 3: jet.d3}
    errs = {}
    for k in (1, 2, 3):
        h = STEPS[k]
        approx = np.empty_like(exact[k])
        for p in range(D):
            dx = np.zeros(D)
            dx[p] = h
            lo = eval_jet(e, x - dx, k - 1)
            hi = eval_jet(e, x + dx, k - 1)
            part = {0: "value", 1: "d1", 2: "d2"}[k - 1]
            approx[..., p] = (getattr(hi, part) - getattr(lo, part)) / (2 * h)
        errs[k] = float(np.max(np.abs(approx - exact[k]) / (1.0 + np.abs(exact[k]))))
    return errs


def sample_cases(count: int, seed: int, max_depth: int = 5):
    """Yield (expression, point) pairs that evaluate without domain errors and stay moderate."""
    rng = np.random.default_rng(seed)
    made = 0
    while made < count:
        D = int(rng.integers(1, 4))
        variables = [f"x{i + 1}" for i in range(D)]
        src = random_source(rng, variables, int(rng.integers(1, max_depth + 1)))
        e = parse(src, variables)
        x = rng.uniform(-1, 1, D)
        try:
            j = eval_jet(e, x, 3)
        except DomainError:
            continue
        if max(np.abs(p).max() for p in j.parts()) > 1e3:
            continue
        made += 1
        yield e, x
