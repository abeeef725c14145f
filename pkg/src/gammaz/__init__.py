"""Generalized Gamma z calculus for degenerate drift-diffusion structures."""
from .curvature import CurvatureReport, kappa_at, scan, to_u_form
from .errors import (ArityError, CFLViolation, DomainError, ExprSyntaxError, GammazError, NonFinite,
                     RankError, SchemaError, UnknownExample, UnknownIdentifier)
from .expr import Expression, Jet, eval_jet, evaluate, parse
from .fields import Structure, builtin, load_structure, load_structure_file
from .forms import QuadraticForm
from .tensor import assemble, decomposition_residual, ricci_total, solve_lambda

__version__ = "0.1.0"

__all__ = [
    "ArityError", "CFLViolation", "CurvatureReport", "DomainError", "Expression", "ExprSyntaxError",
    "GammazError", "Jet", "NonFinite", "QuadraticForm", "RankError", "SchemaError", "Structure",
    "UnknownExample", "UnknownIdentifier", "assemble", "builtin", "decomposition_residual", "eval_jet",
    "evaluate", "kappa_at", "load_structure", "load_structure_file", "parse", "ricci_total", "scan",
    "solve_lambda", "to_u_form",
]
