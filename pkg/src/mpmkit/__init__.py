"""Markov population models and their limits."""

from .expr import EvaluationError, ExprSyntaxError, parse_rate_expr
from .model import Model, ModelError, Transition, load_model, parse_model, eval_rate

__all__ = [
    "EvaluationError",
    "ExprSyntaxError",
    "Model",
    "ModelError",
    "Transition",
    "eval_rate",
    "load_model",
    "parse_model",
    "parse_rate_expr",
]

__version__ = "0.1.0"
