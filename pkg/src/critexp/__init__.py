"""Staircase laminates, convex-integration realizations and critical
gradient-integrability exponents for two-phase conductivities in the plane."""

from .errors import (
    BudgetExhausted,
    CritexpError,
    InvalidInput,
    InvariantViolation,
    UnsupportedCase,
)

SCHEMA_VERSION = "critexp/1"

__all__ = [
    "BudgetExhausted",
    "CritexpError",
    "InvalidInput",
    "InvariantViolation",
    "UnsupportedCase",
    "SCHEMA_VERSION",
]
