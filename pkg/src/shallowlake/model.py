"""Pointwise shallow-lake dynamics, Hamiltonian and the interior optimal control.

All functions broadcast over numpy arrays so the same code serves the 0D
model and the nodewise nonlinearity of the distributed system.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """Raised when a state leaves the admissible set (k <= 0 or q >= 0)."""


@dataclass(frozen=True)
class ModelParams:
    r: float = 0.03
    gamma: float = 0.5
    b: float = 0.65
    D: float = 0.5

    def __post_init__(self):
        if self.r <= 0 or self.gamma <= 0 or self.b <= 0:
            raise ValueError(f"r, gamma, b must be positive, got {self}")
        if self.D < 0:
            raise ValueError(f"D must be non-negative, got {self.D}")

    def with_b(self, b: float) -> "ModelParams":
        return ModelParams(self.r, self.gamma, float(b), self.D)


def g(P):
    """Recycling nonlinearity P^2 / (1 + P^2)."""
    P2 = np.square(P)
    return P2 / (1.0 + P2)


def dg(P):
    return 2.0 * P / np.square(1.0 + np.square(P))


def d2g(P):
    P2 = np.square(P)
    return (2.0 - 6.0 * P2) / (1.0 + P2) ** 3


def _check_k(k):
    if np.any(np.asarray(k) <= 0):
        raise DomainError("control k must be positive")


def _check_q(q):
    if np.any(np.asarray(q) >= 0):
        raise DomainError("costate q must be negative (no interior maximizer otherwise)")


def current_objective(P, k, params: ModelParams):
    """Instantaneous payoff ln k - gamma P^2."""
    _check_k(k)
    return np.log(k) - params.gamma * np.square(P)


def optimal_control(q):
    """Maximizer k = -1/q of the Hamiltonian in k."""
    _check_q(q)
    return -1.0 / np.asarray(q, dtype=float) if np.ndim(q) else -1.0 / float(q)


def state_rhs(P, k, params: ModelParams):
    return k - params.b * P + g(P)


def costate_rhs(P, q, params: ModelParams):
    return 2.0 * params.gamma * P + q * (params.r + params.b - dg(P))


def hamiltonian(P, q, k, params: ModelParams):
    return current_objective(P, k, params) + q * state_rhs(P, k, params)
