"""Exploration schedules and pointwise confidence bands ``mu -/+ sqrt(beta) * sd``."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from riskbo.gp import GPPosterior


def beta_practical(t: int) -> float:
    """``2 log(t^2 pi^2 / 0.6)``."""
    if t < 1:
        raise ValueError("iteration index starts at 1")
    return 2.0 * math.log(t * t * math.pi**2 / 0.6)


def beta_theoretical(t: int, B: float, noise_sd: float, delta: float, gamma_fn: Callable[[int], float]) -> float:
    """RKHS-norm based schedule ``(B + noise_sd * sqrt(2 (gamma_{t-1} + 1 + log 1/delta)))^2``."""
    if t < 1:
        raise ValueError("iteration index starts at 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if B <= 0:
        raise ValueError("B must be positive")
    gamma = float(gamma_fn(t - 1))
    if gamma < 0:
        raise ValueError(f"information gain estimate is negative ({gamma})")
    return (B + noise_sd * math.sqrt(2.0 * (gamma + 1.0 + math.log(1.0 / delta)))) ** 2


@dataclass(frozen=True)
class BetaSchedule:
    kind: str = "practical"
    B: float = 1.0
    noise_sd: float = 0.1
    delta: float = 0.1
    gamma_fn: Callable[[int], float] | None = None

    def __post_init__(self):
        if self.kind not in ("practical", "theoretical"):
            raise ValueError(f"unknown beta schedule {self.kind!r}")
        if self.kind == "theoretical" and self.gamma_fn is None:
            raise ValueError("the theoretical schedule needs gamma_fn")

    def __call__(self, t: int) -> float:
        if self.kind == "practical":
            return beta_practical(t)
        return beta_theoretical(t, self.B, self.noise_sd, self.delta, self.gamma_fn)


def log_gamma_gain(t: int) -> float:
    """Cheap monotone stand-in for the information gain, ``log(1 + t)``."""
    return math.log1p(t)


@dataclass(frozen=True, eq=False)
class ConfidenceField:
    """A posterior together with the beta frozen for the current iteration."""

    posterior: GPPosterior
    beta: float

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")

    @property
    def root_beta(self) -> float:
        return math.sqrt(self.beta)

    @property
    def d_x(self) -> int:
        return self.posterior.d_x

    def bounds(self, P):
        """Lower and upper bound arrays at the joint points ``P``."""
        mu, sd = self.posterior.predict(P)
        w = self.root_beta * sd
        return mu - w, mu + w

    def bounds_grad(self, P):
        """``(l, u, dl, du)``, gradients w.r.t. the full joint input."""
        mu, sd, dmu, dsd, _ = self.posterior.predict_grad(P)
        rb = self.root_beta
        return mu - rb * sd, mu + rb * sd, dmu - rb * dsd, dmu + rb * dsd

    def at_x(self, x, Z):
        """Bounds at a fixed ``x`` for each row of ``Z``."""
        return self.bounds(joint(x, Z))


def joint(x, Z) -> np.ndarray:
    """Stack a single ``x`` against every row of ``Z``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    return np.hstack([np.broadcast_to(x, (Z.shape[0], x.shape[0])), Z])


def joint_grid(X, Z) -> np.ndarray:
    """All pairs; row ``i * len(Z) + j`` is ``(X[i], Z[j])``."""
    X = np.atleast_2d(X)
    Z = np.atleast_2d(Z)
    return np.hstack([np.repeat(X, Z.shape[0], axis=0), np.tile(Z, (X.shape[0], 1))])


def bounds_at(field: ConfidenceField, p):
    l, u = field.bounds(np.atleast_2d(p))
    return float(l[0]), float(u[0])
