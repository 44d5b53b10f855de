"""Lacing values: environmental points whose confidence band contains the VaR interval.

For finite supports all of them are enumerated. For continuous supports a
projected descent on ``relu(-d_u) + relu(-d_l)`` finds one, and a density
ascent restricted to the certified region then prefers likely points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from riskbo.bounds import ConfidenceField, joint
from riskbo.env import EnvDistribution
from riskbo.risk import VaRInterval, var_interval

DISCRETE_SLACK = 1e-9
CONTINUOUS_SLACK = 1e-6


class LacingError(RuntimeError):
    """No lacing value among the atoms; existence is guaranteed, so this is a VaR bug."""


@dataclass(frozen=True)
class LVResult:
    z: np.ndarray
    certified: bool
    d_u: float
    d_l: float
    density: float
    loss: float = 0.0


@dataclass(frozen=True)
class LVSearchConfig:
    n_starts: int = 16
    hinge_steps: int = 200
    density_steps: int = 60
    step: float = 0.05
    tol: float = CONTINUOUS_SLACK


def lv_candidate_indices(field: ConfidenceField, x, env: EnvDistribution, alpha, interval: VaRInterval | None = None):
    """Indices of atoms ``z`` with ``l(x,z) <= VaR(l)`` and ``u(x,z) >= VaR(u)``."""
    if not env.is_discrete:
        raise ValueError("candidate enumeration needs a discrete environment")
    interval = interval or var_interval(field, x, env, alpha)
    l, u = field.at_x(x, env.atoms)
    idx = np.flatnonzero((l <= interval.lo) & (u >= interval.hi))
    if idx.size == 0:
        raise LacingError(f"no lacing value at x={interval.x} (alpha={alpha})")
    return idx


def lv_candidates_discrete(field: ConfidenceField, x, env: EnvDistribution, alpha) -> np.ndarray:
    return env.atoms[lv_candidate_indices(field, x, env, alpha)]


def select_lv(candidates, env: EnvDistribution, mode: str = "max-mass", rng=None) -> np.ndarray:
    """Pick one candidate: uniformly at random, or the most probable one.

    Ties in probability are broken by the lexicographically smallest coordinates.
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    if candidates.shape[0] == 0:
        raise LacingError("empty candidate set")
    if candidates.shape[0] == 1:
        return candidates[0].copy()
    if mode == "uniform":
        return candidates[int(np.random.default_rng(rng).integers(candidates.shape[0]))].copy()
    if mode != "max-mass":
        raise ValueError(f"unknown lv mode {mode!r}")
    p = env.pdf(candidates)
    best = np.flatnonzero(p == p.max())
    keys = candidates[best]
    return keys[np.lexsort(keys.T[::-1])[0]].copy()


def lv_margins(z, field: ConfidenceField, x, interval: VaRInterval):
    """``(d_u, d_l)`` for each row of ``z``."""
    l, u = field.at_x(x, np.atleast_2d(z))
    return u - interval.hi, interval.lo - l


def lv_loss(z, field: ConfidenceField, x, interval: VaRInterval):
    """``relu(-d_u) + relu(-d_l)``; zero exactly on lacing values."""
    d_u, d_l = lv_margins(z, field, x, interval)
    out = np.maximum(-d_u, 0.0) + np.maximum(-d_l, 0.0)
    return out if np.ndim(z) > 1 else float(out[0])


def _hinge_and_grad(Z, field, x, interval):
    d_x = np.atleast_1d(x).shape[0]
    l, u, dl, du = field.bounds_grad(joint(x, Z))
    d_u, d_l = u - interval.hi, interval.lo - l
    loss = np.maximum(-d_u, 0.0) + np.maximum(-d_l, 0.0)
    grad = -du[:, d_x:] * (d_u < 0)[:, None] + dl[:, d_x:] * (d_l < 0)[:, None]
    return loss, grad, d_u, d_l


def find_lv_continuous(
    field: ConfidenceField,
    x,
    env: EnvDistribution,
    alpha,
    interval: VaRInterval | None = None,
    cfg: LVSearchConfig | None = None,
    pinball_cfg=None,
    mode: str = "max-mass",
    rng=None,
) -> LVResult:
    """Search the support box for a lacing value, preferring high density.

    Phase one runs projected, normalised-gradient descent with step halving on the
    hinge loss from ``cfg.n_starts`` env draws. Phase two (``mode="max-mass"``)
    moves certified points up the log-density, accepting only steps that stay
    certified. Returns the densest certified point, or the lowest-loss point with
    ``certified=False`` if no start certifies.
    """
    cfg = cfg or LVSearchConfig()
    rng = np.random.default_rng(rng)
    if interval is None:
        interval = var_interval(field, x, env, alpha, pinball_cfg, rng)
    lo_box, hi_box = env.low, env.high
    Z = env.sample(cfg.n_starts, rng)
    loss, grad, _, _ = _hinge_and_grad(Z, field, x, interval)
    step = np.full(Z.shape[0], cfg.step)
    for _ in range(cfg.hinge_steps):
        active = (loss > cfg.tol) & (step > 1e-10)
        if not active.any():
            break
        norm = np.linalg.norm(grad, axis=1)
        moving = active & (norm > 0)
        direction = np.where(moving[:, None], grad / np.where(norm > 0, norm, 1.0)[:, None], 0.0)
        trial = np.clip(Z - step[:, None] * direction, lo_box, hi_box)
        t_loss, t_grad, _, _ = _hinge_and_grad(trial, field, x, interval)
        better = moving & (t_loss < loss)
        Z[better], loss[better], grad[better] = trial[better], t_loss[better], t_grad[better]
        step = np.where(active & ~better, 0.5 * step, step)
        step[~moving & active] = 0.0
    certified = loss <= cfg.tol
    if mode == "max-mass" and certified.any():
        eta = np.full(Z.shape[0], 0.5)
        for _ in range(cfg.density_steps):
            trial = np.clip(Z + eta[:, None] * env.sd**2 * env.grad_log_pdf(Z), lo_box, hi_box)
            d_u, d_l = lv_margins(trial, field, x, interval)
            ok = certified & (d_u >= -cfg.tol) & (d_l >= -cfg.tol)
            Z[ok] = trial[ok]
            eta = np.where(certified & ~ok, 0.5 * eta, eta)
    d_u, d_l = lv_margins(Z, field, x, interval)
    loss = np.maximum(-d_u, 0.0) + np.maximum(-d_l, 0.0)
    certified = (d_u >= -cfg.tol) & (d_l >= -cfg.tol)
    dens = env.pdf(Z)
    if certified.any():
        cand = np.flatnonzero(certified)
        i = int(rng.choice(cand)) if mode == "uniform" else int(cand[np.argmax(dens[cand])])
    else:
        i = int(np.argmin(loss))
    return LVResult(Z[i].copy(), bool(certified[i]), float(d_u[i]), float(d_l[i]), float(dens[i]), float(loss[i]))


def lv_hit_rate(field: ConfidenceField, x, env: EnvDistribution, alpha, n: int, rng=None, exhaustive: bool = False) -> float:
    """Fraction of environment draws that are lacing values at ``x``.

    ``exhaustive=True`` takes every atom once instead of sampling.
    """
    idx = lv_candidate_indices(field, x, env, alpha)
    if exhaustive:
        return idx.size / env.n_atoms
    draws = np.random.default_rng(rng).choice(env.n_atoms, size=n, p=env.masses)
    return float(np.isin(draws, idx).mean())
