"""Synthetic test problems on the unit box and their ground-truth VaR.

The classic minimisation benchmarks are rescaled from their native domains and
negated, so every problem is a maximisation. The first ``d_x`` coordinates are
the decision variable and the remaining ``d_z`` the environment.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from importlib import resources
from typing import Callable

import numpy as np
from scipy import optimize
from scipy.stats import qmc, truncnorm

from riskbo.env import EnvDistribution, make_discrete_grid, make_truncated_gaussian
from riskbo.gp import GPHyper, kernel_matrix
from riskbo.risk import empirical_var, var_rows

NOISE_VAR = 0.01
N_QUASI = 10_000


# base functions in native coordinates, rows of P


def branin(P):
    P = np.atleast_2d(P)
    x1, x2 = P[:, 0], P[:, 1]
    b, c = 5.1 / (4 * math.pi**2), 5 / math.pi
    s, t = 10.0, 1 / (8 * math.pi)
    return (x2 - b * x1**2 + c * x1 - 6) ** 2 + s * (1 - t) * np.cos(x1) + s


def goldstein_price(P):
    P = np.atleast_2d(P)
    x1, x2 = P[:, 0], P[:, 1]
    a = 1 + (x1 + x2 + 1) ** 2 * (19 - 14 * x1 + 3 * x1**2 - 14 * x2 + 6 * x1 * x2 + 3 * x2**2)
    b = 30 + (2 * x1 - 3 * x2) ** 2 * (18 - 32 * x1 + 12 * x1**2 + 48 * x2 - 36 * x1 * x2 + 27 * x2**2)
    return a * b


_H3_A = np.array([[3.0, 10, 30], [0.1, 10, 35], [3.0, 10, 30], [0.1, 10, 35]])
_H3_P = 1e-4 * np.array([[3689, 1170, 2673], [4699, 4387, 7470], [1091, 8732, 5547], [381, 5743, 8828]])
_H3_C = np.array([1.0, 1.2, 3.0, 3.2])


def hartmann3(P):
    P = np.atleast_2d(P)
    inner = ((P[:, None, :] - _H3_P[None]) ** 2 * _H3_A[None]).sum(axis=2)
    return -(_H3_C * np.exp(-inner)).sum(axis=1)


@dataclass(frozen=True)
class _Base:
    fn: Callable
    lower: tuple
    upper: tuple
    minimum: float
    minimizers: tuple


BASES = {
    "branin": _Base(branin, (-5.0, 0.0), (10.0, 15.0), 0.397887,
                    ((-math.pi, 12.275), (math.pi, 2.275), (9.42478, 2.475))),
    "goldstein": _Base(goldstein_price, (-2.0, -2.0), (2.0, 2.0), 3.0, ((0.0, -1.0),)),
    "hartmann3": _Base(hartmann3, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0), -3.86278,
                       ((0.114614, 0.555649, 0.852547),)),
}

# name -> (base, d_x, d_z, atoms per axis)
PROBLEMS = {
    "branin": ("branin", 1, 1, 100),
    "goldstein": ("goldstein", 1, 1, 100),
    "hartmann-1-2": ("hartmann3", 1, 2, 8),
    "hartmann-2-1": ("hartmann3", 2, 1, 100),
}


def unit_objective(base: str):
    """Negated base function taking unit-box inputs."""
    b = BASES[base]
    lo, hi = np.array(b.lower), np.array(b.upper)

    def f(P):
        return -b.fn(lo + np.atleast_2d(P) * (hi - lo))

    return f


@dataclass(frozen=True, eq=False)
class Problem:
    name: str
    d_x: int
    d_z: int
    objective: Callable
    env: EnvDistribution
    alpha: float = 0.1
    noise_var: float = NOISE_VAR
    x_candidates: np.ndarray | None = None
    z_mode: str = "discrete"

    @property
    def lower(self) -> np.ndarray:
        return np.zeros(self.d_x)

    @property
    def upper(self) -> np.ndarray:
        return np.ones(self.d_x)

    def __call__(self, x, z) -> float:
        p = np.concatenate([np.atleast_1d(x), np.atleast_1d(z)])[None, :]
        return float(self.objective(p)[0])

    def observe(self, x, z, rng) -> float:
        """Noisy query; the noise never enters the metric."""
        return self(x, z) + float(rng.normal(0.0, math.sqrt(self.noise_var)))

    def values(self, X, Z) -> np.ndarray:
        """Objective on all pairs, shape ``(len(X), len(Z))``."""
        X, Z = np.atleast_2d(X), np.atleast_2d(Z)
        P = np.hstack([np.repeat(X, Z.shape[0], axis=0), np.tile(Z, (X.shape[0], 1))])
        return np.asarray(self.objective(P), dtype=float).reshape(X.shape[0], Z.shape[0])


def make_problem(name: str, z_mode: str = "discrete", alpha: float = 0.1) -> Problem:
    if name not in PROBLEMS:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}")
    base, d_x, d_z, per_axis = PROBLEMS[name]
    if z_mode == "discrete":
        env = make_discrete_grid(d_z, per_axis, "gaussian-bump")
    elif z_mode == "continuous":
        env = make_truncated_gaussian(d_z)
    else:
        raise ValueError(f"z_mode must be 'discrete' or 'continuous', got {z_mode!r}")
    return Problem(name, d_x, d_z, unit_objective(base), env, alpha, z_mode=z_mode)


@functools.lru_cache(maxsize=16)
def _quasi_env_sample(mean: tuple, sd: tuple, low: tuple, high: tuple, n: int = N_QUASI) -> np.ndarray:
    mean, sd = np.array(mean), np.array(sd)
    a, b = (np.array(low) - mean) / sd, (np.array(high) - mean) / sd
    U = qmc.Halton(d=mean.shape[0], scramble=True, seed=12345).random(n)
    return truncnorm.ppf(U, a, b, loc=mean, scale=sd)


def env_reference_sample(env: EnvDistribution) -> np.ndarray:
    """Fixed quasi-random sample of a continuous environment used for ground truth."""
    return _quasi_env_sample(tuple(env.mean), tuple(env.sd), tuple(env.low), tuple(env.high))


def true_var_rows(problem: Problem, X, alpha=None) -> np.ndarray:
    alpha = problem.alpha if alpha is None else alpha
    X = np.atleast_2d(X)
    if problem.env.is_discrete:
        return var_rows(problem.values(X, problem.env.atoms), problem.env.masses, alpha)[0]
    Zs = env_reference_sample(problem.env)
    return np.array([empirical_var(problem.values(x, Zs)[0], alpha) for x in X])


def true_var(problem: Problem, x, alpha=None) -> float:
    """Noise-free ``VaR_alpha(f(x, Z))``."""
    return float(true_var_rows(problem, np.atleast_1d(np.asarray(x, dtype=float))[None, :], alpha)[0])


def _grid(d, n):
    axes = np.meshgrid(*[np.linspace(0.0, 1.0, n)] * d, indexing="ij")
    return np.stack([a.ravel() for a in axes], axis=1)


def _oracle(problem: Problem, alpha, n_per_axis, n_refine):
    if problem.x_candidates is not None:
        v = true_var_rows(problem, problem.x_candidates, alpha)
        i = int(np.argmax(v))
        return problem.x_candidates[i].copy(), float(v[i])
    if problem.d_x > 3:
        raise ValueError("grid oracle supports d_x <= 3")
    G = _grid(problem.d_x, n_per_axis)
    v = np.concatenate([true_var_rows(problem, G[s:s + 2000], alpha) for s in range(0, G.shape[0], 2000)])
    best_x, best_v = G[int(np.argmax(v))].copy(), float(v.max())
    h = 1.0 / (n_per_axis - 1)
    for i in np.argsort(-v, kind="stable")[:n_refine]:
        lo = np.clip(G[i] - h, 0.0, 1.0)
        hi = np.clip(G[i] + h, 0.0, 1.0)
        res = optimize.minimize(lambda x: -true_var(problem, np.clip(x, lo, hi), alpha), G[i], method="Powell",
                                bounds=list(zip(lo, hi)), options={"xtol": 1e-9, "ftol": 1e-12})
        x = np.clip(res.x, lo, hi)
        val = true_var(problem, x, alpha)
        if val > best_v:
            best_x, best_v = x, val
    return best_x, best_v


_ORACLE_CACHE: dict = {}


def oracle_best(problem: Problem, alpha=None, n_per_axis: int = 201, n_refine: int = 5, recompute: bool = False):
    """``(x_*, VaR_alpha(f(x_*, Z)))`` from a dense grid refined by local search.

    Named problems read the frozen table unless ``recompute`` is set; results are
    cached per process either way.
    """
    alpha = problem.alpha if alpha is None else alpha
    ident = (problem.name, problem.z_mode) if problem.name in PROBLEMS else id(problem)
    key = (ident, alpha, n_per_axis, n_refine)
    if key not in _ORACLE_CACHE or recompute:
        frozen = oracle_table().get((problem.name, problem.z_mode, float(alpha)))
        if frozen is not None and not recompute and problem.name in PROBLEMS:
            _ORACLE_CACHE[key] = (problem, frozen[1], frozen[0])
        else:
            _ORACLE_CACHE[key] = (problem, *_oracle(problem, alpha, n_per_axis, n_refine))
    _, x, v = _ORACLE_CACHE[key]
    return x.copy(), v


def oracle_table() -> dict:
    """Frozen oracle values keyed by ``(name, z_mode, alpha)``."""
    out = {}
    path = resources.files("riskbo.data").joinpath("oracles.tsv")
    if not path.is_file():
        return out
    text = path.read_text()
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        name, mode, alpha, value, *x = line.split("\t")
        out[(name, mode, float(alpha))] = (float(value), np.array([float(v) for v in x]))
    return out


def load_atoms(name: str) -> EnvDistribution:
    """Discrete environment of a problem read from its fixture file (``z... mass`` per line)."""
    rows = np.loadtxt(resources.files("riskbo.data").joinpath(f"atoms_{name}.tsv").open(), ndmin=2)
    return EnvDistribution.discrete(rows[:, :-1], rows[:, -1])


def make_gp_sample_problem(rng, n_x: int = 40, n_z: int = 10, hyper: GPHyper | None = None, alpha: float = 0.1,
                           noise_var: float = NOISE_VAR, jitter: float = 1e-10) -> Problem:
    """A 1+1 dimensional problem whose truth is an exact draw from the GP prior.

    The draw lives on an evenly spaced ``n_x`` by ``n_z`` grid, so ``x`` is
    restricted to ``x_candidates`` and ``z`` to uniform atoms.
    """
    rng = np.random.default_rng(rng)
    hyper = hyper or GPHyper(np.array([0.25, 0.25]), 1.0, noise_var)
    xs = np.linspace(0.0, 1.0, n_x)
    zs = np.linspace(0.0, 1.0, n_z)
    P = np.stack(np.meshgrid(xs, zs, indexing="ij"), axis=-1).reshape(-1, 2)
    K = kernel_matrix(P, P, hyper) + jitter * np.eye(P.shape[0])
    table = np.linalg.cholesky(K) @ rng.standard_normal(P.shape[0])

    def f(Q):
        Q = np.atleast_2d(Q)
        i = np.rint(Q[:, 0] * (n_x - 1)).astype(int)
        j = np.rint(Q[:, 1] * (n_z - 1)).astype(int)
        if (np.any(np.abs(xs[i] - Q[:, 0]) > 1e-9) or np.any(np.abs(zs[j] - Q[:, 1]) > 1e-9)):
            raise ValueError("GP-sample problems are defined on their grid only")
        return table[i * n_z + j]

    env = EnvDistribution.discrete(zs[:, None], np.full(n_z, 1.0 / n_z))
    return Problem("gp-sample", 1, 1, f, env, alpha, noise_var, xs[:, None])


__all__ = [
    "BASES",
    "PROBLEMS",
    "Problem",
    "branin",
    "env_reference_sample",
    "goldstein_price",
    "hartmann3",
    "load_atoms",
    "make_gp_sample_problem",
    "make_problem",
    "oracle_best",
    "oracle_table",
    "true_var",
    "true_var_rows",
    "unit_objective",
]
