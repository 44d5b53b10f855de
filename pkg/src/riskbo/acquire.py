"""Choosing the next input: maximise the VaR of the upper bound over the box.

Finite environments use the exact VaR with a quasi-random sweep followed by
multi-start projected gradient ascent. Continuous environments hand the upper
bound to the local neural surrogate optimiser. The max-min (StableOpt) rule and
a uniform random baseline share the same machinery.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.stats import qmc

from riskbo.bounds import ConfidenceField, joint_grid
from riskbo.env import EnvDistribution
from riskbo.risk import PinballConfig, empirical_var, estimate_var_pinball, var_rows
from riskbo.surrogate import LnsoConfig, lnso_maximize

TIE_MARGIN = 1e-9
MIN_STEP = 1e-6
_CHUNK = 512


@dataclass(frozen=True, eq=False)
class AcquisitionProblem:
    """Everything needed to pick ``x_t``: the band, the environment and the box.

    ``x_candidates`` restricts the search to a finite set when given.
    ``n_quantile_samples`` sizes the common-random-number sample used to rank
    points when the environment is continuous.
    """

    field: ConfidenceField
    env: EnvDistribution
    alpha: float
    lower: np.ndarray
    upper: np.ndarray
    n_starts: int = 10
    n_steps: int = 100
    step: float = 0.05
    n_sweep: int = 512
    x_candidates: np.ndarray | None = None
    lnso: LnsoConfig = dc_field(default_factory=LnsoConfig)
    pinball: PinballConfig = dc_field(default_factory=PinballConfig)
    n_quantile_samples: int = 256

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape:
            raise ValueError("lower and upper must have the same shape")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ValueError("domain bounds must be finite")
        if np.any(lower >= upper):
            raise ValueError("need lower < upper on every axis")
        if lower.shape[0] != self.field.d_x:
            raise ValueError(f"domain has {lower.shape[0]} axes but the field has d_x={self.field.d_x}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if min(self.n_starts, self.n_steps, self.n_sweep) < 1:
            raise ValueError("optimizer counts must be >= 1")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if self.x_candidates is not None:
            object.__setattr__(self, "x_candidates", np.atleast_2d(np.asarray(self.x_candidates, dtype=float)))

    @property
    def d_x(self) -> int:
        return self.lower.shape[0]


def _upper_matrix(field: ConfidenceField, X, Z):
    X = np.atleast_2d(X)
    out = np.empty((X.shape[0], Z.shape[0]))
    for s in range(0, X.shape[0], _CHUNK):
        blk = X[s:s + _CHUNK]
        out[s:s + blk.shape[0]] = field.bounds(joint_grid(blk, Z))[1].reshape(blk.shape[0], Z.shape[0])
    return out


def acq_value(prob: AcquisitionProblem, X):
    """``VaR_alpha(u(x, Z))`` for one ``x`` (scalar) or each row of ``X``.

    Exact for finite environments. For continuous ones the pinball estimator is
    run per point, which is slow; the optimiser ranks with a shared sample instead.
    """
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X2 = np.atleast_2d(X)
    if prob.env.is_discrete:
        vals = var_rows(_upper_matrix(prob.field, X2, prob.env.atoms), prob.env.masses, prob.alpha)[0]
    else:
        rng = np.random.default_rng(0)
        vals = np.array([
            estimate_var_pinball(lambda Z, x=x: prob.field.at_x(x, Z)[1], prob.env, prob.alpha, prob.pinball, rng)
            for x in X2
        ])
    return float(vals[0]) if single else vals


def _attaining(prob, X):
    """Values, index of the VaR-attaining atom and a tie flag per row."""
    env = prob.env
    U = _upper_matrix(prob.field, X, env.atoms)
    vals, k = var_rows(U, env.masses, prob.alpha)
    near = np.abs(U - vals[:, None]) <= TIE_MARGIN
    degenerate = near.sum(axis=1) > 1
    for i in np.flatnonzero(degenerate):
        cand = np.flatnonzero(near[i])
        k[i] = cand[np.argmax(env.masses[cand])]
    return vals, k, degenerate


def _grad_at_atoms(field: ConfidenceField, X, Zk):
    _, _, _, du = field.bounds_grad(np.hstack([np.atleast_2d(X), Zk]))
    return du[:, :field.d_x]


def acq_grad(prob: AcquisitionProblem, x):
    """Gradient in ``x`` of the exact acquisition and a degeneracy flag.

    The acquisition is piecewise smooth: away from ties it equals ``u(x, z_a)``
    for the attaining atom ``z_a``. When another atom is within ``TIE_MARGIN`` the
    heavier atom's gradient is returned and the flag is set.
    """
    if not prob.env.is_discrete:
        raise ValueError("acq_grad needs a discrete environment")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _, k, deg = _attaining(prob, x[None, :])
    return _grad_at_atoms(prob.field, x[None, :], prob.env.atoms[k])[0], bool(deg[0])


def _value_grad_var(prob):
    def fn(X, need_grad=True):
        vals, k, _ = _attaining(prob, X)
        if not need_grad:
            return vals, None
        return vals, _grad_at_atoms(prob.field, X, prob.env.atoms[k])
    return fn


def _value_grad_minmax(field: ConfidenceField, atoms):
    def fn(X, need_grad=True):
        U = _upper_matrix(field, X, atoms)
        k = np.argmin(U, axis=1)
        vals = U[np.arange(U.shape[0]), k]
        if not need_grad:
            return vals, None
        return vals, _grad_at_atoms(field, X, atoms[k])
    return fn


def quasi_random_sweep(lower, upper, n, rng) -> np.ndarray:
    """Scrambled Halton points in the box, seeded from ``rng``."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    seed = int(np.random.default_rng(rng).integers(2**32))
    pts = qmc.Halton(d=lower.shape[0], scramble=True, seed=seed).random(n)
    return lower + pts * (upper - lower)


def multistart_ascent(value_grad, lower, upper, n_starts=10, n_steps=100, step=0.05, n_sweep=512, rng=None,
                      extra=None):
    """Sweep, then projected normalised-gradient ascent from the best sweep points.

    ``value_grad(X, need_grad)`` returns values and ``(m, d)`` gradients. Steps are
    taken in unit-box coordinates and halved whenever they fail to improve.
    Returns ``(x_best, v_best, sweep_best)``; ``v_best`` is at least every swept value.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    width = upper - lower
    S = quasi_random_sweep(lower, upper, n_sweep, rng)
    if extra is not None:
        S = np.vstack([S, np.atleast_2d(extra)])
    sv, _ = value_grad(S, need_grad=False)
    sweep_best = float(sv.max())
    starts = np.argsort(-sv, kind="stable")[:n_starts]
    X = S[starts].copy()
    v, g = value_grad(X)
    eta = np.full(X.shape[0], float(step))
    for _ in range(n_steps):
        gu = g * width
        norm = np.linalg.norm(gu, axis=1)
        act = np.flatnonzero((eta > MIN_STEP) & (norm > 0))
        if act.size == 0:
            break
        d = gu[act] / norm[act, None]
        trial = np.clip(X[act] + eta[act, None] * d * width, lower, upper)
        tv, tg = value_grad(trial)
        ok = tv > v[act]
        win = act[ok]
        X[win], v[win], g[win] = trial[ok], tv[ok], tg[ok]
        eta[act[~ok]] *= 0.5
    i = int(np.argmax(v))
    if v[i] >= sweep_best:
        return X[i].copy(), float(v[i]), sweep_best
    j = int(np.argmax(sv))
    return S[j].copy(), sweep_best, sweep_best


def _continuous_select(prob: AcquisitionProblem, rng):
    Zs = prob.env.sample(prob.n_quantile_samples, rng)
    S = quasi_random_sweep(prob.lower, prob.upper, prob.n_sweep, rng)

    def ranked(X):
        U = _upper_matrix(prob.field, X, Zs)
        return np.array([empirical_var(row, prob.alpha) for row in U])

    sv = ranked(S)
    x0 = S[int(np.argmax(sv))]
    x_l = lnso_maximize(lambda P: prob.field.bounds(P)[1], prob.env, prob.alpha, prob.lower, prob.upper, x0,
                        prob.lnso, rng)
    return x_l if ranked(x_l[None, :])[0] >= sv.max() else x0.copy()


def select_x(prob: AcquisitionProblem, rng=None) -> np.ndarray:
    """``argmax_x VaR_alpha(u(x, Z))`` over the box (or over ``x_candidates``)."""
    rng = np.random.default_rng(rng)
    if prob.x_candidates is not None:
        if prob.env.is_discrete:
            vals = acq_value(prob, prob.x_candidates)
        else:
            Zs = prob.env.sample(prob.n_quantile_samples, rng)
            vals = np.array([empirical_var(r, prob.alpha) for r in _upper_matrix(prob.field, prob.x_candidates, Zs)])
        return prob.x_candidates[int(np.argmax(vals))].copy()
    if not prob.env.is_discrete:
        return _continuous_select(prob, rng)
    x, _, _ = multistart_ascent(_value_grad_var(prob), prob.lower, prob.upper, prob.n_starts, prob.n_steps,
                                prob.step, prob.n_sweep, rng)
    return x


def maxmin_value(field: ConfidenceField, X, atoms):
    """``min_z u(x, z)`` over the atoms for each row of ``X``."""
    return _upper_matrix(field, X, np.atleast_2d(atoms)).min(axis=1)


def stableopt_select(field: ConfidenceField, lower, upper, atoms, rng=None, x_candidates=None, n_starts=10,
                     n_steps=100, step=0.05, n_sweep=512):
    """Max-min rule: ``x = argmax_x min_z u(x, z)``, then ``z = argmin_z l(x, z)``.

    The inner problems are exact over the finite atom set; the outer one uses the
    same sweep and ascent as :func:`select_x`, so with the same ``rng`` both rules
    search identical points.
    """
    atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
    rng = np.random.default_rng(rng)
    if x_candidates is not None:
        C = np.atleast_2d(np.asarray(x_candidates, dtype=float))
        x = C[int(np.argmax(maxmin_value(field, C, atoms)))].copy()
    else:
        x, _, _ = multistart_ascent(_value_grad_minmax(field, atoms), lower, upper, n_starts, n_steps, step,
                                    n_sweep, rng)
    l, _ = field.at_x(x, atoms)
    return x, atoms[int(np.argmin(l))].copy()


def random_select(lower, upper, env: EnvDistribution, rng=None):
    """Baseline: ``x`` uniform on the box, ``z`` uniform over the atoms or the support box."""
    rng = np.random.default_rng(rng)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x = rng.uniform(lower, upper)
    if env.is_discrete:
        z = env.atoms[int(rng.integers(env.n_atoms))].copy()
    else:
        z = rng.uniform(env.low, env.high)
    return x, z


__all__ = [
    "AcquisitionProblem",
    "acq_grad",
    "acq_value",
    "maxmin_value",
    "multistart_ascent",
    "quasi_random_sweep",
    "random_select",
    "select_x",
    "stableopt_select",
]
