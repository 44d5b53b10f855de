"""Value-at-Risk: exact lower quantiles for finite supports, pinball-loss SGD otherwise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from riskbo.bounds import ConfidenceField
from riskbo.env import EnvDistribution

TIE_TOL = 1e-12
MASS_TOL = 1e-12


class EstimatorError(RuntimeError):
    pass


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def var_rows(values, masses, alpha):
    """Row-wise VaR of an ``(m, n)`` value matrix under atom masses ``(n,)``.

    Returns ``(var, atom)`` where ``atom[i]`` is the index (into the columns) of the
    smallest-valued atom of the tie group attaining the VaR in row ``i``.
    """
    _check_alpha(alpha)
    V = np.atleast_2d(np.asarray(values, dtype=float))
    masses = np.asarray(masses, dtype=float)
    order = np.argsort(V, axis=1, kind="stable")
    S = np.take_along_axis(V, order, axis=1)
    cum = np.cumsum(masses[order], axis=1)
    k = np.argmax(cum >= alpha - MASS_TOL, axis=1)
    # values closer than TIE_TOL count as one value of the distribution
    m, n = S.shape
    brk = np.ones((m, n), dtype=bool)
    brk[:, 1:] = np.diff(S, axis=1) > TIE_TOL
    first = np.maximum.accumulate(np.where(brk, np.arange(n)[None, :], 0), axis=1)
    kf = first[np.arange(m), k]
    rows = np.arange(m)
    return S[rows, kf], order[rows, kf]


def var_discrete(values, masses, alpha) -> float:
    """Smallest value ``v`` with ``P(X <= v) >= alpha`` for a finite distribution."""
    values = np.asarray(values, dtype=float).ravel()
    masses = np.asarray(masses, dtype=float).ravel()
    if values.shape != masses.shape:
        raise ValueError("values and masses must have the same length")
    if not np.all(np.isfinite(values)):
        raise ValueError("values must be finite")
    return float(var_rows(values[None, :], masses, alpha)[0][0])


def empirical_var(samples, alpha) -> float:
    """Lower alpha-quantile of equally weighted samples."""
    _check_alpha(alpha)
    return float(np.quantile(np.asarray(samples, dtype=float), alpha, method="inverted_cdf"))


def pinball(w, alpha):
    """Tilted absolute value: ``alpha*w`` for ``w >= 0``, ``(alpha-1)*w`` otherwise."""
    w = np.asarray(w, dtype=float)
    out = np.where(w >= 0, alpha * w, (alpha - 1.0) * w)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class PinballConfig:
    """Knobs of the stochastic quantile estimator.

    ``step`` is relative to the spread of a pilot sample, so the estimator is
    invariant to the scale of the values. With ``polish`` the averaged iterate is
    replaced by the exact minimiser of the empirical pinball loss over all
    drawn samples; plain SGD stalls on near-flat stretches of the loss.
    """

    batch: int = 50
    iters: int = 2000
    step: float = 1.0
    nu0: float | None = None
    pilot: int = 256
    polish: bool = True

    def __post_init__(self):
        if self.batch < 1 or self.iters < 1 or self.pilot < 1:
            raise ValueError("batch, iters and pilot must be >= 1")
        if self.step <= 0:
            raise ValueError("step must be positive")


def _draw(sampler, n, rng):
    if isinstance(sampler, EnvDistribution):
        return sampler.sample(n, rng)
    return np.asarray(sampler(n, rng), dtype=float)


def _evaluate(value_fn, z):
    v = np.asarray(value_fn(z), dtype=float).ravel()
    bad = ~np.isfinite(v)
    if np.any(bad):
        raise EstimatorError(f"value function is not finite at z={np.asarray(z)[np.argmax(bad)]}")
    return v


def estimate_var_pinball(value_fn, sampler, alpha, cfg: PinballConfig | None = None, rng=None) -> float:
    """Estimate the alpha-VaR of ``value_fn(Z)`` by SGD on the expected pinball loss.

    ``value_fn`` maps an ``(n, d_z)`` array to ``n`` values. ``sampler`` is an
    :class:`EnvDistribution` or a callable ``(n, rng) -> samples``. Steps decay as
    ``1/sqrt(k)``. Without ``cfg.polish`` the result averages the second half of
    the iterates.
    """
    _check_alpha(alpha)
    cfg = cfg or PinballConfig()
    rng = np.random.default_rng(rng)
    pilot = _evaluate(value_fn, _draw(sampler, cfg.pilot, rng))
    nu = empirical_var(pilot, alpha) if cfg.nu0 is None else float(cfg.nu0)
    scale = float(np.std(pilot))
    if scale == 0.0:
        return nu
    c = cfg.step * scale
    half = cfg.iters // 2
    acc, count = 0.0, 0
    seen = [pilot]
    for k in range(1, cfg.iters + 1):
        v = _evaluate(value_fn, _draw(sampler, cfg.batch, rng))
        g = np.mean(v < nu) - alpha
        nu -= c / np.sqrt(k) * g
        if k > half:
            acc += nu
            count += 1
        if cfg.polish:
            seen.append(v)
    if cfg.polish:
        # the empirical pinball loss is minimised at its lower alpha-quantile
        return empirical_var(np.concatenate(seen), alpha)
    return acc / count


@dataclass(frozen=True)
class VaRInterval:
    lo: float
    hi: float
    alpha: float
    x: tuple

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, v, tol=0.0) -> bool:
        return self.lo - tol <= v <= self.hi + tol


def var_of_bound(field: ConfidenceField, x, which: str, env: EnvDistribution, alpha, cfg=None, rng=None) -> float:
    """VaR of ``l(x, Z)`` (``which="lower"``) or ``u(x, Z)`` (``which="upper"``)."""
    if which not in ("lower", "upper"):
        raise ValueError("which must be 'lower' or 'upper'")
    pick = 0 if which == "lower" else 1
    if env.is_discrete:
        return var_discrete(field.at_x(x, env.atoms)[pick], env.masses, alpha)
    return estimate_var_pinball(lambda Z: field.at_x(x, Z)[pick], env, alpha, cfg, rng)


def var_interval(field: ConfidenceField, x, env: EnvDistribution, alpha, cfg=None, rng=None) -> VaRInterval:
    """``[VaR(l(x, Z)), VaR(u(x, Z))]``.

    The continuous path uses common random numbers for both ends. An inversion
    within 1% of the band's spread is treated as estimator noise and collapsed to
    the midpoint; anything larger raises :class:`EstimatorError`.
    """
    xt = tuple(float(v) for v in np.atleast_1d(x))
    if env.is_discrete:
        l, u = field.at_x(x, env.atoms)
        lo, hi = var_discrete(l, env.masses, alpha), var_discrete(u, env.masses, alpha)
        if lo > hi:
            raise EstimatorError(f"VaR interval inverted at x={xt}: {lo} > {hi}")
        return VaRInterval(lo, hi, alpha, xt)
    seed = int(np.random.default_rng(rng).integers(2**63))
    lo = var_of_bound(field, x, "lower", env, alpha, cfg, np.random.default_rng(seed))
    hi = var_of_bound(field, x, "upper", env, alpha, cfg, np.random.default_rng(seed))
    if lo > hi:
        l, u = field.at_x(x, env.sample(256, np.random.default_rng(seed)))
        spread = float(np.ptp(np.concatenate([l, u])))
        if lo - hi > 0.01 * spread + 1e-12:
            raise EstimatorError(f"VaR interval inverted at x={xt}: {lo} > {hi}")
        lo = hi = 0.5 * (lo + hi)
    return VaRInterval(lo, hi, alpha, xt)


__all__ = [
    "EstimatorError",
    "PinballConfig",
    "VaRInterval",
    "empirical_var",
    "estimate_var_pinball",
    "pinball",
    "var_discrete",
    "var_interval",
    "var_of_bound",
    "var_rows",
]
