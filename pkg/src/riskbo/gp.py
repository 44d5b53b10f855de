"""Exact Gaussian-process regression with an anisotropic squared-exponential kernel.

Inputs are joint points ``p = (x, z)``; the first ``d_x`` coordinates are the
controllable part and gradients are reported w.r.t. those.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

NOISE_FLOOR = 1e-4
LENGTHSCALE_BOUNDS = (1e-3, 1e3)
SIGNAL_BOUNDS = (1e-4, 1e2)
NOISE_BOUNDS = (NOISE_FLOOR, 1e1)
DEGENERATE_SD = 1e-9


class CholeskyError(np.linalg.LinAlgError):
    """Gram matrix factorisation failed; ``min_pivot`` is its smallest eigenvalue."""

    def __init__(self, min_pivot: float):
        super().__init__(f"Gram matrix is not positive definite (smallest pivot {min_pivot:.3e})")
        self.min_pivot = min_pivot


@dataclass(frozen=True, eq=False)
class GPHyper:
    lengthscales: np.ndarray
    signal_var: float = 1.0
    noise_var: float = 0.01

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        if np.any(ls <= 0) or self.signal_var <= 0:
            raise ValueError("lengthscales and signal_var must be positive")
        if self.noise_var < NOISE_FLOOR:
            raise ValueError(f"noise_var {self.noise_var} is below the floor {NOISE_FLOOR}")

    @property
    def dim(self) -> int:
        return self.lengthscales.shape[0]

    def to_log(self) -> np.ndarray:
        return np.concatenate([np.log(self.lengthscales), [np.log(self.signal_var), np.log(self.noise_var)]])

    @classmethod
    def from_log(cls, theta) -> "GPHyper":
        theta = np.asarray(theta, dtype=float)
        return cls(np.exp(theta[:-2]), float(np.exp(theta[-2])), max(float(np.exp(theta[-1])), NOISE_FLOOR))

    def with_noise(self, noise_var: float) -> "GPHyper":
        return GPHyper(self.lengthscales, self.signal_var, noise_var)

    def as_dict(self) -> dict:
        return {
            "lengthscales": [float(v) for v in self.lengthscales],
            "signal_var": float(self.signal_var),
            "noise_var": float(self.noise_var),
        }


def _sqdist_scaled(A, B, lengthscales):
    A = A / lengthscales
    B = B / lengthscales
    d = np.sum(A**2, 1)[:, None] + np.sum(B**2, 1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def kernel_matrix(A, B, hyper: GPHyper) -> np.ndarray:
    """SE covariance ``sf2 * exp(-0.5 * sum((a - b)**2 / l**2))`` between rows of A and B."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    return hyper.signal_var * np.exp(-0.5 * _sqdist_scaled(A, B, hyper.lengthscales))


def se_kernel(p, q, hyper: GPHyper) -> float:
    return float(kernel_matrix(np.atleast_2d(p), np.atleast_2d(q), hyper)[0, 0])


def _cholesky(K):
    try:
        return linalg.cholesky(K, lower=True, check_finite=False)
    except linalg.LinAlgError:
        return None


def _factorize(X, hyper):
    """Cholesky of K + noise*I; one retry with doubled noise before giving up."""
    K = kernel_matrix(X, X, hyper)
    n = K.shape[0]
    for noise in (hyper.noise_var, 2.0 * hyper.noise_var):
        L = _cholesky(K + noise * np.eye(n))
        if L is not None and np.all(np.isfinite(L)):
            return L, noise
    raise CholeskyError(float(np.linalg.eigvalsh(K + hyper.noise_var * np.eye(n)).min()))


class GPPosterior:
    """Immutable fitted posterior over joint inputs.

    ``y_mean`` and ``y_scale`` implement optional output standardisation: the GP is
    fitted to ``(y - y_mean) / y_scale`` and predictions are mapped back.
    """

    def __init__(self, X, y, hyper: GPHyper, d_x: int, y_mean=0.0, y_scale=1.0):
        X = np.asarray(X, dtype=float).reshape(-1, hyper.dim)
        y = np.asarray(y, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y have different lengths")
        if not np.all(np.isfinite(y)):
            raise ValueError("observations must be finite")
        self.X = X
        self.y = y
        self.hyper = hyper
        self.d_x = int(d_x)
        self.y_mean = float(y_mean)
        self.y_scale = float(y_scale)
        if X.shape[0]:
            self.chol, self.noise_used = _factorize(X, hyper)
            r = (y - self.y_mean) / self.y_scale
            self.alpha = linalg.cho_solve((self.chol, True), r, check_finite=False)
        else:
            self.chol = np.zeros((0, 0))
            self.noise_used = hyper.noise_var
            self.alpha = np.zeros(0)
        for a in (self.X, self.y, self.chol, self.alpha):
            a.setflags(write=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.hyper.dim

    def predict(self, P):
        """Posterior mean and standard deviation at the rows of ``P``."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        sf2 = self.hyper.signal_var
        if self.n == 0:
            return np.full(P.shape[0], self.y_mean), np.full(P.shape[0], np.sqrt(sf2) * self.y_scale)
        Ks = kernel_matrix(P, self.X, self.hyper)
        mu = Ks @ self.alpha
        v = linalg.solve_triangular(self.chol, Ks.T, lower=True, check_finite=False)
        var = np.maximum(sf2 - np.sum(v**2, axis=0), 0.0)
        return self.y_mean + self.y_scale * mu, self.y_scale * np.sqrt(var)

    def predict_grad(self, P):
        """Gradients of mean and sd w.r.t. the full joint input.

        Returns ``(mu, sd, dmu, dsd, degenerate)``; where ``sd <= 1e-9`` the sd
        gradient is set to zero and ``degenerate`` is True.
        """
        P = np.atleast_2d(np.asarray(P, dtype=float))
        m, d = P.shape
        mu, sd = self.predict(P)
        degenerate = sd <= DEGENERATE_SD * self.y_scale
        if self.n == 0:
            return mu, sd, np.zeros((m, d)), np.zeros((m, d)), degenerate
        ls2 = self.hyper.lengthscales**2
        Ks = kernel_matrix(P, self.X, self.hyper)
        diff = P[:, None, :] - self.X[None, :, :]
        dK = -Ks[:, :, None] * diff / ls2
        dmu = np.einsum("mnd,n->md", dK, self.alpha)
        w = linalg.cho_solve((self.chol, True), Ks.T, check_finite=False)
        dvar = -2.0 * np.einsum("mnd,nm->md", dK, w)
        sd_n = sd / self.y_scale
        safe = np.where(degenerate, 1.0, sd_n)
        dsd = np.where(degenerate[:, None], 0.0, dvar / (2.0 * safe[:, None]))
        return mu, sd, self.y_scale * dmu, self.y_scale * dsd, degenerate

    def predict_grad_x(self, P):
        """``(dmu/dx, dsd/dx, degenerate)`` restricted to the first ``d_x`` coordinates."""
        _, _, dmu, dsd, deg = self.predict_grad(P)
        return dmu[:, : self.d_x], dsd[:, : self.d_x], deg

    def posterior_cov(self, P) -> np.ndarray:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        K = kernel_matrix(P, P, self.hyper)
        if self.n:
            v = linalg.solve_triangular(self.chol, kernel_matrix(self.X, P, self.hyper), lower=True)
            K = K - v.T @ v
        return self.y_scale**2 * K

    def condition_on(self, X_new, y_new) -> "GPPosterior":
        """New posterior with extra observations and the same hyperparameters/scaling."""
        X = np.vstack([self.X, np.atleast_2d(X_new)])
        y = np.concatenate([self.y, np.atleast_1d(y_new)])
        return GPPosterior(X, y, self.hyper, self.d_x, self.y_mean, self.y_scale)


def _standardisation(y, normalize_y):
    if not normalize_y or y.size == 0:
        return 0.0, 1.0
    scale = float(np.std(y))
    return float(np.mean(y)), scale if scale > 1e-12 else 1.0


def fit_posterior(X, y, hyper: GPHyper, d_x: int | None = None, normalize_y: bool = False) -> GPPosterior:
    """Condition the GP prior on ``(X, y)``; ``X`` may be empty."""
    X = np.asarray(X, dtype=float).reshape(-1, hyper.dim)
    y = np.asarray(y, dtype=float).ravel()
    y_mean, y_scale = _standardisation(y, normalize_y)
    return GPPosterior(X, y, hyper, hyper.dim if d_x is None else d_x, y_mean, y_scale)


def log_marginal_likelihood(X, y, hyper: GPHyper):
    """Log evidence and its gradient w.r.t. ``hyper.to_log()``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n = y.shape[0]
    if n == 0:
        raise ValueError("log marginal likelihood needs data")
    Kf = kernel_matrix(X, X, hyper)
    K = Kf + hyper.noise_var * np.eye(n)
    L = _cholesky(K)
    if L is None:
        raise CholeskyError(float(np.linalg.eigvalsh(K).min()))
    alpha = linalg.cho_solve((L, True), y, check_finite=False)
    value = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * np.log(2 * np.pi)
    W = np.outer(alpha, alpha) - linalg.cho_solve((L, True), np.eye(n), check_finite=False)
    grad = np.empty(hyper.dim + 2)
    for i, ell in enumerate(hyper.lengthscales):
        D = (X[:, i][:, None] - X[:, i][None, :]) ** 2 / ell**2
        grad[i] = 0.5 * np.sum(W * Kf * D)
    grad[-2] = 0.5 * np.sum(W * Kf)
    grad[-1] = 0.5 * hyper.noise_var * np.trace(W)
    return float(value), grad


def _log_bounds(dim, bounds):
    ls, sf, sn = bounds if bounds is not None else (LENGTHSCALE_BOUNDS, SIGNAL_BOUNDS, NOISE_BOUNDS)
    sn = (max(sn[0], NOISE_FLOOR), sn[1])
    return [tuple(np.log(ls))] * dim + [tuple(np.log(sf)), tuple(np.log(sn))]


def fit_hyperparams(X, y, n_restarts: int = 5, bounds=None, init: GPHyper | None = None, rng=None):
    """Maximum-likelihood hyperparameters by multi-start L-BFGS-B in log space.

    Returns ``(hyper, ok)``. The first start is ``init`` when given; the rest are
    random. If every start fails, ``init`` is returned with ``ok=False``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("cannot fit hyperparameters without data")
    rng = np.random.default_rng(rng)
    dim = X.shape[1]
    lb = _log_bounds(dim, bounds)
    lo, hi = np.array([b[0] for b in lb]), np.array([b[1] for b in lb])

    def objective(theta):
        try:
            v, g = log_marginal_likelihood(X, y, GPHyper.from_log(theta))
        except (CholeskyError, ValueError):
            return 1e25, np.zeros_like(theta)
        if not np.isfinite(v):
            return 1e25, np.zeros_like(theta)
        return -v, -g

    starts = []
    if init is not None:
        starts.append(np.clip(init.to_log(), lo, hi))
    while len(starts) < max(n_restarts, 1):
        starts.append(
            np.concatenate(
                [
                    rng.uniform(np.log(0.05), np.log(2.0), dim),
                    [rng.uniform(np.log(0.1), np.log(10.0)), rng.uniform(np.log(1e-4), np.log(0.1))],
                ]
            )
        )
    best, best_val = None, np.inf
    for theta0 in starts:
        res = optimize.minimize(objective, np.clip(theta0, lo, hi), jac=True, method="L-BFGS-B", bounds=lb)
        if np.isfinite(res.fun) and res.fun < best_val and res.fun < 1e24:
            best, best_val = res.x, res.fun
    if best is None:
        warnings.warn("all hyperparameter restarts failed; keeping previous values", RuntimeWarning)
        if init is None:
            init = GPHyper(np.ones(dim), 1.0, 0.01)
        return init, False
    return GPHyper.from_log(np.clip(best, lo, hi)), True


class GaussianProcess(BaseEstimator, RegressorMixin):
    """Scikit-learn style wrapper: ``fit`` optimises hyperparameters, ``predict`` returns
    the posterior mean (and optionally sd)."""

    def __init__(
        self,
        lengthscale=1.0,
        signal_var=1.0,
        noise_var=0.01,
        optimizer=True,
        n_restarts=5,
        normalize_y=False,
        d_x=None,
        random_state=None,
    ):
        self.lengthscale = lengthscale
        self.signal_var = signal_var
        self.noise_var = noise_var
        self.optimizer = optimizer
        self.n_restarts = n_restarts
        self.normalize_y = normalize_y
        self.d_x = d_x
        self.random_state = random_state

    def _initial_hyper(self, dim):
        ls = np.broadcast_to(np.asarray(self.lengthscale, dtype=float), (dim,))
        return GPHyper(ls, float(self.signal_var), max(float(self.noise_var), NOISE_FLOOR))

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        hyper = self._initial_hyper(X.shape[1])
        y_mean, y_scale = _standardisation(y, self.normalize_y)
        self.fit_ok_ = True
        if self.optimizer:
            hyper, self.fit_ok_ = fit_hyperparams(
                X, (y - y_mean) / y_scale, self.n_restarts, init=hyper, rng=self.random_state
            )
        self.hyper_ = hyper
        self.posterior_ = GPPosterior(X, y, hyper, self.d_x or X.shape[1], y_mean, y_scale)
        self.log_marginal_likelihood_value_ = log_marginal_likelihood(X, (y - y_mean) / y_scale, hyper)[0]
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "posterior_")
        X = check_array(X)
        mu, sd = self.posterior_.predict(X)
        return (mu, sd) if return_std else mu
