"""Local neural surrogate optimisation of ``VaR_alpha(h(x, Z))`` over ``x``.

A small sigmoid network ``g(x)`` is fitted with the pinball loss to samples
``h(x, z)`` drawn in a ball around a centre; ``x`` then climbs ``g`` and the ball
(and fit) move whenever ``x`` leaves it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from riskbo.bounds import joint_grid
from riskbo.env import EnvDistribution


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


class SurrogateNet:
    """Fully connected ``d -> 30 -> 30 -> 1`` net, sigmoid hidden units, linear output."""

    def __init__(self, d_in: int, hidden=(30, 30), rng=None):
        rng = np.random.default_rng(rng)
        sizes = [d_in, *hidden, 1]
        self.params = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            self.params.append(rng.normal(0.0, np.sqrt(2.0 / (a + b)), size=(a, b)))
            self.params.append(np.zeros(b))

    @property
    def d_in(self) -> int:
        return self.params[0].shape[0]

    def copy(self) -> "SurrogateNet":
        new = SurrogateNet.__new__(SurrogateNet)
        new.params = [p.copy() for p in self.params]
        return new

    def forward(self, X, cache=False):
        X = np.atleast_2d(X)
        acts = [X]
        h = X
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            a = h @ W + b
            h = a if i == n_layers - 1 else _sigmoid(a)
            acts.append(h)
        out = h[:, 0]
        return (out, acts) if cache else out

    def backward(self, acts, grad_out):
        """Parameter gradients given ``dL/d out`` per row; also returns ``dL/d input``."""
        n_layers = len(self.params) // 2
        delta = np.asarray(grad_out, dtype=float)[:, None]
        grads = [None] * len(self.params)
        for i in reversed(range(n_layers)):
            W = self.params[2 * i]
            grads[2 * i] = acts[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            delta = delta @ W.T
            if i > 0:
                s = acts[i]
                delta = delta * s * (1.0 - s)
        return grads, delta

    def grad_input(self, X):
        out, acts = self.forward(X, cache=True)
        _, dX = self.backward(acts, np.ones(out.shape[0]))
        return dX


class Adam:
    def __init__(self, shapes, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, grads, lr=None):
        self.t += 1
        lr = self.lr if lr is None else lr
        out = []
        for i, g in enumerate(grads):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / (1 - self.b1**self.t)
            vh = self.v[i] / (1 - self.b2**self.t)
            out.append(lr * mh / (np.sqrt(vh) + self.eps))
        return out


def pinball_grad(H, g, alpha):
    """Loss and ``dL/dg`` of ``mean rho_alpha(H - g[:, None])`` for ``H`` of shape ``(n_x, n_z)``."""
    W = H - g[:, None]
    loss = np.where(W >= 0, alpha * W, (alpha - 1.0) * W).mean()
    slope = np.where(W >= 0, alpha, alpha - 1.0)
    return float(loss), -slope.mean(axis=1) / H.shape[0]


class QuantileSurrogate(BaseEstimator, RegressorMixin):
    """Neural alpha-quantile regressor on a local ball.

    Inputs are mapped to ``(x - center) / radius`` and targets standardised before
    they reach the network, so one learning rate serves every scale. ``fit``
    trains on a fixed sample matrix ``Y`` of shape ``(n, k)`` (``k`` draws per
    input); ``partial_fit`` takes a single optimiser step.
    """

    def __init__(self, alpha=0.1, hidden=(30, 30), learning_rate=0.05, n_iter=200,
                 center=None, radius=1.0, random_state=None):
        self.alpha = alpha
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.n_iter = n_iter
        self.center = center
        self.radius = radius
        self.random_state = random_state

    def _init(self, d, Y=None):
        if not hasattr(self, "net_"):
            self.net_ = SurrogateNet(d, self.hidden, self.random_state)
            self.opt_ = Adam([p.shape for p in self.net_.params], self.learning_rate)
            self.n_steps_ = 0
        self.center_ = np.zeros(d) if self.center is None else np.asarray(self.center, dtype=float)
        if Y is not None:
            self.y_loc_ = float(np.median(Y))
            spread = float(np.std(Y))
            self.y_scale_ = spread if spread > 1e-12 else 1.0

    def recenter(self, center, Y_pilot):
        """Move the ball and refresh the output standardisation; weights are kept."""
        self.center = np.asarray(center, dtype=float)
        self._init(self.center.shape[0], Y_pilot)
        return self

    def _u(self, X):
        return (np.atleast_2d(X) - self.center_) / self.radius

    def partial_fit(self, X, Y, lr=None):
        X = check_array(X)
        Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
        if not hasattr(self, "net_") or not hasattr(self, "y_loc_"):
            self._init(X.shape[1], Y)
        out, acts = self.net_.forward(self._u(X), cache=True)
        loss, dg = pinball_grad((Y - self.y_loc_) / self.y_scale_, out, self.alpha)
        if not np.isfinite(loss):
            raise FloatingPointError(f"surrogate loss is not finite after {self.n_steps_} steps")
        grads, _ = self.net_.backward(acts, dg)
        for p, d in zip(self.net_.params, self.opt_.step(grads, lr)):
            p -= d
        self.n_steps_ += 1
        self.loss_ = loss * self.y_scale_
        return self

    def fit(self, X, Y):
        X = check_array(X)
        for k in ("net_", "opt_", "y_loc_"):
            self.__dict__.pop(k, None)
        self._init(X.shape[1], Y)
        self.loss_curve_ = []
        for _ in range(self.n_iter):
            self.partial_fit(X, Y)
            self.loss_curve_.append(self.loss_)
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        return self.y_loc_ + self.y_scale_ * self.net_.forward(self._u(check_array(X)))

    def grad_x(self, X):
        check_is_fitted(self, "net_")
        return self.net_.grad_input(self._u(check_array(X))) * self.y_scale_ / self.radius


@dataclass(frozen=True)
class LnsoConfig:
    radius: float = 0.1
    t_v: int = 100
    t_g: int = 300
    gamma_x: float = 0.02
    gamma_g: float = 0.02
    n_z: int = 10
    n_x: int = 50
    delta_x: float | None = None

    def __post_init__(self):
        if self.radius <= 0 or self.gamma_x <= 0 or self.gamma_g <= 0:
            raise ValueError("radius and step sizes must be positive")
        if min(self.t_v, self.t_g, self.n_z, self.n_x) < 1:
            raise ValueError("iteration and sample counts must be >= 1")

    @property
    def trigger(self) -> float:
        return self.radius if self.delta_x is None else self.delta_x


def sample_ball(center, radius, n, rng, lower=None, upper=None):
    """Uniform draws in the Euclidean ball, clipped to the box when given."""
    center = np.asarray(center, dtype=float)
    d = center.shape[0]
    g = rng.normal(size=(n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    X = center + g * (radius * rng.uniform(size=(n, 1)) ** (1.0 / d))
    if lower is not None:
        X = np.clip(X, lower, upper)
    return X


def _target_matrix(target, X, Z):
    return np.asarray(target(joint_grid(X, Z)), dtype=float).reshape(X.shape[0], Z.shape[0])


def net_train_local(model: QuantileSurrogate, center, target, env: EnvDistribution, cfg: LnsoConfig,
                    rng, lower=None, upper=None) -> QuantileSurrogate:
    """Recentre ``model`` at ``center`` and run ``cfg.t_g`` stochastic pinball steps.

    Each step draws ``n_z`` environment samples and ``n_x`` ball samples.
    ``target`` maps joint points ``(x, z)`` to values. The step size follows a
    cosine from ``gamma_g`` down to ``gamma_g / 20``.
    """
    center = np.asarray(center, dtype=float)
    losses = []
    for j in range(1, cfg.t_g + 1):
        Z = env.sample(cfg.n_z, rng)
        X = sample_ball(center, cfg.radius, cfg.n_x, rng, lower, upper)
        H = _target_matrix(target, X, Z)
        if j == 1:
            model.recenter(center, H)
        lr = cfg.gamma_g * (0.05 + 0.475 * (1.0 + np.cos(np.pi * (j - 1) / cfg.t_g)))
        model.partial_fit(X, H, lr=lr)
        losses.append(model.loss_)
    model.train_losses_ = losses
    return model


def lnso_maximize(target, env: EnvDistribution, alpha, lower, upper, x0, cfg: LnsoConfig | None = None,
                  rng=None, return_model=False):
    """Maximise ``VaR_alpha(target(x, Z))`` over the box ``[lower, upper]`` from ``x0``.

    The surrogate is retrained at iteration 1 and whenever the iterate is at
    least ``cfg.trigger`` from the current centre. ``x`` moves by Adam-scaled steps
    of size ``gamma_x`` along the surrogate gradient, projected to the box.
    """
    cfg = cfg or LnsoConfig()
    rng = np.random.default_rng(rng)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    model = QuantileSurrogate(alpha=alpha, learning_rate=cfg.gamma_g, radius=cfg.radius,
                              random_state=int(rng.integers(2**31)))
    x_opt = Adam([x.shape], cfg.gamma_x)
    center = None
    model.n_retrains_ = 0
    for i in range(1, cfg.t_v + 1):
        if i == 1 or np.linalg.norm(x - center) >= cfg.trigger:
            center = x.copy()
            net_train_local(model, center, target, env, cfg, rng, lower, upper)
            model.n_retrains_ += 1
        g = model.grad_x(x[None, :])[0]
        x = np.clip(x + x_opt.step([g])[0], lower, upper)
    return (x, model) if return_model else x
