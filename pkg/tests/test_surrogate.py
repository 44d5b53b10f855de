import numpy as np
import pytest

from riskbo.env import EnvDistribution, make_truncated_gaussian
from riskbo.surrogate import (
    LnsoConfig,
    QuantileSurrogate,
    SurrogateNet,
    lnso_maximize,
    net_train_local,
    pinball_grad,
    sample_ball,
)


def test_zero_net_outputs_zero():
    net = SurrogateNet(2, rng=0)
    for p in net.params:
        p[...] = 0.0
    np.testing.assert_array_equal(net.forward(np.random.default_rng(0).uniform(size=(5, 2))), 0.0)


def test_constant_head():
    net = SurrogateNet(3, rng=1)
    net.params[-2][...] = 0.0
    net.params[-1][...] = 2.5
    np.testing.assert_allclose(net.forward(np.random.default_rng(1).normal(size=(7, 3))), 2.5)


def test_shapes():
    net = SurrogateNet(2, rng=0)
    assert [p.shape for p in net.params] == [(2, 30), (30,), (30, 30), (30,), (30, 1), (1,)]


@pytest.mark.parametrize("seed", range(5))
def test_parameter_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = SurrogateNet(2, rng=seed)
    X = rng.uniform(-1, 1, size=(6, 2))
    w = rng.normal(size=6)
    out, acts = net.forward(X, cache=True)
    grads, dX = net.backward(acts, w)
    h = 1e-6
    for p, g in zip(net.params, grads):
        for _ in range(4):
            idx = tuple(rng.integers(s) for s in p.shape)
            old = p[idx]
            p[idx] = old + h
            up = w @ net.forward(X)
            p[idx] = old - h
            dn = w @ net.forward(X)
            p[idx] = old
            assert abs((up - dn) / (2 * h) - g[idx]) <= 1e-4
    e = np.zeros(2)
    e[0] = h
    fd = (net.forward(X + e) - net.forward(X - e)) / (2 * h)
    np.testing.assert_allclose(net.grad_input(X)[:, 0], fd, atol=1e-4)


def test_pinball_grad_matches_finite_differences():
    rng = np.random.default_rng(3)
    H = rng.normal(size=(4, 9))
    g = rng.normal(size=4)
    loss, dg = pinball_grad(H, g, 0.3)
    for i in range(4):
        e = np.zeros(4)
        e[i] = 1e-7
        fd = (pinball_grad(H, g + e, 0.3)[0] - pinball_grad(H, g - e, 0.3)[0]) / 2e-7
        assert fd == pytest.approx(dg[i], abs=1e-6)


def test_surrogate_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    X = rng.uniform(size=(40, 1))
    Y = np.sin(6 * X) + 0.1 * rng.normal(size=(40, 5))
    m = QuantileSurrogate(alpha=0.2, n_iter=100, center=[0.5], radius=0.5, random_state=0).fit(X, Y)
    P = rng.uniform(size=(5, 1))
    fd = (m.predict(P + 1e-6) - m.predict(P - 1e-6)) / 2e-6
    np.testing.assert_allclose(m.grad_x(P)[:, 0], fd, atol=1e-4)


def test_ball_sampling_inside_ball_and_box():
    rng = np.random.default_rng(0)
    c = np.array([0.05, 0.5])
    X = sample_ball(c, 0.2, 2000, rng, np.zeros(2), np.ones(2))
    assert np.all(np.linalg.norm(X - c, axis=1) <= 0.2 + 1e-12)
    assert np.all((X >= 0) & (X <= 1))
    # uniform in the disc: radial cdf r^2
    R = np.linalg.norm(sample_ball(c, 1.0, 20_000, rng) - c, axis=1)
    assert abs(np.mean(R <= 0.5) - 0.25) < 0.02


def test_constant_target_fit():
    env = make_truncated_gaussian(1)
    cfg = LnsoConfig(t_g=300)
    m = QuantileSurrogate(alpha=0.1, radius=cfg.radius, random_state=0)
    net_train_local(m, [0.4], lambda P: np.full(len(P), 1.7), env, cfg, np.random.default_rng(0))
    X = sample_ball(np.array([0.4]), cfg.radius, 50, np.random.default_rng(1))
    assert np.max(np.abs(m.predict(X) - 1.7)) <= 0.05


def _two_point_fit(alpha):
    env = EnvDistribution.discrete([[0.0], [1.0]], [0.5, 0.5])
    cfg = LnsoConfig(t_g=300)
    m = QuantileSurrogate(alpha=alpha, radius=cfg.radius, random_state=1)
    net_train_local(m, [0.5], lambda P: P[:, 1], env, cfg, np.random.default_rng(2))
    return m.predict(sample_ball(np.array([0.5]), cfg.radius, 50, np.random.default_rng(3)))


def test_two_point_lower_quantile_is_lower_atom():
    assert np.max(np.abs(_two_point_fit(0.45))) <= 0.05


def test_two_point_median_inside_minimiser_set():
    # every value in [0, 1] minimises the loss at alpha = 0.5
    g = _two_point_fit(0.5)
    assert np.all((g >= -0.05) & (g <= 1.05))


def test_training_loss_decreases_on_average():
    env = make_truncated_gaussian(1)
    cfg = LnsoConfig(t_g=300)
    m = QuantileSurrogate(alpha=0.2, radius=cfg.radius, random_state=2)
    net_train_local(m, [0.5], lambda P: 3 * P[:, 0] + P[:, 1], env, cfg, np.random.default_rng(4))
    w = np.array(m.train_losses_).reshape(3, 100).mean(axis=1)
    assert np.all(np.diff(w) <= 1e-12)


def test_z_free_quadratics_reach_argmax():
    rng = np.random.default_rng(5)
    env = make_truncated_gaussian(1)
    hits = 0
    for s in range(20):
        c, a = rng.uniform(0.2, 0.8), rng.uniform(0.5, 3.0)
        x0 = np.clip(c + rng.choice([-1, 1]) * rng.uniform(0.1, 0.3), 0, 1)
        x = lnso_maximize(lambda P, c=c, a=a: -a * (P[:, 0] - c) ** 2, env, 0.1, [0.0], [1.0], [x0], rng=s)
        hits += abs(x[0] - c) <= 0.05
    assert hits >= 19


def test_noisy_quadratic_mostly_near_peak():
    env = make_truncated_gaussian(1)
    target = lambda P: -(P[:, 0] - 0.3) ** 2 + 0.1 * P[:, 1]
    xs = np.array([lnso_maximize(target, env, 0.1, [0.0], [1.0], [0.6], rng=s)[0] for s in range(10)])
    assert np.all((xs >= 0) & (xs <= 1))
    assert np.median(np.abs(xs - 0.3)) <= 0.05


def test_large_radius_single_retrain_and_box():
    env = make_truncated_gaussian(1)
    cfg = LnsoConfig(radius=5.0, t_v=60, t_g=100)
    x, m = lnso_maximize(lambda P: P[:, 0] * 2.0, env, 0.1, [0.0], [1.0], [0.2], cfg, rng=0, return_model=True)
    assert m.n_retrains_ == 1
    assert 0.0 <= x[0] <= 1.0
    assert x[0] >= 0.9


def test_config_validation():
    with pytest.raises(ValueError):
        LnsoConfig(radius=0.0)
    with pytest.raises(ValueError):
        LnsoConfig(t_g=0)
    assert LnsoConfig(radius=0.3).trigger == 0.3
    assert LnsoConfig(radius=0.3, delta_x=0.1).trigger == 0.1


def test_estimator_api():
    from sklearn.base import clone

    m = QuantileSurrogate(alpha=0.3, n_iter=5)
    assert clone(m).get_params()["alpha"] == 0.3
    X = np.random.default_rng(0).uniform(size=(10, 1))
    assert clone(m).fit(X, X).predict(X).shape == (10,)
