import math

import numpy as np
import pytest

from riskbo.bounds import BetaSchedule, ConfidenceField, beta_practical, beta_theoretical, bounds_at, joint, joint_grid
from riskbo.gp import GPHyper, fit_posterior, kernel_matrix


def test_beta_practical_values():
    assert beta_practical(1) == pytest.approx(2 * math.log(math.pi**2 / 0.6))
    assert beta_practical(1) == pytest.approx(5.6009, abs=1e-3)
    assert beta_practical(2) - beta_practical(1) == pytest.approx(2 * math.log(4))
    assert beta_practical(10) > beta_practical(1)
    with pytest.raises(ValueError):
        beta_practical(0)


def test_beta_theoretical_values():
    assert beta_theoretical(5, 1.0, 0.0, 0.3, lambda t: 7.0) == 1.0
    assert beta_theoretical(1, 1.0, 0.1, math.exp(-1), lambda t: 0.0) == pytest.approx(1.44)
    loose = beta_theoretical(3, 1.0, 0.1, 0.1, lambda t: 1.0)
    tight = beta_theoretical(3, 1.0, 0.1, 0.01, lambda t: 1.0)
    assert tight > loose
    with pytest.raises(ValueError):
        beta_theoretical(3, 1.0, 0.1, 0.1, lambda t: -1.0)
    with pytest.raises(ValueError):
        beta_theoretical(3, 1.0, 0.1, 1.5, lambda t: 1.0)


def test_schedules_non_decreasing():
    prac = BetaSchedule()
    theo = BetaSchedule("theoretical", B=2.0, noise_sd=0.1, delta=0.1, gamma_fn=lambda t: math.log1p(t))
    for sched in (prac, theo):
        vals = [sched(t) for t in range(1, 60)]
        assert all(b > 0 for b in vals)
        assert np.all(np.diff(vals) >= 0)
    with pytest.raises(ValueError):
        BetaSchedule("theoretical")
    with pytest.raises(ValueError):
        BetaSchedule("optimistic")


def _prior_field(beta, sf2=1.0):
    h = GPHyper(np.full(2, 0.3), sf2, 0.01)
    return ConfidenceField(fit_posterior(np.zeros((0, 2)), [], h, d_x=1), beta)


def test_zero_beta_collapses_band():
    rng = np.random.default_rng(0)
    h = GPHyper(np.full(2, 0.3), 1.0, 0.01)
    post = fit_posterior(rng.uniform(size=(5, 2)), rng.normal(size=5), h, d_x=1)
    l, u = ConfidenceField(post, 0.0).bounds(rng.uniform(size=(6, 2)))
    np.testing.assert_array_equal(l, u)


def test_prior_band():
    l, u = bounds_at(_prior_field(4.0), [0.3, 0.7])
    assert (l, u) == pytest.approx((-2.0, 2.0))


def test_band_tight_at_near_interpolated_point():
    h = GPHyper(np.full(2, 0.3), 1.0, 1e-4)
    p = np.array([[0.4, 0.6]])
    post = fit_posterior(np.repeat(p, 3, axis=0), [1.0, 1.0, 1.0], h, d_x=1)
    f = ConfidenceField(post, 4.0)
    l, u = f.bounds(p)
    assert u[0] - l[0] <= 2 * 2.0 * (0.01 + 1e-3)


def test_negative_beta_rejected():
    with pytest.raises(ValueError):
        _prior_field(-1.0)


def test_bounds_grad_consistent():
    rng = np.random.default_rng(1)
    h = GPHyper(np.full(2, 0.3), 1.0, 0.01)
    f = ConfidenceField(fit_posterior(rng.uniform(size=(8, 2)), rng.normal(size=8), h, d_x=1), 3.0)
    P = rng.uniform(size=(4, 2))
    l, u, dl, du = f.bounds_grad(P)
    e = np.array([1e-6, 0.0])
    fd = (f.bounds(P + e)[1] - f.bounds(P - e)[1]) / 2e-6
    np.testing.assert_allclose(du[:, 0], fd, atol=1e-5)
    np.testing.assert_allclose(f.bounds(P)[0], l)


def test_joint_helpers():
    Z = np.array([[0.1], [0.2], [0.3]])
    np.testing.assert_array_equal(joint([0.5], Z)[:, 0], 0.5)
    G = joint_grid(np.array([[0.0], [1.0]]), Z)
    assert G.shape == (6, 2)
    np.testing.assert_array_equal(G[4], [1.0, 0.2])


def test_band_pointwise_calibration():
    rng = np.random.default_rng(3)
    h = GPHyper(np.full(2, 1.0), 1.0, 0.01)
    xs, zs = np.linspace(0, 1, 10), np.linspace(0, 1, 5)
    P = np.stack(np.meshgrid(xs, zs, indexing="ij"), axis=-1).reshape(-1, 2)
    L = np.linalg.cholesky(kernel_matrix(P, P, h) + 1e-10 * np.eye(len(P)))
    res = []
    for _ in range(1000):
        f = L @ rng.normal(size=len(P))
        i = rng.integers(len(P), size=3)
        mu, sd = fit_posterior(P[i], f[i] + 0.1 * rng.normal(size=3), h, d_x=1).predict(P)
        res.append((f - mu) / sd)
    res = np.array(res)
    np.testing.assert_allclose(res.std(axis=0), 1.0, atol=0.1)
    miss = np.mean(np.abs(res) > np.sqrt(beta_practical(1)))
    assert abs(miss - 0.0177) < 0.004


@pytest.mark.xfail(strict=True, reason="the practical schedule under-covers the joint event on a 150-point grid")
def test_band_coverage_rate_under_prior():
    rng = np.random.default_rng(2)
    h = GPHyper(np.full(2, 0.3), 1.0, 0.01)
    xs, zs = np.linspace(0, 1, 15), np.linspace(0, 1, 10)
    P = np.stack(np.meshgrid(xs, zs, indexing="ij"), axis=-1).reshape(-1, 2)
    L = np.linalg.cholesky(kernel_matrix(P, P, h) + 1e-10 * np.eye(len(P)))
    held = 0
    for _ in range(200):
        f = L @ rng.normal(size=len(P))
        idx = rng.integers(len(P), size=20)
        ok = True
        for t in range(1, 21):
            post = fit_posterior(P[idx[:t]], f[idx[:t]] + 0.1 * rng.normal(size=t), h, d_x=1)
            l, u = ConfidenceField(post, beta_practical(t)).bounds(P)
            if not np.all((l <= f) & (f <= u)):
                ok = False
                break
        held += ok
    assert held >= 180
