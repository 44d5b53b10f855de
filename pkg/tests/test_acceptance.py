"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import time

import numpy as np
import pytest
from scipy.stats import norm

from conftest import ACCEPTANCE_LINES
from riskbo.acquire import AcquisitionProblem, acq_value, maxmin_value, select_x, stableopt_select
from riskbo.bench import make_gp_sample_problem, make_problem
from riskbo.bounds import ConfidenceField, beta_practical
from riskbo.env import EnvDistribution, make_truncated_gaussian
from riskbo.gp import GPHyper, fit_posterior, kernel_matrix
from riskbo.lacing import lv_candidates_discrete
from riskbo.loop import RunConfig, certify_regret, run_env_sampled, run_vucb
from riskbo.risk import PinballConfig, estimate_var_pinball, var_discrete, var_interval
from riskbo.surrogate import SurrogateNet, lnso_maximize


def report(n, name, ok, detail, seconds, limit):
    ok = ok and seconds < limit
    line = f"criterion {n} {name}: {'PASS' if ok else 'FAIL'} ({detail}; {seconds:.1f}s, limit {limit:.0f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def _random_posterior(rng, d=2, n_max=12):
    h = GPHyper(rng.uniform(0.05, 1.0, d), float(rng.uniform(0.2, 3.0)), 0.01)
    n = int(rng.integers(0, n_max))
    return fit_posterior(rng.uniform(size=(n, d)), rng.normal(size=n), h, d_x=1)


def test_criterion_1_lv_existence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    nonempty = 0
    for case in range(500):
        n_atoms = int(rng.choice([2, 5, 20, 100, 300]))
        atoms = np.sort(rng.permutation(10_000)[:n_atoms] / 9999)[:, None]
        env = EnvDistribution.discrete(atoms, rng.dirichlet(np.full(n_atoms, rng.uniform(0.2, 5))))
        field = ConfidenceField(_random_posterior(rng), float(rng.uniform(0.0, 16.0)))
        alpha = float(rng.uniform(1e-4, 1 - 1e-4))
        nonempty += lv_candidates_discrete(field, rng.uniform(size=1), env, alpha).shape[0] > 0
    ok = report(1, "LV existence", nonempty == 500, f"{nonempty}/500 nonempty", time.perf_counter() - t0, 30)
    assert ok


def test_criterion_2_var_sandwich():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    h = GPHyper(np.array([0.3, 0.3]), 1.0, 0.01)
    zs = np.linspace(0, 1, 30)
    env = EnvDistribution.discrete(zs[:, None], rng.dirichlet(np.ones(30)))
    xs = np.linspace(0, 1, 5)
    P = np.stack(np.meshgrid(xs, zs, indexing="ij"), axis=-1).reshape(-1, 2)
    L = np.linalg.cholesky(kernel_matrix(P, P, h) + 1e-10 * np.eye(len(P)))
    checked = violations = 0
    for k in range(200):
        f = L @ rng.standard_normal(len(P))
        idx = rng.integers(len(P), size=int(rng.integers(1, 15)))
        post = fit_posterior(P[idx], f[idx] + 0.1 * rng.standard_normal(idx.size), h, d_x=1)
        field = ConfidenceField(post, beta_practical(idx.size))
        F = f.reshape(len(xs), len(zs))
        for i, x in enumerate(xs):
            l, u = field.at_x([x], env.atoms)
            if not np.all((l <= F[i]) & (F[i] <= u)):
                continue
            for alpha in (0.1, 0.5, 0.9):
                iv = var_interval(field, [x], env, alpha)
                v = var_discrete(F[i], env.masses, alpha)
                checked += 1
                violations += not (iv.lo <= v <= iv.hi)
    ok = report(2, "VaR sandwich", violations == 0 and checked > 0,
                f"{violations} violations in {checked} checks", time.perf_counter() - t0, 60)
    assert ok


def test_criterion_3_regret_certificate():
    t0 = time.perf_counter()
    h = GPHyper(np.array([0.25, 0.25]), 1.0, 0.01)
    n_checked = n_pass = 0
    for seed in range(20):
        prob = make_gp_sample_problem(seed)
        cfg = RunConfig(prob, T=30, seed=seed, hyper=h, fit_hyper=False, normalize_y=False, keep_fields=True)
        cert = certify_regret(run_vucb(cfg), prob, slack=1e-6)
        n_checked += cert.n_checked
        n_pass += cert.n_pass
    ok = report(3, "regret certificate", n_checked > 0 and n_pass == n_checked,
                f"{n_pass}/{n_checked} certified iterations within the bound", time.perf_counter() - t0, 300)
    assert ok


def test_criterion_4_stableopt_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    env = EnvDistribution.discrete(np.sort(rng.uniform(size=20))[:, None], np.full(20, 0.05))
    worst_gap = worst_lv = 0.0
    for k in range(50):
        field = ConfidenceField(_random_posterior(rng), float(rng.uniform(0.1, 9.0)))
        prob = AcquisitionProblem(field, env, 1e-6, [0.0], [1.0])
        x_v = select_x(prob, rng=k)
        x_s, _ = stableopt_select(field, [0.0], [1.0], env.atoms, rng=k)
        worst_gap = max(worst_gap, abs(acq_value(prob, x_v) - maxmin_value(field, x_s[None, :], env.atoms)[0]))
        l = field.at_x(x_v, env.atoms)[0]
        cands = lv_candidates_discrete(field, x_v, env, 1e-6)
        lc = field.at_x(x_v, cands)[0]
        worst_lv = max(worst_lv, float(np.max(lc - l.min())))
    ok = report(4, "max-min equivalence", worst_gap <= 1e-9 and worst_lv <= 1e-9,
                f"optimum gap {worst_gap:.2e}, LV excess over min l {worst_lv:.2e}", time.perf_counter() - t0, 60)
    assert ok


def test_criterion_5_pinball_quantile():
    t0 = time.perf_counter()
    cfg = PinballConfig(batch=50, iters=1995, pilot=256)  # 10^5 draws in total
    nu = estimate_var_pinball(lambda z: z[:, 0], lambda n, r: r.standard_normal((n, 1)), 0.1, cfg, rng=5)
    normal_err = abs(nu - norm.ppf(0.1))
    rng = np.random.default_rng(505)
    worst, done = 0.0, 0
    while done < 50:
        n = int(rng.integers(2, 50))
        masses = rng.dirichlet(np.ones(n))
        vals = rng.normal(size=n) * rng.uniform(0.1, 100)
        alpha = float(rng.uniform(0.05, 0.95))
        if np.min(np.abs(np.cumsum(masses[np.argsort(vals)]) - alpha)) < 0.01:
            continue  # alpha on a mass breakpoint: the quantile is not identifiable from samples
        draw = lambda m, r, n=n, p=masses: r.choice(n, size=m, p=p)[:, None]
        est = estimate_var_pinball(lambda Z, v=vals: v[Z[:, 0].astype(int)], draw, alpha, rng=done)
        worst = max(worst, abs(est - var_discrete(vals, masses, alpha)) / np.ptp(vals))
        done += 1
    ok = report(5, "pinball quantile", normal_err <= 0.02 and worst <= 0.01,
                f"normal error {normal_err:.4f}, worst discrete error {worst:.4f} x range",
                time.perf_counter() - t0, 60)
    assert ok


def test_criterion_6_lnso_and_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(606)
    env = make_truncated_gaussian(1)
    hits = 0
    for s in range(20):
        c, a = rng.uniform(0.15, 0.85), rng.uniform(0.5, 5.0)
        x0 = [float(rng.uniform(0, 1))]
        x = lnso_maximize(lambda P, c=c, a=a: -a * (P[:, 0] - c) ** 2, env, 0.1, [0.0], [1.0], x0, rng=s)
        hits += abs(x[0] - c) <= 0.05
    net_err = 0.0
    for s in range(5):
        net = SurrogateNet(2, rng=s)
        X = rng.uniform(-1, 1, size=(8, 2))
        w = rng.normal(size=8)
        grads, _ = net.backward(net.forward(X, cache=True)[1], w)
        for p, g in zip(net.params, grads):
            for _ in range(5):
                i = tuple(rng.integers(d) for d in p.shape)
                old = p[i]
                p[i] = old + 1e-6
                up = w @ net.forward(X)
                p[i] = old - 1e-6
                dn = w @ net.forward(X)
                p[i] = old
                net_err = max(net_err, abs((up - dn) / 2e-6 - g[i]))
    gp_err = 0.0
    for s in range(20):
        post = _random_posterior(rng)
        P = rng.uniform(size=(4, 2))
        mu, sd, dmu, dsd, _ = post.predict_grad(P)
        for j in range(2):
            e = np.zeros(2)
            e[j] = 1e-6
            (mp, sp), (mm, sm) = post.predict(P + e), post.predict(P - e)
            gp_err = max(gp_err, np.max(np.abs((mp - mm) / 2e-6 - dmu[:, j])),
                         np.max(np.abs((sp - sm) / 2e-6 - dsd[:, j])))
    ok = report(6, "LNSO and gradients", hits >= 19 and net_err <= 1e-4 and gp_err <= 1e-4,
                f"{hits}/20 quadratics within 0.05, net grad err {net_err:.1e}, GP grad err {gp_err:.1e}",
                time.perf_counter() - t0, 120)
    assert ok


@pytest.fixture(scope="module")
def branin_runs():
    t0 = time.perf_counter()
    prob = make_problem("branin", "discrete", alpha=0.1)
    runs = {}
    for alg, kw in (("vucb-prob", {}), ("vucb-unif", {"lv_mode": "uniform"}), ("random", {"acq": "random"})):
        runs[alg] = [run_vucb(RunConfig(prob, T=60, seed=s, **kw)) for s in range(10)]
    return runs, time.perf_counter() - t0


def test_criterion_7_branin_trend(branin_runs):
    runs, seconds = branin_runs
    final = {a: float(np.median([tr.column("log10_metric")[-1] for tr in trs])) for a, trs in runs.items()}
    first = float(np.median([tr.column("log10_metric")[0] for tr in runs["vucb-prob"]]))
    c_random = final["vucb-prob"] <= final["random"]
    c_drop = final["vucb-prob"] <= first - 1.0
    c_unif = final["vucb-prob"] <= final["vucb-unif"] + 0.1
    ok = report(7, "Branin trend", c_random and c_drop and c_unif,
                f"median log10 metric t=1 {first:.2f}, t=60 prob {final['vucb-prob']:.2f} "
                f"unif {final['vucb-unif']:.2f} random {final['random']:.2f}", seconds, 900)
    assert ok


def test_criterion_8_sublinear_regret(branin_runs):
    t0 = time.perf_counter()
    runs, _ = branin_runs
    ratios = [tr.average_regret()[59] / tr.average_regret()[9] for tr in runs["vucb-prob"]]
    n_ok = sum(r <= 0.5 for r in ratios)
    ok = report(8, "average regret decay", n_ok >= 7,
                f"{n_ok}/10 seeds with R_60/60 <= 0.5 R_10/10 (ratios {', '.join(f'{r:.2f}' for r in ratios)})",
                time.perf_counter() - t0, 60)
    assert ok


def test_criterion_9_lv_hit_rate():
    t0 = time.perf_counter()
    prob = make_problem("branin", "discrete", alpha=0.05)
    rates = []
    for s in range(5):
        trace, _ = run_env_sampled(RunConfig(prob, T=10, seed=s), n_z_per_iter=1000)
        rates.extend(trace.hit_rates)
    mean = float(np.mean(rates))
    ok = report(9, "LV hit rate", len(rates) == 50 and mean <= 0.10,
                f"mean hit rate {mean:.3f} over {len(rates)} posteriors", time.perf_counter() - t0, 120)
    assert ok
