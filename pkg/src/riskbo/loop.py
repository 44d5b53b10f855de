"""The outer optimisation loop, recommendations, regret accounting and certificates."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from riskbo.acquire import AcquisitionProblem, random_select, select_x, stableopt_select
from riskbo.bench import Problem, oracle_best, true_var
from riskbo.bounds import BetaSchedule, ConfidenceField, joint_grid
from riskbo.gp import NOISE_FLOOR, GPHyper, GPPosterior, fit_hyperparams, fit_posterior, kernel_matrix
from riskbo.lacing import find_lv_continuous, lv_candidate_indices, lv_margins, select_lv
from riskbo.risk import PinballConfig, empirical_var, var_interval, var_rows
from riskbo.surrogate import LnsoConfig

ACQ_MODES = ("vucb", "stableopt", "random")
LV_MODES = ("max-mass", "uniform")
METRIC_FLOOR = 1e-12
# lengthscale, signal variance and noise variance ranges for inputs scaled to the unit box
UNIT_BOX_BOUNDS = ((0.05, 20.0), (1e-2, 1e2), (NOISE_FLOOR, 1.0))
CONTINUOUS_EPS = 0.01


class LoopError(RuntimeError):
    def __init__(self, t: int, cause: Exception):
        super().__init__(f"iteration {t}: {type(cause).__name__}: {cause}")
        self.t = t


def default_n_init(problem: Problem) -> int:
    return 10 if problem.name.startswith("hartmann") else 3


@dataclass(frozen=True)
class RunConfig:
    """One optimisation run.

    ``hyper`` seeds the kernel; with ``fit_hyper=False`` it stays fixed. ``z_select``
    is ``"lv"`` (lacing value) or ``"env"`` (draw ``z_t`` from the environment).
    """

    problem: Problem
    T: int = 60
    seed: int = 0
    n_init: int | None = None
    acq: str = "vucb"
    lv_mode: str = "max-mass"
    beta: BetaSchedule = dc_field(default_factory=BetaSchedule)
    refit_every: int = 3
    recommend: str = "mean-var"
    z_select: str = "lv"
    hyper: GPHyper | None = None
    fit_hyper: bool = True
    n_restarts: int = 3
    hyper_bounds: tuple = UNIT_BOX_BOUNDS
    normalize_y: bool = True
    n_starts: int = 10
    n_steps: int = 100
    n_sweep: int = 512
    pinball: PinballConfig = dc_field(default_factory=PinballConfig)
    lnso: LnsoConfig = dc_field(default_factory=LnsoConfig)
    n_quantile_samples: int = 256
    keep_fields: bool = False

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.n_init is not None and self.n_init < 1:
            raise ValueError("n_init must be >= 1")
        if self.acq not in ACQ_MODES:
            raise ValueError(f"acq must be one of {ACQ_MODES}")
        if self.lv_mode not in LV_MODES:
            raise ValueError(f"lv_mode must be one of {LV_MODES}")
        if self.recommend not in ("mean-var", "lcb-max"):
            raise ValueError("recommend must be 'mean-var' or 'lcb-max'")
        if self.z_select not in ("lv", "env"):
            raise ValueError("z_select must be 'lv' or 'env'")
        if self.refit_every < 1:
            raise ValueError("refit_every must be >= 1")
        if self.acq == "stableopt" and not self.problem.env.is_discrete:
            raise ValueError("stableopt needs a discrete environment")
        if not self.fit_hyper and self.hyper is None:
            raise ValueError("fixed hyperparameters must be given")

    @property
    def initial_size(self) -> int:
        return default_n_init(self.problem) if self.n_init is None else self.n_init

    @property
    def algorithm(self) -> str:
        if self.acq == "vucb":
            return "vucb-prob" if self.lv_mode == "max-mass" else "vucb-unif"
        return self.acq


@dataclass
class RunTrace:
    algorithm: str
    problem: str
    seed: int
    rows: list = dc_field(default_factory=list)
    X: np.ndarray | None = None
    y: np.ndarray | None = None
    n_init: int = 0
    posterior: GPPosterior | None = None
    fields: list = dc_field(default_factory=list)
    hit_rates: list = dc_field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, key) -> np.ndarray:
        return np.array([r[key] for r in self.rows], dtype=float)

    @property
    def queries(self) -> np.ndarray:
        return self.X[self.n_init:]

    def cumulative_regret(self) -> np.ndarray:
        return np.cumsum(self.column("regret"))

    def average_regret(self) -> np.ndarray:
        return self.cumulative_regret() / np.arange(1, len(self.rows) + 1)

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.rows:
                fh.write(json.dumps({"algorithm": self.algorithm, "problem": self.problem, "seed": self.seed, **r}) + "\n")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [float(a) for a in v.ravel()]
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def metric(problem: Problem, x, alpha=None) -> float:
    """Gap between the optimal VaR and the VaR at ``x``."""
    _, best = oracle_best(problem, alpha)
    return best - true_var(problem, x, alpha)


def log10_metric(problem: Problem, value: float) -> float:
    eps = 0.0 if problem.env.is_discrete else CONTINUOUS_EPS
    return math.log10(max(value + eps, METRIC_FLOOR))


def _mean_var_rows(post: GPPosterior, X, env, alpha, Zs):
    Z = env.atoms if env.is_discrete else Zs
    mu = post.predict(joint_grid(X, Z))[0].reshape(np.atleast_2d(X).shape[0], Z.shape[0])
    if env.is_discrete:
        return var_rows(mu, env.masses, alpha)[0]
    return np.array([empirical_var(r, alpha) for r in mu])


def recommend(trace: RunTrace, posterior: GPPosterior, problem: Problem, mode: str = "mean-var", Zs=None):
    """Recommended input after the iterations recorded in ``trace``.

    ``mean-var`` scans every queried input (initial design included) under the VaR
    of the posterior mean; ``lcb-max`` returns the query whose stored lower-bound
    VaR is largest.
    """
    if not trace.rows:
        raise ValueError("empty trace")
    if mode == "lcb-max":
        lo = trace.column("var_lo")
        return np.array(trace.rows[int(np.argmax(lo))]["x"])
    if mode != "mean-var":
        raise ValueError(f"unknown recommendation mode {mode!r}")
    d_x = problem.d_x
    X = np.unique(np.asarray(posterior.X[:, :d_x]), axis=0)
    if Zs is None and not problem.env.is_discrete:
        Zs = problem.env.sample(256, np.random.default_rng(0))
    v = _mean_var_rows(posterior, X, problem.env, problem.alpha, Zs)
    return X[int(np.argmax(v))].copy()


def _design(problem: Problem, n, rng):
    X = rng.uniform(problem.lower, problem.upper, size=(n, problem.d_x))
    if problem.x_candidates is not None:
        X = problem.x_candidates[rng.integers(problem.x_candidates.shape[0], size=n)]
    if problem.env.is_discrete:
        Z = problem.env.atoms[rng.integers(problem.env.n_atoms, size=n)]
    else:
        Z = problem.env.sample(n, rng)
    return np.hstack([X, Z])


def empirical_gain(X, hyper: GPHyper, noise_var: float | None = None) -> float:
    """``0.5 log det(I + K / noise)`` at the given inputs; a lower bound on the max gain."""
    X = np.atleast_2d(X)
    if X.shape[0] == 0:
        return 0.0
    noise = hyper.noise_var if noise_var is None else noise_var
    K = kernel_matrix(X, X, hyper)
    _, logdet = np.linalg.slogdet(np.eye(X.shape[0]) + K / noise)
    return 0.5 * float(logdet)


def _fit(cfg: RunConfig, X, y, hyper, rng):
    if cfg.normalize_y:
        m, s = float(np.mean(y)), float(np.std(y))
        s = s if s > 1e-12 else 1.0
        yt = (y - m) / s
    else:
        yt = y
    new, _ = fit_hyperparams(X, yt, n_restarts=cfg.n_restarts, bounds=cfg.hyper_bounds, init=hyper, rng=rng)
    return new


def run_vucb(cfg: RunConfig, rng=None, hit_rate_draws: int = 0) -> RunTrace:
    """Run ``cfg.T`` iterations; seeded entirely by ``cfg.seed`` unless ``rng`` is given.

    The initial design and the observation noise use their own streams so that
    algorithms compared under the same seed share both.
    """
    prob = cfg.problem
    env, d_x = prob.env, prob.d_x
    root = np.random.SeedSequence(cfg.seed) if rng is None else np.random.SeedSequence(int(
        np.random.default_rng(rng).integers(2**63)))
    design_rng, noise_rng, alg_rng, hyper_rng = (np.random.default_rng(s) for s in root.spawn(4))
    n0 = cfg.initial_size
    P0 = _design(prob, n0, design_rng)
    X = P0.copy()
    y = np.array([prob.observe(p[:d_x], p[d_x:], noise_rng) for p in P0])
    hyper = cfg.hyper or GPHyper(np.full(d_x + prob.d_z, 0.2), 1.0, 0.01)
    Zs = None if env.is_discrete else env.sample(cfg.n_quantile_samples, alg_rng)
    trace = RunTrace(cfg.algorithm, prob.name, cfg.seed, n_init=n0)
    for t in range(1, cfg.T + 1):
        try:
            refit = cfg.fit_hyper and (t - 1) % cfg.refit_every == 0
            if refit:
                hyper = _fit(cfg, X, y, hyper, hyper_rng)
            post = fit_posterior(X, y, hyper, d_x=d_x, normalize_y=cfg.normalize_y)
            if cfg.beta.kind == "theoretical":
                sched = replace(cfg.beta, gamma_fn=lambda k, Q=X[n0:], h=hyper: empirical_gain(Q[:k], h))
                beta_t = sched(t)
            else:
                beta_t = cfg.beta(t)
            field = ConfidenceField(post, beta_t)
            row = _step(cfg, field, t, alg_rng, Zs, trace, hit_rate_draws)
            x_t, z_t = row.pop("_x"), row.pop("_z")
            p = np.concatenate([x_t, z_t])
            row["sigma"] = float(post.predict(p[None, :])[1][0])
            row["y"] = prob.observe(x_t, z_t, noise_rng)
            X = np.vstack([X, p])
            y = np.append(y, row["y"])
            post_after = post.condition_on(p[None, :], [row["y"]])
            trace.rows.append(row)
            rec = recommend(trace, post_after, prob, cfg.recommend, Zs)
            m = metric(prob, rec)
            row.update(
                recommendation=rec,
                metric=m,
                log10_metric=log10_metric(prob, m),
                regret=metric(prob, x_t),
                hyper=hyper.as_dict() if refit else None,
            )
            trace.rows[-1] = {k: _jsonable(v) for k, v in row.items()}
            if cfg.keep_fields:
                trace.fields.append(field)
        except Exception as exc:  # noqa: BLE001 - re-raised with the iteration attached
            raise LoopError(t, exc) from exc
    trace.X, trace.y, trace.posterior = X, y, fit_posterior(X, y, hyper, d_x=d_x, normalize_y=cfg.normalize_y)
    return trace


def _step(cfg: RunConfig, field: ConfidenceField, t, rng, Zs, trace, hit_rate_draws):
    prob = cfg.problem
    env, alpha = prob.env, prob.alpha
    row = {"t": t, "beta": field.beta}
    n_cand = None
    if cfg.acq == "random":
        x_t, z_t = random_select(prob.lower, prob.upper, env, rng)
        if prob.x_candidates is not None:
            x_t = prob.x_candidates[int(rng.integers(prob.x_candidates.shape[0]))].copy()
    elif cfg.acq == "stableopt":
        x_t, z_t = stableopt_select(field, prob.lower, prob.upper, env.atoms, rng, prob.x_candidates,
                                    cfg.n_starts, cfg.n_steps, cfg.n_sweep)
    else:
        aprob = AcquisitionProblem(field, env, alpha, prob.lower, prob.upper, cfg.n_starts, cfg.n_steps,
                                   n_sweep=cfg.n_sweep, x_candidates=prob.x_candidates, lnso=cfg.lnso,
                                   pinball=cfg.pinball, n_quantile_samples=cfg.n_quantile_samples)
        x_t = select_x(aprob, rng)
        z_t = None
    interval = var_interval(field, x_t, env, alpha, cfg.pinball, rng)
    if env.is_discrete:
        idx = lv_candidate_indices(field, x_t, env, alpha, interval)
        n_cand = int(idx.size)
        if z_t is None and cfg.z_select == "lv":
            z_t = select_lv(env.atoms[idx], env, cfg.lv_mode, rng)
        if cfg.z_select == "env" or hit_rate_draws:
            if hit_rate_draws:
                draws = rng.choice(env.n_atoms, size=hit_rate_draws, p=env.masses)
                trace.hit_rates.append(float(np.isin(draws, idx).mean()))
            if z_t is None:
                z_t = env.sample(1, rng)[0]
        d_u, d_l = lv_margins(z_t[None, :], field, x_t, interval)
        certified = bool(d_u[0] >= 0 and d_l[0] >= 0)
    else:
        if z_t is None and cfg.z_select == "lv":
            res = find_lv_continuous(field, x_t, env, alpha, interval, pinball_cfg=cfg.pinball, mode=cfg.lv_mode,
                                     rng=rng)
            z_t, certified = res.z, res.certified
        else:
            if z_t is None:
                z_t = env.sample(1, rng)[0]
            d_u, d_l = lv_margins(z_t[None, :], field, x_t, interval)
            certified = bool(d_u[0] >= -1e-6 and d_l[0] >= -1e-6)
    row.update(x=np.asarray(x_t, dtype=float), z=np.asarray(z_t, dtype=float), var_lo=interval.lo,
               var_hi=interval.hi, lv_certified=certified, n_candidates=n_cand)
    row["_x"], row["_z"] = np.asarray(x_t, dtype=float), np.asarray(z_t, dtype=float)
    return row


def run_env_sampled(cfg: RunConfig, n_z_per_iter: int = 1000, rng=None):
    """Draw ``z_t`` from the environment and record how often draws are lacing values.

    Returns ``(trace, mean hit rate)``; per-iteration rates are in ``trace.hit_rates``.
    """
    if not cfg.problem.env.is_discrete:
        raise ValueError("the env-sampled mode needs a discrete environment")
    trace = run_vucb(replace(cfg, z_select="env"), rng, hit_rate_draws=n_z_per_iter)
    return trace, float(np.mean(trace.hit_rates))


def reference_grid(problem: Problem, n_per_axis: int | None = None) -> np.ndarray:
    if problem.x_candidates is not None:
        return problem.x_candidates
    n = n_per_axis or (101 if problem.d_x == 1 else 21)
    axes = np.meshgrid(*[np.linspace(0.0, 1.0, n)] * problem.d_x, indexing="ij")
    return np.stack([a.ravel() for a in axes], axis=1)


@dataclass
class RegretCertificate:
    statuses: list
    lhs: np.ndarray
    rhs: np.ndarray
    C1: float
    gamma_T: float
    R_T: float
    R_T_bound: float
    gamma_label: str = "empirical information gain of the queries (lower bound on the maximum gain)"

    @property
    def n_checked(self) -> int:
        return sum(s in ("pass", "bound-violated") for s in self.statuses)

    @property
    def n_pass(self) -> int:
        return self.statuses.count("pass")


def c1_constant(noise_var: float) -> float:
    return 8.0 / math.log(1.0 + 1.0 / noise_var)


def certify_regret(trace: RunTrace, problem: Problem, slack: float = 1e-6, x_grid=None,
                   gamma_T: float | None = None) -> RegretCertificate:
    """Check ``r(x_t) <= 2 sqrt(beta_t) sigma_{t-1}(x_t, z_t)`` at every iteration.

    Needs a discrete environment and a trace run with ``keep_fields=True``. An
    iteration whose band misses the truth somewhere on ``x_grid`` times the atoms
    is ``event-violated``; one whose ``z_t`` is not a lacing value is
    ``not-certified``. Neither counts towards the check.
    """
    if not problem.env.is_discrete:
        raise ValueError("certificates need a discrete environment")
    if len(trace.fields) != len(trace.rows):
        raise ValueError("run with keep_fields=True to certify")
    G = reference_grid(problem) if x_grid is None else np.atleast_2d(x_grid)
    truth = problem.values(G, problem.env.atoms).ravel()
    P = joint_grid(G, problem.env.atoms)
    statuses, lhs, rhs = [], [], []
    for row, field in zip(trace.rows, trace.fields):
        r = metric(problem, np.array(row["x"]))
        bound = 2.0 * math.sqrt(row["beta"]) * row["sigma"]
        lhs.append(r)
        rhs.append(bound)
        l, u = field.bounds(P)
        if not np.all((l <= truth) & (truth <= u)):
            statuses.append("event-violated")
        elif not row["lv_certified"]:
            statuses.append("not-certified")
        else:
            statuses.append("pass" if r <= bound + slack else "bound-violated")
    hyper = trace.posterior.hyper
    noise = hyper.noise_var
    g = empirical_gain(trace.queries, hyper) if gamma_T is None else float(gamma_T)
    C1 = c1_constant(noise)
    T = len(trace.rows)
    R_T = float(np.sum(trace.column("regret")))
    return RegretCertificate(statuses, np.array(lhs), np.array(rhs), C1, g, R_T,
                             math.sqrt(C1 * T * trace.rows[-1]["beta"] * g))


__all__ = [
    "LoopError",
    "RegretCertificate",
    "RunConfig",
    "RunTrace",
    "c1_constant",
    "certify_regret",
    "empirical_gain",
    "log10_metric",
    "metric",
    "recommend",
    "reference_grid",
    "run_env_sampled",
    "run_vucb",
]
