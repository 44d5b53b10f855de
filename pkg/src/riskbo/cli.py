"""Command line experiment runner: ``riskbo run | summarize | plotdata``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from riskbo import __version__
from riskbo.bench import PROBLEMS, make_problem
from riskbo.bounds import BetaSchedule, log_gamma_gain
from riskbo.loop import RunConfig, run_env_sampled, run_vucb
from riskbo.risk import PinballConfig
from riskbo.surrogate import LnsoConfig

log = logging.getLogger("riskbo")

ALGORITHMS = ("vucb-prob", "vucb-unif", "stableopt", "random", "env-sampled")
SUMMARY_COLUMNS = ["iteration", "algorithm", "median_log10_metric", "p15", "p85"]

_NESTED = {
    "beta": {"kind": str, "B": float, "delta": float},
    "pinball": {"iters": int, "batch": int, "step": float},
    "lnso": {"radius": float, "t_v": int, "t_g": int, "gamma_x": float, "gamma_g": float, "n_z": int,
             "n_x": int, "delta_x": float},
    "acquire": {"n_starts": int, "n_steps": int, "n_sweep": int},
}
_TOP = {
    "problem": str, "z_mode": str, "alpha": float, "T": int, "repeats": int, "seeds": list,
    "master_seed": int, "algorithms": list, "out": str, "n_init": int, "recommend": str,
    "refit_every": int, "workers": int, "hit_rate_draws": int,
}


class SpecError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    problem: str
    z_mode: str = "discrete"
    alpha: float = 0.1
    T: int = 60
    repeats: int = 10
    seeds: list | None = None
    master_seed: int = 0
    algorithms: list = field(default_factory=lambda: ["vucb-prob", "vucb-unif", "random"])
    out: str | None = None
    n_init: int | None = None
    recommend: str = "mean-var"
    refit_every: int = 3
    workers: int = 1
    hit_rate_draws: int = 1000
    beta: dict = field(default_factory=dict)
    pinball: dict = field(default_factory=dict)
    lnso: dict = field(default_factory=dict)
    acquire: dict = field(default_factory=dict)

    def validate(self) -> "ExperimentSpec":
        if self.problem not in PROBLEMS:
            raise SpecError(f"problem: unknown {self.problem!r}; valid: {', '.join(sorted(PROBLEMS))}")
        if self.z_mode not in ("discrete", "continuous"):
            raise SpecError("z_mode: must be 'discrete' or 'continuous'")
        if not 0.0 < self.alpha < 1.0:
            raise SpecError("alpha: must lie in (0, 1)")
        if self.T < 1:
            raise SpecError("T: must be >= 1")
        if self.repeats < 1:
            raise SpecError("repeats: must be >= 1")
        if not self.algorithms:
            raise SpecError("algorithms: list is empty")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad:
            raise SpecError(f"algorithms: unknown {bad}; valid: {', '.join(ALGORITHMS)}")
        if self.seeds is not None and len(self.seeds) != self.repeats:
            raise SpecError(f"seeds: {len(self.seeds)} given for {self.repeats} repeats")
        if self.workers < 1:
            raise SpecError("workers: must be >= 1")
        if self.beta.get("kind", "practical") not in ("practical", "theoretical"):
            raise SpecError("beta.kind: must be 'practical' or 'theoretical'")
        return self

    def run_seeds(self) -> list:
        if self.seeds is not None:
            return [int(s) for s in self.seeds]
        # one stream per repeat index, independent of the algorithm list
        return [int(np.random.SeedSequence([self.master_seed, r]).generate_state(1)[0]) for r in range(self.repeats)]

    def canonical(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def _check_keys(raw: dict) -> None:
    for k, v in raw.items():
        if k in _NESTED:
            if not isinstance(v, dict):
                raise SpecError(f"{k}: expected a mapping")
            for sub in v:
                if sub not in _NESTED[k]:
                    raise SpecError(f"{k}.{sub}: unknown key; valid: {', '.join(_NESTED[k])}")
        elif k not in _TOP:
            raise SpecError(f"{k}: unknown key")


def _coerce(raw: dict) -> dict:
    out = {}
    for k, v in raw.items():
        if k in _NESTED:
            out[k] = {s: (None if x is None else _NESTED[k][s](x)) for s, x in v.items()}
        elif v is None or _TOP[k] is list:
            out[k] = v
        else:
            try:
                out[k] = _TOP[k](v)
            except (TypeError, ValueError) as exc:
                raise SpecError(f"{k}: cannot read {v!r} as {_TOP[k].__name__}") from exc
    return out


def load_spec_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise SpecError(f"spec file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise SpecError(f"{p}: {exc}") from exc
    if not isinstance(raw, dict):
        raise SpecError(f"{p}: top level must be a mapping")
    return raw


def parse_spec(path=None, overrides: dict | None = None) -> ExperimentSpec:
    """Resolve a spec file plus flag overrides (flags win) into a validated spec."""
    raw = load_spec_file(path) if path is not None else {}
    _check_keys(raw)
    raw = _coerce(raw)
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if "." in k:
            top, sub = k.split(".", 1)
            raw.setdefault(top, {})[sub] = v
        else:
            raw[k] = v
    _check_keys(raw)
    if "problem" not in raw:
        raise SpecError("problem: required")
    return ExperimentSpec(**raw).validate()


def _run_config(spec: ExperimentSpec, algorithm: str, seed: int) -> RunConfig:
    problem = make_problem(spec.problem, spec.z_mode, spec.alpha)
    b = spec.beta
    kind = b.get("kind", "practical")
    # for the theoretical schedule the loop swaps in the empirical gain of its queries
    beta = BetaSchedule(kind, B=b.get("B", 1.0), delta=b.get("delta", 0.1), noise_sd=float(np.sqrt(problem.noise_var)),
                        gamma_fn=log_gamma_gain if kind == "theoretical" else None)
    pin = spec.pinball
    pinball = PinballConfig(batch=pin.get("batch", 50), iters=pin.get("iters", 2000), step=pin.get("step", 1.0))
    lnso = LnsoConfig(**spec.lnso)
    acq, lv = {"vucb-prob": ("vucb", "max-mass"), "vucb-unif": ("vucb", "uniform"), "stableopt": ("stableopt", "max-mass"),
               "random": ("random", "max-mass"), "env-sampled": ("vucb", "max-mass")}[algorithm]
    return RunConfig(problem, T=spec.T, seed=seed, n_init=spec.n_init, acq=acq, lv_mode=lv, beta=beta,
                     refit_every=spec.refit_every, recommend=spec.recommend, pinball=pinball, lnso=lnso,
                     **spec.acquire)


def _one_run(args):
    spec, algorithm, seed, out = args
    path = Path(out) / f"trace_{algorithm}_{seed}.jsonl"
    try:
        cfg = _run_config(spec, algorithm, seed)
        if algorithm == "env-sampled":
            trace, rate = run_env_sampled(cfg, spec.hit_rate_draws)
            extra = {"lv_hit_rate": rate}
        else:
            trace, extra = run_vucb(cfg), {}
        trace.to_jsonl(path)
        return {"algorithm": algorithm, "seed": seed, "status": "ok", "file": path.name, **extra}
    except Exception as exc:  # noqa: BLE001 - recorded per run, exit code reflects it
        return {"algorithm": algorithm, "seed": seed, "status": "error", "error": f"{type(exc).__name__}: {exc}"}


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def fixture_hashes() -> dict:
    data = resources.files("riskbo.data")
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(data.iterdir(), key=lambda q: q.name)
            if p.name.endswith(".tsv")}


def default_out(spec: ExperimentSpec) -> Path:
    root = Path(os.environ.get("RISKBO_OUT", "riskbo_runs"))
    return root / f"{spec.problem}_{spec.z_mode}_{spec.digest()[:10]}"


def run_experiment(spec: ExperimentSpec) -> tuple[Path, list]:
    """Run every (algorithm, seed) pair, then write the summary and the manifest."""
    out = Path(spec.out) if spec.out else default_out(spec)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(spec, a, s, str(out)) for a in spec.algorithms for s in spec.run_seeds()]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            runs = list(pool.map(_one_run, jobs))
    else:
        runs = [_one_run(j) for j in jobs]
    for r in runs:
        if r["status"] != "ok":
            log.error("run %s seed %s failed: %s", r["algorithm"], r["seed"], r["error"])
    if any(r["status"] == "ok" for r in runs):
        write_summary(out)
    write_manifest(out, spec, runs)
    return out, runs


def read_traces(directory) -> dict:
    """``{algorithm: {seed: [rows]}}`` from every trace file in ``directory``."""
    out: dict = {}
    for p in sorted(Path(directory).glob("trace_*.jsonl")):
        rows = [json.loads(line) for line in p.read_text().splitlines() if line.strip()]
        if not rows:
            continue
        out.setdefault(rows[0]["algorithm"], {})[rows[0]["seed"]] = rows
    return out


def summarize(directory) -> list:
    """Per-iteration median and 15th/85th percentiles of the log10 metric across seeds."""
    traces = read_traces(directory)
    if not traces:
        raise SpecError(f"no trace files in {directory}")
    table = []
    for alg in sorted(traces):
        runs = traces[alg]
        T = min(len(r) for r in runs.values())
        M = np.array([[row["log10_metric"] for row in r[:T]] for r in runs.values()])
        med = np.median(M, axis=0)
        p15, p85 = np.percentile(M, 15, axis=0), np.percentile(M, 85, axis=0)
        for t in range(T):
            table.append([t + 1, alg, float(med[t]), float(p15[t]), float(p85[t])])
    return table


def write_summary(directory) -> Path:
    path = Path(directory) / "summary.csv"
    table = summarize(directory)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for it, alg, med, lo, hi in table:
            w.writerow([it, alg, repr(med), repr(lo), repr(hi)])
    return path


def write_manifest(directory, spec: ExperimentSpec, runs: list) -> Path:
    directory = Path(directory)
    files = {p.name: _sha256(p) for p in sorted(directory.iterdir()) if p.name != "manifest.json" and p.is_file()}
    manifest = {
        "version": __version__,
        "spec": json.loads(spec.canonical()),
        "spec_sha256": spec.digest(),
        "fixtures": fixture_hashes(),
        "files": files,
        "runs": runs,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def verify_manifest(directory) -> list:
    """Names of declared files that are missing or whose hash changed."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    bad = []
    for name, digest in manifest["files"].items():
        p = directory / name
        if not p.is_file() or _sha256(p) != digest:
            bad.append(name)
    return bad


def emit_plotdata(directory) -> Path:
    """Long-format plot table: one row per (algorithm, iteration) with the median and 15/85 band."""
    src = Path(directory) / "summary.csv"
    if not src.is_file():
        raise SpecError(f"no summary.csv in {directory}; run `riskbo summarize` first")
    with open(src, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SUMMARY_COLUMNS:
            raise SpecError(f"{src}: expected columns {SUMMARY_COLUMNS}, got {reader.fieldnames}")
        rows = []
        for i, r in enumerate(reader, start=2):
            try:
                it, med, lo, hi = int(r["iteration"]), float(r["median_log10_metric"]), float(r["p15"]), float(r["p85"])
            except (TypeError, ValueError) as exc:
                raise SpecError(f"{src}:{i}: malformed row") from exc
            if not lo <= med <= hi:
                raise SpecError(f"{src}:{i}: band does not contain the median")
            rows.append((r["algorithm"], it, med, lo, hi))
    rows.sort(key=lambda r: (r[0], r[1]))
    out = Path(directory) / "plotdata.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["algorithm", "iteration", "median", "band_lo", "band_hi"])
        for alg, it, med, lo, hi in rows:
            w.writerow([alg, it, repr(med), repr(lo), repr(hi)])
    return out


def _overrides(args) -> dict:
    o = {
        "problem": args.problem, "z_mode": args.z_mode, "alpha": args.alpha, "T": args.T, "repeats": args.repeats,
        "master_seed": args.master_seed, "workers": args.workers, "out": args.out,
        "beta.kind": args.beta, "beta.B": args.beta_B, "beta.delta": args.beta_delta,
        "pinball.iters": args.pinball_iters, "pinball.batch": args.pinball_batch,
    }
    for name in _NESTED["lnso"]:
        o[f"lnso.{name}"] = getattr(args, f"lnso_{name}")
    if args.acq is not None:
        if args.acq == "vucb":
            o["algorithms"] = ["vucb-unif" if args.lv_mode == "uniform" else "vucb-prob"]
        else:
            o["algorithms"] = [args.acq]
    elif args.lv_mode is not None:
        o["algorithms"] = ["vucb-unif" if args.lv_mode == "uniform" else "vucb-prob"]
    if args.algorithms:
        o["algorithms"] = args.algorithms.split(",")
    return o


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="riskbo", description="Value-at-Risk Bayesian optimization experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment spec (YAML or JSON)")
    run.add_argument("spec", nargs="?", help="spec file; flags override its values")
    run.add_argument("--problem", choices=sorted(PROBLEMS))
    run.add_argument("--z-mode", choices=["discrete", "continuous"])
    run.add_argument("--alpha", type=float)
    run.add_argument("--T", type=int)
    run.add_argument("--repeats", type=int)
    run.add_argument("--algorithms", help="comma separated subset of " + ",".join(ALGORITHMS))
    run.add_argument("--beta", choices=["practical", "theoretical"])
    run.add_argument("--beta-B", type=float)
    run.add_argument("--beta-delta", type=float)
    run.add_argument("--lv-mode", choices=["uniform", "max-mass"])
    run.add_argument("--acq", choices=["vucb", "stableopt", "random"])
    run.add_argument("--pinball-iters", type=int)
    run.add_argument("--pinball-batch", type=int)
    for name, typ in _NESTED["lnso"].items():
        run.add_argument(f"--lnso-{name.replace('_', '-')}", dest=f"lnso_{name}", type=typ)
    run.add_argument("--workers", type=int)
    run.add_argument("--master-seed", type=int)
    run.add_argument("--out", help="output directory (default: $RISKBO_OUT/<problem>_<z_mode>_<hash>)")

    s = sub.add_parser("summarize", help="rebuild summary.csv from the trace files in a directory")
    s.add_argument("dir")
    p = sub.add_parser("plotdata", help="write plotdata.csv from summary.csv")
    p.add_argument("dir")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            spec = parse_spec(args.spec, _overrides(args))
            out, runs = run_experiment(spec)
            failed = [r for r in runs if r["status"] != "ok"]
            print(f"{len(runs) - len(failed)}/{len(runs)} runs ok; output in {out}")
            return 1 if failed else 0
        if args.command == "summarize":
            path = write_summary(args.dir)
            print(path)
            return 0
        path = emit_plotdata(args.dir)
        print(path)
        return 0
    except SpecError as exc:
        print(f"riskbo: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
