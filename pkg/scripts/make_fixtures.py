"""Regenerate the frozen oracle values and atom grids under src/riskbo/data."""

from pathlib import Path

import numpy as np

from riskbo.bench import PROBLEMS, make_problem, oracle_best

DATA = Path(__file__).resolve().parents[1] / "src" / "riskbo" / "data"


def main():
    lines = ["# name\tz_mode\talpha\tvalue\tx_star..."]
    for name in PROBLEMS:
        for mode in ("discrete", "continuous"):
            p = make_problem(name, mode)
            x, v = oracle_best(p, recompute=True)
            lines.append("\t".join([name, mode, repr(float(p.alpha)), repr(float(v)), *(repr(float(v)) for v in x)]))
            print(lines[-1], flush=True)
            if mode == "discrete":
                rows = np.hstack([p.env.atoms, p.env.masses[:, None]])
                np.savetxt(DATA / f"atoms_{name}.tsv", rows, delimiter="\t", fmt="%.17g",
                           header="z... mass")
    (DATA / "oracles.tsv").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
