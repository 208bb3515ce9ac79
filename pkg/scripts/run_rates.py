"""Learning-rate sweeps for the finite-dimensional and polynomial-decay teachers.

Writes one cell CSV and one rate summary per experiment into ``--out``.
Set DEEPDOF_WORKERS to run cells in parallel.
"""
import argparse
import json
from pathlib import Path

from deepdof.estimators import BayesConfig, SweepConfig, rate_sweep, rate_summary, write_cells_csv

GRID = tuple(64 * 2**k for k in range(7))
SEEDS = (0, 1, 2, 3, 4)

EXPERIMENTS = {
    "finite_dim_erm": (SweepConfig(teacher="finite_dim", teacher_dims=(2, 3, 1), n_grid=GRID, seeds=SEEDS), -1.0),
    "finite_dim_bayes": (SweepConfig(teacher="finite_dim", teacher_dims=(2, 3, 1), estimator="bayes", n_grid=GRID,
                                     seeds=SEEDS, bayes=BayesConfig(chain_length=20_000)), -1.0),
    "poly_two_layer_erm": (SweepConfig(teacher="poly_decay", teacher_dims=(8, 512, 1), s=0.5, widths_rule="balanced",
                                       balance_rule="two_layer", n_grid=GRID, seeds=SEEDS), -2 / 3),
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results/rates")
    p.add_argument("--only", nargs="*", choices=sorted(EXPERIMENTS))
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in args.only or EXPERIMENTS:
        cfg, target = EXPERIMENTS[name]
        cells, fit = rate_sweep(cfg, target=target)
        write_cells_csv(out / f"{name}.csv", cells)
        (out / f"{name}.json").write_text(rate_summary(fit, cfg, cells) + "\n")
        print(json.dumps({"experiment": name, "slope": round(fit.slope, 4), "stderr": round(fit.slope_stderr, 4),
                          "target": round(target, 4), "dropped_first": fit.dropped_first}))


if __name__ == "__main__":
    main()
