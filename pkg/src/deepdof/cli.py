"""Command-line entry point: ``analyze``, ``plan``, ``compress``, ``experiment``.

Configuration is a JSON document; every flag overrides the matching field.
Data goes to files in the output directory, logs go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bounds, estimators, spectral
from .net_core import Network, NormBudget, load_network, make_teacher, save_network
from .quadrature_compress import compress_network

log = logging.getLogger("deepdof")

COMMANDS = ("analyze", "plan", "compress", "experiment")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = "analyze"
    model_path: str | None = None
    data_path: str | None = None
    synthetic: dict = field(default_factory=dict)
    budget: dict = field(default_factory=lambda: {"R": 1.0, "R_b": 1.0, "D_x": 1.0, "delta": 0.1})
    sigma: float = 0.1
    n: int | None = None
    n_kernel: int = 1024
    n_eval: int = 4096
    n_grid: list[int] = field(default_factory=lambda: [64, 128, 256, 512, 1024, 2048, 4096])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    widths: list[int] | None = None
    lambdas: list[float] | None = None
    sampling: str = "auto"
    output_dir: str = "out"
    master_seed: int = 0
    lambda_points: int = 25
    experiments: list[dict] = field(default_factory=list)

    def norm_budget(self) -> NormBudget:
        return NormBudget(**self.budget)

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        try:
            self.norm_budget()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid budget: {exc}") from exc
        if self.sigma < 0:
            raise ConfigError("sigma must be nonnegative")
        if self.n is not None and self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.sampling not in ("auto", "leverage", "uniform", "all"):
            raise ConfigError(f"unknown sampling {self.sampling!r}")
        if self.n_kernel < 1 or self.n_eval < 1:
            raise ConfigError("n_kernel and n_eval must be >= 1")
        for p in (self.model_path, self.data_path):
            if p is not None and not Path(p).exists():
                raise ConfigError(f"path does not exist: {p}")


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    known = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**doc)


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepdof", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config")
    p.add_argument("--model", dest="model_path")
    p.add_argument("--data", dest="data_path")
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--seed", dest="master_seed", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--n-grid", dest="n_grid", type=_ints)
    p.add_argument("--seeds", type=_ints)
    p.add_argument("--widths", type=_ints)
    p.add_argument("--lambda", dest="lambdas", type=_floats)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    cfg.command = args.command
    for name in ("model_path", "data_path", "output_dir", "master_seed", "sigma", "n_grid", "seeds", "widths", "lambdas"):
        v = getattr(args, name)
        if v is not None:
            setattr(cfg, name, v)
    if args.delta is not None:
        cfg.budget = {**cfg.budget, "delta": args.delta}
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# inputs


def get_model(cfg: RunConfig) -> Network:
    if cfg.model_path is not None:
        try:
            return load_network(cfg.model_path)
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load model {cfg.model_path}: {exc}") from exc
    syn = cfg.synthetic
    if not syn:
        raise ConfigError("no model: give --model or a 'synthetic' teacher in the config")
    b = cfg.norm_budget()
    return make_teacher(syn.get("kind", "kernel_two_layer"), syn["dims"], syn.get("seed", 0),
                        a=syn.get("a", 1.0), s=syn.get("s", 0.5), R=b.R, R_b=b.R_b, D_x=b.D_x,
                        activation=syn.get("activation", "relu"))


def load_data(path: str, d_x: int) -> np.ndarray:
    """Inputs from ``.npy``/``.npz`` (key ``X``) or a headered CSV whose first ``d_x`` columns are x."""
    try:
        if path.endswith(".npy"):
            X = np.load(path)
        elif path.endswith(".npz"):
            X = np.load(path)["X"]
        else:
            X = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)[:, :d_x]
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read data {path}: {exc}") from exc
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != d_x:
        raise ConfigError(f"data must have {d_x} input columns, got shape {X.shape}")
    return X


def get_inputs(cfg: RunConfig, net: Network, stream: int = 0) -> np.ndarray:
    if cfg.data_path is not None:
        return load_data(cfg.data_path, net.input_dim)
    D = cfg.norm_budget().D_x
    return np.random.default_rng([cfg.master_seed, stream]).uniform(-D, D, (cfg.n_kernel, net.input_dim))


# --------------------------------------------------------------------------
# commands


def cmd_analyze(cfg: RunConfig, out: Path) -> list[dict]:
    net = get_model(cfg)
    X = get_inputs(cfg, net)
    spectra, curves, fits, errors = {}, {}, {}, []
    for hidden in range(1, net.depth):
        layer = hidden + 1
        try:
            spec = spectral.layer_spectrum(net, X, hidden)
        except spectral.NotPSDError as exc:
            errors.append({"layer": layer, "error": f"non-PSD Gram: {exc}"})
            continue
        spectra[layer] = spec
        curves[layer] = spectral.dof_curve(spec, spectral.lambda_grid(spec, cfg.lambda_points))
        try:
            fits[layer] = asdict(spectral.fit_decay(spec))
        except ValueError as exc:
            fits[layer] = {"error": str(exc)}
    spectral.write_spectrum_csv(out / "spectrum.csv", spectra)
    spectral.write_dof_csv(out / "dof.csv", curves)
    (out / "decay.json").write_text(json.dumps({str(k): v for k, v in fits.items()}, indent=1, sort_keys=True) + "\n")
    log.info("analyzed %d layers", len(spectra))
    return errors


def plan_layers(cfg: RunConfig, net: Network, X: np.ndarray, n: int):
    b = cfg.norm_budget()
    rows = []
    for hidden in range(1, net.depth):
        spec = spectral.layer_spectrum(net, X, hidden)
        bal = bounds.balance_lambda(spec, n, b.delta)
        rows.append({"layer": hidden + 1, "lambda": bal.lam, "dof": bal.dof, "m_required": bal.m,
                     "converged": bal.converged})
    return rows


def cmd_plan(cfg: RunConfig, out: Path) -> list[dict]:
    net = get_model(cfg)
    X = get_inputs(cfg, net)
    n = cfg.n or X.shape[0]
    rows = plan_layers(cfg, net, X, n)
    with open(out / "plan.csv", "w") as fh:
        fh.write("layer,lambda,dof,m_required,converged\n")
        for r in rows:
            fh.write(f"{r['layer']},{r['lambda']!r},{r['dof']!r},{r['m_required']},{int(r['converged'])}\n")
    widths = [net.input_dim, *[r["m_required"] for r in rows], 1]
    report = bounds.bound_report(n, cfg.sigma, widths, [r["lambda"] for r in rows], cfg.norm_budget())
    doc = {"format": "deepdof.bound_report/1", "inputs": asdict(cfg), **report.to_dict()}
    (out / "bound_report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return [{"layer": r["layer"], "error": "lambda balancing did not converge"} for r in rows if not r["converged"]]


def cmd_compress(cfg: RunConfig, out: Path) -> list[dict]:
    net = get_model(cfg)
    X = get_inputs(cfg, net, 0)
    X_eval = np.random.default_rng([cfg.master_seed, 1]).uniform(
        -cfg.norm_budget().D_x, cfg.norm_budget().D_x, (cfg.n_eval, net.input_dim))
    kw = {}
    if cfg.widths is not None:
        w = list(cfg.widths)
        kw["widths"] = w[1:-1] if len(w) == net.depth + 1 else w
    elif cfg.lambdas is not None:
        kw["lambdas"] = cfg.lambdas
    else:
        kw["lambdas"] = [r["lambda"] for r in plan_layers(cfg, net, X, cfg.n or X.shape[0])]
    sampling = cfg.sampling
    if sampling == "auto":
        # at the teacher's own widths keep every node, so compression is exact
        same = kw.get("widths") is not None and list(kw["widths"]) == list(net.widths[1:-1])
        sampling = "all" if same else "leverage"
    student, report = compress_network(net, X, X_eval, seed=cfg.master_seed, budget=cfg.norm_budget(),
                                       sampling=sampling, **kw)
    save_network(student, out / "compressed.json")
    (out / "compression_report.json").write_text(report.to_json() + "\n")
    report.write_csv(out / "compression.csv")
    errors = [{"layer": r.layer, "error": "node resampling budget exhausted"} for r in report.layers if not r.sample_ok]
    return errors


def _sweep_config(cfg: RunConfig, spec: dict) -> estimators.SweepConfig:
    b = cfg.norm_budget()
    erm = estimators.ErmConfig(**spec.get("erm", {}))
    bayes = estimators.BayesConfig(**{"sigma": max(cfg.sigma, 1e-8), **spec.get("bayes", {})})
    return estimators.SweepConfig(
        teacher=spec.get("teacher", "finite_dim"),
        teacher_dims=tuple(spec.get("teacher_dims", (2, 3, 1))),
        teacher_seed=spec.get("teacher_seed", 0),
        a=spec.get("a", 1.0),
        s=spec.get("s", 0.5),
        estimator=spec.get("estimator", "erm"),
        n_grid=tuple(spec.get("n_grid", cfg.n_grid)),
        seeds=tuple(spec.get("seeds", cfg.seeds)),
        widths_rule=spec.get("widths_rule", "fixed"),
        widths=tuple(spec["widths"]) if spec.get("widths") else (tuple(cfg.widths) if cfg.widths else None),
        balance_rule=spec.get("balance_rule", "deep"),
        sigma=spec.get("sigma", cfg.sigma),
        budget=b,
        erm=erm,
        bayes=bayes,
        n_test=spec.get("n_test", cfg.n_eval),
        master_seed=cfg.master_seed,
    )


def cmd_experiment(cfg: RunConfig, out: Path) -> list[dict]:
    specs = cfg.experiments or [{}]
    errors, summary = [], []
    for k, spec in enumerate(specs):
        name = spec.get("name", f"exp{k}")
        scfg = _sweep_config(cfg, spec)
        inject = None
        if "inject" in spec:
            c, p = spec["inject"].get("c", 1.0), spec["inject"]["exponent"]
            inject = lambda n, c=c, p=p: c * n**p  # noqa: E731
        target = spec.get("target")
        try:
            cells, fit = estimators.rate_sweep(scfg, inject=inject, target=target)
        except Exception as exc:
            errors.append({"experiment": name, "error": f"{type(exc).__name__}: {exc}"})
            summary.append({"name": name, "failed": True, "error": str(exc)})
            continue
        estimators.write_cells_csv(out / f"sweep_{name}.csv", cells)
        (out / f"summary_{name}.json").write_text(estimators.rate_summary(fit, scfg, cells) + "\n")
        failed = [c for c in cells if not c.ok]
        errors += [{"experiment": name, "n": c.n, "seed": c.seed, "error": c.error} for c in failed]
        summary.append({"name": name, "slope": fit.slope, "slope_stderr": fit.slope_stderr, "target": target,
                        "failed_cells": len(failed)})
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return errors


HANDLERS = {"analyze": cmd_analyze, "plan": cmd_plan, "compress": cmd_compress, "experiment": cmd_experiment}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        errors = HANDLERS[cfg.command](cfg, out)
    except (ConfigError, ValueError, OSError) as exc:
        print(json.dumps({"errors": [{"error": str(exc)}]}), file=sys.stderr)
        return 2
    if errors:
        (out / "errors.json").write_text(json.dumps({"errors": errors}, indent=1) + "\n")
        print(json.dumps({"errors": errors}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
