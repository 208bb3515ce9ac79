"""ERM and Bayesian estimators over the norm-constrained class, plus rate sweeps.

The class is ``F = {f : ||W^(l)||_F <= R_bar, ||b^(l)|| <= R_bar_b}``; it is
both the ERM search space and the support of the uniform-ball prior.
"""
from __future__ import annotations

import csv
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .bounds import balance_lambda
from .net_core import Dataset, Network, NormBudget, activate, forward, make_teacher
from .spectral import layer_spectrum

WORKERS_ENV = "DEEPDOF_WORKERS"


# --------------------------------------------------------------------------
# data


def gen_data(teacher: Network, n: int, sigma: float, D_x: float = 1.0, seed=0) -> Dataset:
    """``x ~ U([-D_x, D_x]^d)``, ``y = f(x) + N(0, sigma^2)``."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    X = rng.uniform(-D_x, D_x, (n, teacher.input_dim))
    f = forward(teacher, X) if n else np.zeros(0)
    y = f + sigma * rng.standard_normal(n) if sigma > 0 else f.copy()
    return Dataset(X, y, sigma, f)


def _predict(predictor, X) -> np.ndarray:
    return forward(predictor, X) if isinstance(predictor, Network) else np.asarray(predictor(X), dtype=np.float64)


def l2_error(predictor, teacher: Network, n_test: int = 4096, seed=0, D_x: float = 1.0) -> tuple[float, float]:
    """Monte Carlo ``||f_hat - f||^2`` on fresh uniform inputs, with its standard error."""
    if n_test < 1:
        raise ValueError("n_test must be >= 1")
    X = np.random.default_rng(seed).uniform(-D_x, D_x, (n_test, teacher.input_dim))
    sq = (_predict(predictor, X) - forward(teacher, X)) ** 2
    se = float(sq.std(ddof=1) / math.sqrt(n_test)) if n_test > 1 else math.inf
    return float(sq.mean()), se


# --------------------------------------------------------------------------
# class projection and gradients


def _project(ws, bs, budget: NormBudget):
    out_w = [W * min(1.0, budget.R_bar / n) if (n := np.linalg.norm(W)) > 0 else W for W in ws]
    out_b = [b * min(1.0, budget.R_bar_b / n) if (n := np.linalg.norm(b)) > 0 else b for b in bs]
    return out_w, out_b


def project_to_class(net: Network, budget: NormBudget) -> Network:
    """Radial projection of every ``W`` and ``b`` onto its ball."""
    ws, bs = _project(net.weights, net.biases, budget)
    return Network(tuple(ws), tuple(bs), net.activation)


def _loss_grad(ws, bs, X, y, activation, need_grad=True):
    """Mean squared loss and its gradient by explicit backpropagation."""
    H, Zs, Hs = X, [], [X]
    L = len(ws)
    for k in range(L):
        Z = H @ ws[k].T + bs[k]
        Zs.append(Z)
        if k < L - 1:
            H = activate(Z, activation)
            Hs.append(H)
    r = Zs[-1][:, 0] - y
    n = max(y.size, 1)
    loss = float(r @ r / n)
    if not need_grad:
        return loss, None, None
    gW, gb = [None] * L, [None] * L
    dZ = (2.0 / n) * r[:, None]
    for k in range(L - 1, -1, -1):
        gW[k] = dZ.T @ Hs[k]
        gb[k] = dZ.sum(axis=0)
        if k > 0:
            dH = dZ @ ws[k]
            dZ = dH * (Zs[k - 1] > 0) if activation == "relu" else dH
    return loss, gW, gb


def _init_params(widths, rng, budget: NormBudget):
    ws = [rng.standard_normal((o, i)) / math.sqrt(i) for i, o in zip(widths[:-1], widths[1:])]
    bs = [rng.uniform(-0.1, 0.1, o) for o in widths[1:]]
    return _project(ws, bs, budget)


# --------------------------------------------------------------------------
# ERM


@dataclass(frozen=True)
class ErmConfig:
    """Projected full-batch gradient descent with backtracking."""

    learning_rate: float = 0.5
    growth: float = 1.5
    epochs: int = 3000
    restarts: int = 5
    min_step: float = 1e-12
    tol: float = 1e-14
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.restarts < 1:
            raise ValueError("epochs and restarts must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class ErmResult:
    net: Network
    train_loss: float
    restart_losses: list[float]
    history: list[float]


def _gd_run(ws, bs, X, y, activation, budget, cfg: ErmConfig):
    loss, gW, gb = _loss_grad(ws, bs, X, y, activation)
    step, history = cfg.learning_rate, [loss]
    for _ in range(cfg.epochs):
        accepted = False
        while step >= cfg.min_step:
            nw, nb = _project([W - step * g for W, g in zip(ws, gW)], [b - step * g for b, g in zip(bs, gb)], budget)
            new, ngW, ngb = _loss_grad(nw, nb, X, y, activation)
            if math.isfinite(new) and new <= loss:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        improvement = loss - new
        ws, bs, loss, gW, gb = nw, nb, new, ngW, ngb
        history.append(loss)
        step *= cfg.growth
        if improvement <= cfg.tol * max(loss, 1e-300):
            break
    return ws, bs, loss, history


def erm_fit(data: Dataset, widths: Sequence[int], budget: NormBudget, cfg: ErmConfig = ErmConfig(),
            activation: str = "relu", init: Network | None = None) -> ErmResult:
    """Approximate least-squares minimizer over the class; best of ``cfg.restarts``.

    Every accepted step lowers the training loss and every iterate is
    projected back into the class. ``init`` replaces the first restart's
    random start.
    """
    widths = tuple(int(w) for w in widths)
    if widths[0] != data.X.shape[1] or widths[-1] != 1:
        raise ValueError("widths must run from d_x to 1")
    rng = np.random.default_rng(cfg.seed)
    best, losses = None, []
    for r in range(cfg.restarts):
        if r == 0 and init is not None:
            ws, bs = _project(init.weights, init.biases, budget)
        else:
            ws, bs = _init_params(widths, rng, budget)
        with np.errstate(over="ignore", invalid="ignore"):
            ws, bs, loss, hist = _gd_run(list(ws), list(bs), data.X, data.y, activation, budget, cfg)
        losses.append(loss)
        if math.isfinite(loss) and (best is None or loss < best[2]):
            best = (ws, bs, loss, hist)
    if best is None:
        raise FloatingPointError("all ERM restarts diverged")
    ws, bs, loss, hist = best
    return ErmResult(Network(tuple(ws), tuple(bs), activation), loss, losses, hist)


# --------------------------------------------------------------------------
# Bayes


@dataclass(frozen=True)
class BayesConfig:
    """Random-walk Metropolis with a uniform-ball prior."""

    proposal_std: float = 0.02
    chain_length: int = 20000
    burn_in: int = 5000
    thinning: int = 20
    sigma: float = 0.1
    adapt_every: int = 100
    target_accept: float = 0.25
    init: str = "prior"
    seed: int = 0

    def __post_init__(self):
        if self.chain_length <= self.burn_in:
            raise ValueError("chain_length must exceed burn_in")
        if not self.proposal_std > 0 or not self.sigma > 0:
            raise ValueError("proposal_std and sigma must be positive")
        if self.init not in ("prior", "erm"):
            raise ValueError("init must be 'prior' or 'erm'")


@dataclass
class BayesResult:
    samples: list[Network]
    acceptance_rate: float
    proposal_std: float
    flagged: bool

    def predict(self, X) -> np.ndarray:
        """Posterior-mean predictor: pointwise average of the thinned samples."""
        return np.mean([forward(net, X) for net in self.samples], axis=0)


def _ball_sample(rng, shape, radius):
    """Uniform draw from the Euclidean ball of the given radius in ``R^shape``."""
    d = int(np.prod(shape))
    v = rng.standard_normal(d)
    v *= radius * rng.uniform() ** (1.0 / d) / np.linalg.norm(v)
    return v.reshape(shape)


def prior_sample(widths, budget: NormBudget, rng, activation: str = "relu") -> Network:
    ws = [_ball_sample(rng, (o, i), budget.R_bar) for i, o in zip(widths[:-1], widths[1:])]
    bs = [_ball_sample(rng, (o,), budget.R_bar_b) for o in widths[1:]]
    return Network(tuple(ws), tuple(bs), activation)


def _in_support(theta, slices, budget):
    for (sw, sb) in slices:
        if np.sum(theta[sw] ** 2) > budget.R_bar**2 or np.sum(theta[sb] ** 2) > budget.R_bar_b**2:
            return False
    return True


def bayes_fit(data: Dataset, widths: Sequence[int], budget: NormBudget, cfg: BayesConfig = BayesConfig(),
              activation: str = "relu", init: Network | None = None) -> BayesResult:
    """Posterior ``exp(-sum (y - f)^2 / 2 sigma^2) Pi(df)`` sampled by random-walk Metropolis.

    The proposal scale is adapted toward ``cfg.target_accept`` during
    burn-in only. ``init`` (used when ``cfg.init == "erm"``) must lie in the
    prior support.
    """
    widths = tuple(int(w) for w in widths)
    rng = np.random.default_rng(cfg.seed)
    start = init if (cfg.init == "erm" and init is not None) else prior_sample(widths, budget, rng, activation)
    theta = start.flat()
    slices, off = [], 0
    for i, o in zip(widths[:-1], widths[1:]):
        slices.append((slice(off, off + o * i), slice(off + o * i, off + o * i + o)))
        off += o * i + o
    if not _in_support(theta, slices, budget):
        raise ValueError("initial parameters lie outside the prior support")
    template = start

    def loglik(th):
        if data.n == 0:
            return 0.0
        r = forward(template.with_flat(th), data.X) - data.y
        return -float(r @ r) / (2.0 * cfg.sigma**2)

    ll, std = loglik(theta), cfg.proposal_std
    samples, acc_window, acc_frozen, n_frozen = [], 0, 0, 0
    for t in range(1, cfg.chain_length + 1):
        prop = theta + std * rng.standard_normal(theta.size)
        u = rng.uniform()
        ok = False
        if _in_support(prop, slices, budget):
            llp = loglik(prop)
            if math.log(u) < llp - ll if u > 0 else True:
                theta, ll, ok = prop, llp, True
        if t <= cfg.burn_in:
            acc_window += ok
            if t % cfg.adapt_every == 0:
                rate = acc_window / cfg.adapt_every
                std *= math.exp(rate - cfg.target_accept)
                acc_window = 0
        else:
            acc_frozen += ok
            n_frozen += 1
            if (t - cfg.burn_in) % cfg.thinning == 0:
                samples.append(template.with_flat(theta.copy()))
    rate = acc_frozen / max(n_frozen, 1)
    flagged = not 0.01 <= rate <= 0.99
    if flagged:
        warnings.warn(f"Metropolis acceptance rate {rate:.3f} outside [0.01, 0.99]", RuntimeWarning, stacklevel=2)
    return BayesResult(samples, rate, std, flagged)


def contraction_mass(samples: Sequence, teacher: Network, radius: float, X) -> float:
    """Fraction of samples with ``||f - f_teacher||_{L2(P_hat)} >= radius`` on inputs ``X``."""
    if len(samples) == 0:
        raise ValueError("need at least one sample")
    return float(np.mean(sample_distances(samples, teacher, X) >= radius))


def sample_distances(samples: Sequence, teacher: Network, X) -> np.ndarray:
    f0 = forward(teacher, X)
    return np.array([math.sqrt(np.mean((_predict(s, X) - f0) ** 2)) for s in samples])


# --------------------------------------------------------------------------
# rate sweeps


@dataclass(frozen=True)
class RateFit:
    n_grid: list[int]
    errors: list[float]
    stderr: list[float]
    slope: float
    slope_stderr: float
    intercept: float
    dropped_first: bool = False
    target: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def fit_rate(n_grid: Sequence[int], errors: Sequence[float], stderr: Sequence[float] | None = None,
             null_level: float | None = None, target: float | None = None) -> RateFit:
    """Least-squares slope of ``log(error)`` against ``log(n)``.

    The smallest ``n`` is dropped when its error has saturated at
    ``null_level`` (the error of the best constant predictor).
    """
    n = np.asarray(n_grid, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    se = np.zeros_like(e) if stderr is None else np.asarray(stderr, dtype=np.float64)
    if n.size < 2 or np.any(np.diff(n) <= 0):
        raise ValueError("n_grid must be strictly increasing with >= 2 points")
    if np.any(e <= 0):
        raise ValueError("errors must be positive for a log-log fit")
    dropped = bool(null_level is not None and e[0] >= null_level and n.size > 2)
    keep = slice(1, None) if dropped else slice(None)
    x, z = np.log(n[keep]), np.log(e[keep])
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, z, rcond=None)
    resid = z - A @ coef
    dof_ = x.size - 2
    if dof_ > 0:
        s2 = float(resid @ resid) / dof_
        slope_se = math.sqrt(s2 / float(np.sum((x - x.mean()) ** 2)))
    else:
        slope_se = 0.0
    return RateFit([int(v) for v in n], e.tolist(), se.tolist(), float(coef[0]), slope_se, float(coef[1]), dropped, target)


@dataclass(frozen=True)
class SweepConfig:
    teacher: str = "finite_dim"
    teacher_dims: tuple[int, ...] = (2, 3, 1)
    teacher_seed: int = 0
    a: float = 1.0
    s: float = 0.5
    estimator: str = "erm"
    n_grid: tuple[int, ...] = (64, 128, 256, 512, 1024, 2048, 4096)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    widths_rule: str = "fixed"
    widths: tuple[int, ...] | None = None
    balance_rule: str = "deep"
    sigma: float = 0.1
    budget: NormBudget = field(default_factory=NormBudget)
    erm: ErmConfig = field(default_factory=ErmConfig)
    bayes: BayesConfig = field(default_factory=BayesConfig)
    n_test: int = 4096
    n_spectrum: int = 1024
    master_seed: int = 0

    def __post_init__(self):
        if self.estimator not in ("erm", "bayes"):
            raise ValueError("estimator must be 'erm' or 'bayes'")
        if self.widths_rule not in ("fixed", "balanced"):
            raise ValueError("widths_rule must be 'fixed' or 'balanced'")
        if len(self.seeds) < 1:
            raise ValueError("need at least one seed")


@dataclass
class Cell:
    estimator: str
    teacher: str
    n: int
    seed: int
    widths: tuple[int, ...]
    mse: float
    stderr: float
    ok: bool = True
    error: str = ""


def build_teacher(cfg: SweepConfig) -> Network:
    b = cfg.budget
    return make_teacher(cfg.teacher, cfg.teacher_dims, cfg.teacher_seed, a=cfg.a, s=cfg.s, R=b.R, R_b=b.R_b, D_x=b.D_x)


def _cell_streams(master_seed: int, n: int, seed: int):
    data_ss, fit_ss, test_ss = np.random.SeedSequence([master_seed, n, seed]).spawn(3)
    return data_ss, fit_ss, test_ss


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def plan_widths(cfg: SweepConfig, teacher: Network, n: int) -> tuple[int, ...]:
    """Student widths for sample size ``n``: fixed, or balanced per teacher layer."""
    if cfg.widths_rule == "fixed":
        return tuple(cfg.widths) if cfg.widths is not None else teacher.widths
    X = np.random.default_rng([cfg.master_seed, 7]).uniform(-cfg.budget.D_x, cfg.budget.D_x,
                                                              (cfg.n_spectrum, teacher.input_dim))
    ms = []
    for ell in range(2, teacher.depth + 1):
        spec = layer_spectrum(teacher, X, ell - 1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            bal = balance_lambda(spec, n, cfg.budget.delta, rule=cfg.balance_rule, d_x=teacher.input_dim)
        ms.append(bal.m)
    return (teacher.input_dim, *ms, 1)


def run_cell(cfg: SweepConfig, teacher: Network, n: int, seed: int) -> Cell:
    data_ss, fit_ss, test_ss = _cell_streams(cfg.master_seed, n, seed)
    try:
        widths = plan_widths(cfg, teacher, n)
        data = gen_data(teacher, n, cfg.sigma, cfg.budget.D_x, data_ss)
        erm = erm_fit(data, widths, cfg.budget, replace(cfg.erm, seed=_seed_int(fit_ss)), teacher.activation)
        if cfg.estimator == "erm":
            predictor = erm.net
        else:
            bcfg = replace(cfg.bayes, seed=_seed_int(fit_ss), sigma=max(cfg.sigma, 1e-8))
            res = bayes_fit(data, widths, cfg.budget, bcfg, teacher.activation, init=erm.net)
            predictor = res.predict
        mse, se = l2_error(predictor, teacher, cfg.n_test, test_ss, cfg.budget.D_x)
        return Cell(cfg.estimator, cfg.teacher, n, seed, widths, mse, se)
    except Exception as exc:  # a failed cell is reported, not fatal
        return Cell(cfg.estimator, cfg.teacher, n, seed, (), math.nan, math.nan, False, f"{type(exc).__name__}: {exc}")


def _run_cell_args(args):
    return run_cell(*args)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def rate_sweep(cfg: SweepConfig, *, inject: Callable[[int], float] | None = None,
               workers: int | None = None, target: float | None = None) -> tuple[list[Cell], RateFit]:
    """Generate, fit and score every ``(n, seed)`` cell; fit the log-log slope.

    ``inject`` (test mode) replaces the estimator: cell errors become
    ``inject(n)``. Cells are reduced in grid order regardless of ``workers``.
    """
    grid = sorted(int(n) for n in cfg.n_grid)
    ratios = np.diff(np.log(grid)) if len(grid) > 1 else np.zeros(0)
    if len(grid) < 5 or np.any(ratios <= 0) or np.ptp(ratios) > 1e-6 * ratios.mean():
        raise ValueError("n_grid must be geometric with at least 5 distinct points")
    if len(cfg.seeds) < 3:
        raise ValueError("a sweep needs at least 3 seeds")
    if inject is not None:
        cells = [Cell("inject", cfg.teacher, n, s, (), float(inject(n)), 0.0) for n in grid for s in cfg.seeds]
        null = None
    else:
        teacher = build_teacher(cfg)
        jobs = [(cfg, teacher, n, s) for n in grid for s in cfg.seeds]
        workers = default_workers() if workers is None else workers
        if workers > 1:
            with ProcessPoolExecutor(workers) as ex:
                cells = list(ex.map(_run_cell_args, jobs))
        else:
            cells = [run_cell(*j) for j in jobs]
        Xn = np.random.default_rng([cfg.master_seed, 11]).uniform(-cfg.budget.D_x, cfg.budget.D_x,
                                                                   (cfg.n_test, teacher.input_dim))
        null = float(np.var(forward(teacher, Xn)))
    means, ses = [], []
    for n in grid:
        errs = np.array([c.mse for c in cells if c.n == n and c.ok])
        if errs.size == 0:
            raise RuntimeError(f"every cell at n={n} failed")
        means.append(float(errs.mean()))
        ses.append(float(errs.std(ddof=1) / math.sqrt(errs.size)) if errs.size > 1 else 0.0)
    return cells, fit_rate(grid, means, ses, null, target)


def write_cells_csv(path, cells: Sequence[Cell]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["estimator", "teacher", "n", "seed", "mse", "stderr"])
        for c in cells:
            w.writerow([c.estimator, c.teacher, c.n, c.seed, repr(c.mse), repr(c.stderr)])


def rate_summary(fit: RateFit, cfg: SweepConfig, cells: Sequence[Cell]) -> str:
    doc = {
        "format": "deepdof.rate_fit/1",
        "teacher": cfg.teacher,
        "estimator": cfg.estimator,
        "widths_rule": cfg.widths_rule,
        **fit.to_dict(),
        "failed_cells": [{"n": c.n, "seed": c.seed, "error": c.error} for c in cells if not c.ok],
    }
    return json.dumps(doc, indent=1, sort_keys=True)
