"""Layerwise kernel-quadrature compression of a wide teacher network.

For every layer ``ell = 2..L`` nodes ``v_j`` of the teacher's ``ell``-th
layer are drawn i.i.d. from the ridge-leverage density ``q`` with importance
weights ``w_j = (q_j m_teacher)^{-1/2}``. The teacher's pre-activations at the
sampled next-layer nodes are then regressed on the rescaled features
``Psi_j = eta(w_j F_{ell-1}(x, v_j) / sqrt(m))`` under the ball constraint
``||beta||^2 <= 4 R^2 / m`` and written back with the rescalings that keep
every compressed weight matrix inside ``||W||_F^2 <= c_hat R^2``.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .bounds import delta1_terms, required_width
from .net_core import Network, NormBudget, activate, forward, pre_activations
from .spectral import NodeKernel, dof, feature_matrix

MAX_RESAMPLES = 32
RIDGE_FLOOR = 1e-12


# --------------------------------------------------------------------------
# node sampling


@dataclass(frozen=True)
class NodeSample:
    node_ids: np.ndarray
    w: np.ndarray
    weight_mass: float
    cap: float
    tries: int
    ok: bool


def weight_cap(delta: float) -> float:
    return 1.0 / (1.0 - 2.0 * delta)


def sample_nodes(q, m: int, seed, delta: float = 0.1, max_tries: int = MAX_RESAMPLES) -> NodeSample:
    """Draw ``m`` node indices i.i.d. from ``q`` (with replacement).

    Redraws until the weight mass ``(1/m) sum w_j^2`` is at most
    ``(1 - 2 delta)^{-1}``; after ``max_tries`` failures the lightest draw is
    returned with ``ok=False``.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.size == 0 or np.any(q < 0) or not math.isclose(q.sum(), 1.0, rel_tol=1e-9):
        raise ValueError("q must be a probability vector")
    if m < 1:
        raise ValueError("m must be >= 1")
    if not 0 < delta < 0.5:
        raise ValueError("delta must lie in (0, 1/2)")
    cap = weight_cap(delta)
    rng = np.random.default_rng(seed)
    best = None
    for t in range(1, max_tries + 1):
        ids = rng.choice(q.size, size=m, replace=True, p=q)
        w = 1.0 / np.sqrt(q[ids] * q.size)
        mass = float(np.mean(w**2))
        if best is None or mass < best[2]:
            best = (ids, w, mass)
        if mass <= cap:
            return NodeSample(ids, w, mass, cap, t, True)
    ids, w, mass = best
    warnings.warn(f"weight mass {mass:.4g} above cap {cap:.4g} after {max_tries} draws", RuntimeWarning, stacklevel=2)
    return NodeSample(ids, w, mass, cap, max_tries, False)


# --------------------------------------------------------------------------
# constrained least squares


@dataclass(frozen=True)
class BetaFit:
    beta: np.ndarray
    multiplier: np.ndarray
    active: np.ndarray


def solve_beta(targets, Psi, norm_cap: float, ridge_floor: float = RIDGE_FLOOR) -> BetaFit:
    """Row-wise ``min (1/n)||t - Psi beta||^2`` subject to ``||beta||^2 <= norm_cap``.

    Solved on the ridge path ``beta(nu) = (Psi^T Psi/n + nu)^{-1} Psi^T t/n``:
    the floor ``nu_0 = ridge_floor * tr(Psi^T Psi/n)`` guards rank deficiency,
    and where ``beta(nu_0)`` violates the cap ``nu`` is bisected (in log scale)
    to put ``||beta||^2`` on the cap. ``multiplier`` is ``nu`` for active rows
    and 0 otherwise.
    """
    T = np.asarray(targets, dtype=np.float64)
    Psi = np.asarray(Psi, dtype=np.float64)
    if T.ndim == 1:
        T = T[:, None]
    n, m = Psi.shape
    if T.shape[0] != n:
        raise ValueError("targets and features disagree on n")
    if norm_cap < 0:
        raise ValueError("norm_cap must be nonnegative")
    p = T.shape[1]
    U, sv, Vt = np.linalg.svd(Psi, full_matrices=False)
    ev = sv**2 / n
    nu0 = ridge_floor * max(float(ev.sum()), 1e-300)
    proj = (U.T @ T) * (sv[:, None] / n)  # k x p, Psi^T t / n in the V basis

    def coef(nu):
        return proj / (ev[:, None] + nu)

    def sqnorm(nu):
        return np.sum(coef(nu) ** 2, axis=0)

    nu = np.full(p, nu0)
    active = sqnorm(nu) > norm_cap
    if np.any(active):
        if norm_cap == 0:
            nu[active] = np.inf
        else:
            # ||beta(nu)|| <= ||proj|| / nu, so this upper end is feasible
            lo = np.full(active.sum(), nu0)
            hi = np.maximum(np.sqrt(np.sum(proj[:, active] ** 2, axis=0) / norm_cap), nu0) * 2.0
            sub = proj[:, active]
            for _ in range(200):
                mid = np.sqrt(lo * hi)
                over = np.sum((sub / (ev[:, None] + mid)) ** 2, axis=0) > norm_cap
                lo = np.where(over, mid, lo)
                hi = np.where(over, hi, mid)
                if np.all(hi / lo - 1.0 < 1e-15):
                    break
            nu[active] = hi
    with np.errstate(invalid="ignore"):
        C = np.where(np.isinf(nu)[None, :], 0.0, coef(nu))
    beta = (Vt.T @ C).T
    mult = np.where(active, nu, 0.0)
    return BetaFit(beta, mult, active)


# --------------------------------------------------------------------------
# plans


@dataclass
class LayerPlan:
    layer: int
    lam: float
    m: int
    dof: float
    node_ids: np.ndarray
    w: np.ndarray
    weight_mass: float
    sample_ok: bool


@dataclass
class CompressionPlan:
    delta: float
    layers: dict[int, LayerPlan]

    def widths(self, teacher: Network) -> tuple[int, ...]:
        L = teacher.depth
        return (teacher.input_dim, *[self.layers[ell].m for ell in range(2, L + 1)], 1)


def layer_kernels(teacher: Network, X) -> dict[int, NodeKernel]:
    """Node-side kernel eigendecompositions for layers ``2..L``."""
    return {ell: NodeKernel.from_features(feature_matrix(teacher, X, ell - 1)) for ell in range(2, teacher.depth + 1)}


def _lambda_for_width(mu: np.ndarray, m: int, delta: float) -> float:
    """Smallest ``lam`` on a log scale whose required width fits in ``m``."""
    top = float(mu.max()) if mu.size and mu.max() > 0 else 1.0
    lo, hi = top * 1e-12, top * 1e6

    def fits(lam):
        N = dof(mu, lam)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return N <= 0 or required_width(N, delta) <= m

    if fits(lo):
        return lo
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if fits(mid):
            hi = mid
        else:
            lo = mid
        if hi / lo - 1 < 1e-9:
            break
    return hi


def plan_compression(
    teacher: Network,
    X_train,
    *,
    lambdas: Sequence[float] | None = None,
    widths: Sequence[int] | None = None,
    seed=0,
    delta: float = 0.1,
    width_delta: float | None = None,
    sampling: str = "leverage",
    kernels: dict[int, NodeKernel] | None = None,
) -> CompressionPlan:
    """Choose ``(lam_ell, m_ell, v, w)`` for every layer ``ell = 2..L``.

    Give either ``lambdas`` (then ``m_ell = required_width(N(lam_ell), width_delta)``)
    or ``widths`` (then ``lam_ell`` is the smallest level whose required
    width fits). ``width_delta`` defaults to ``delta``. Node draws use the
    weight cap ``(1 - delta)^{-1}`` so that audited norms meet
    ``||W||_F^2 <= c_hat R^2``. ``sampling="all"`` takes every teacher node
    once with unit weight. ``kernels`` (from :func:`layer_kernels`) skips
    the eigendecompositions when planning repeatedly on the same inputs.
    """
    L = teacher.depth
    if L < 2:
        raise ValueError("compression needs depth >= 2")
    if (lambdas is None) == (widths is None):
        raise ValueError("give exactly one of lambdas or widths")
    width_delta = delta if width_delta is None else width_delta
    targets = list(lambdas if lambdas is not None else widths)
    if len(targets) != L - 1:
        raise ValueError(f"need {L - 1} per-layer targets for depth {L}")
    seeds = np.random.SeedSequence(seed).spawn(L - 1)
    layers = {}
    for k, ell in enumerate(range(2, L + 1)):
        kern = kernels[ell] if kernels is not None else NodeKernel.from_features(feature_matrix(teacher, X_train, ell - 1))
        m_teacher = kern.V.shape[0]
        mu = kern.spectrum.eigenvalues
        if lambdas is not None:
            lam = float(targets[k])
            N = dof(mu, lam)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                m = required_width(N, width_delta) if N > 0 else 1
        else:
            m = int(targets[k])
            if m < 1:
                raise ValueError("widths must be >= 1")
            lam = _lambda_for_width(mu, m, width_delta)
            N = dof(mu, lam)
        if sampling == "all":
            if m != m_teacher:
                raise ValueError("sampling='all' needs m equal to the teacher width")
            s = NodeSample(np.arange(m), np.ones(m), 1.0, weight_cap(delta / 2), 1, True)
        elif sampling == "uniform":
            s = sample_nodes(np.full(m_teacher, 1.0 / m_teacher), m, seeds[k], delta / 2)
        elif sampling == "leverage":
            s = sample_nodes(kern.leverage(lam).q, m, seeds[k], delta / 2)
        else:
            raise ValueError(f"unknown sampling {sampling!r}")
        layers[ell] = LayerPlan(ell, lam, m, N, s.node_ids, s.w, s.weight_mass, s.ok)
    return CompressionPlan(delta, layers)


# --------------------------------------------------------------------------
# layer construction


def _features(teacher: Network, X, ell: int, lp: LayerPlan) -> np.ndarray:
    """``Psi_j = eta(w_j F_{ell-1}(x, v_j) / sqrt(m))`` from the original teacher."""
    F = pre_activations(teacher, X, ell - 1)[:, lp.node_ids]
    return activate(F * (lp.w / math.sqrt(lp.m)), teacher.activation)


def _targets(teacher: Network, X, ell: int, ids) -> np.ndarray:
    """Teacher pre-activations of layer ``ell`` at nodes ``ids``, minus the bias."""
    b = teacher.biases[ell - 1]
    return pre_activations(teacher, X, ell)[:, ids] - b[ids]


@dataclass
class LayerFit:
    W: np.ndarray
    b: np.ndarray
    beta: np.ndarray
    target_ids: np.ndarray


def compress_layer(teacher: Network, ell: int, plan: CompressionPlan, X, R: float = 1.0) -> LayerFit:
    """Weights of compressed layer ``ell`` (1-based, ``1..L``)."""
    L = teacher.depth
    if ell == 1:
        nxt = plan.layers.get(2)
        if nxt is None:
            raise ValueError("plan has no entry for layer 2")
        s = nxt.w / math.sqrt(nxt.m)
        W = teacher.weights[0][nxt.node_ids] * s[:, None]
        b = teacher.biases[0][nxt.node_ids] * s
        return LayerFit(W, b, np.zeros((0, 0)), nxt.node_ids)
    lp = plan.layers.get(ell)
    if lp is None or (ell < L and ell + 1 not in plan.layers):
        raise ValueError(f"plan is missing entries for layer {ell}")
    Psi = _features(teacher, X, ell, lp)
    cap = 4.0 * R**2 / lp.m
    if ell == L:
        ids = np.array([0])
    else:
        ids = plan.layers[ell + 1].node_ids
    uniq, inv = np.unique(ids, return_inverse=True)
    fit = solve_beta(_targets(teacher, X, ell, uniq), math.sqrt(lp.m) * Psi, cap)
    beta = fit.beta[inv]
    if ell == L:
        W = math.sqrt(lp.m) * beta
        b = teacher.biases[L - 1].copy()
    else:
        nxt = plan.layers[ell + 1]
        W = math.sqrt(lp.m / nxt.m) * beta * nxt.w[:, None]
        b = teacher.biases[ell - 1][ids] * nxt.w / math.sqrt(nxt.m)
    return LayerFit(W, b, beta, ids)


# --------------------------------------------------------------------------
# full pipeline


@dataclass
class LayerReport:
    layer: int
    lam: float
    m: int
    dof: float
    err_emp: float
    err_nodesup: float
    err_bound: float
    weight_mass: float
    sample_ok: bool
    W_fro_sq: float
    b_norm: float
    audit_ok: bool


@dataclass
class CompressionReport:
    delta: float
    c_hat_delta: float
    R: float
    R_b: float
    widths: list[int]
    layers: list[LayerReport]
    first_layer_audit: dict
    end_to_end_sq: float
    end_to_end: float
    predicted_bound: float
    telescoped_bound: float
    audit_ok: bool
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps({"format": "deepdof.compression_report/1", **self.to_dict()}, indent=1, sort_keys=True)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "lambda", "m", "err_emp", "err_bound"])
            for r in self.layers:
                w.writerow([r.layer, repr(r.lam), r.m, repr(r.err_emp), repr(r.err_bound)])


def _sq_errors(teacher, X, ell, lp, fit):
    """Squared residuals ``(targets - sqrt(m) Psi beta^T)^2`` at the target nodes."""
    uniq, first = np.unique(fit.target_ids, return_index=True)
    T = _targets(teacher, X, ell, uniq)
    pred = math.sqrt(lp.m) * _features(teacher, X, ell, lp) @ fit.beta[first].T
    return (T - pred) ** 2


def compress_network(
    teacher: Network,
    X_train,
    X_eval,
    *,
    lambdas: Sequence[float] | None = None,
    widths: Sequence[int] | None = None,
    seed=0,
    budget: NormBudget | None = None,
    width_delta: float | None = None,
    sampling: str = "leverage",
    plan: CompressionPlan | None = None,
    kernels: dict[int, NodeKernel] | None = None,
) -> tuple[Network, CompressionReport]:
    """Compress every layer of ``teacher`` and report empirical errors on ``X_eval``.

    ``err_emp`` is the largest per-target empirical squared error of a
    layer's regression (the quantity bounded by ``4 lam R^2``) and
    ``err_nodesup`` the mean over ``X_eval`` of the largest per-target
    squared residual; the telescoped bound
    ``sum_ell (sqrt(c_hat) R)^{L-ell} sqrt(err_nodesup_ell)`` always dominates
    the end-to-end error.
    """
    budget = budget or NormBudget()
    L = teacher.depth
    if plan is None:
        plan = plan_compression(
            teacher, X_train, lambdas=lambdas, widths=widths, seed=seed,
            delta=budget.delta, width_delta=width_delta, sampling=sampling, kernels=kernels,
        )
    fits = {ell: compress_layer(teacher, ell, plan, X_train, budget.R) for ell in range(1, L + 1)}
    student = Network(tuple(fits[k].W for k in range(1, L + 1)), tuple(fits[k].b for k in range(1, L + 1)), teacher.activation)
    c_hat, R = budget.c_hat_delta, budget.R
    cap_W, cap_b = c_hat * R**2, budget.R_bar_b
    bound_terms = delta1_terms([plan.layers[ell].lam for ell in range(2, L + 1)], R, c_hat, L)
    rows, tele = [], 0.0
    for k, ell in enumerate(range(2, L + 1)):
        lp, fit = plan.layers[ell], fits[ell]
        sq = _sq_errors(teacher, X_eval, ell, lp, fit)
        nodesup = float(np.mean(np.max(sq, axis=1)))
        tele += (math.sqrt(c_hat) * R) ** (L - ell) * math.sqrt(nodesup)
        Wf, bn = float(np.sum(fit.W**2)), float(np.linalg.norm(fit.b))
        ok = Wf <= cap_W * (1 + 1e-12) and bn <= cap_b * (1 + 1e-12)
        rows.append(LayerReport(ell, lp.lam, lp.m, lp.dof, float(np.max(np.mean(sq, axis=0))), nodesup,
                                bound_terms[k], lp.weight_mass, lp.sample_ok, Wf, bn, ok))
    W1f, b1n = float(np.sum(fits[1].W ** 2)), float(np.linalg.norm(fits[1].b))
    first = {"layer": 1, "W_fro_sq": W1f, "b_norm": b1n,
             "audit_ok": W1f <= cap_W * (1 + 1e-12) and b1n <= cap_b * (1 + 1e-12)}
    diff = forward(teacher, X_eval) - forward(student, X_eval)
    e2e_sq = float(np.mean(diff**2))
    notes = ["errors are empirical squared L2 norms on the evaluation sample"]
    if not all(r.sample_ok for r in rows):
        notes.append("node resampling budget exhausted for at least one layer")
    audit = first["audit_ok"] and all(r.audit_ok for r in rows)
    if not audit:
        notes.append("norm audit violated")
    report = CompressionReport(
        delta=budget.delta, c_hat_delta=c_hat, R=R, R_b=budget.R_b,
        widths=list(student.widths), layers=rows, first_layer_audit=first,
        end_to_end_sq=e2e_sq, end_to_end=math.sqrt(e2e_sq),
        predicted_bound=float(sum(bound_terms)), telescoped_bound=tele,
        audit_ok=audit, notes=notes,
    )
    return student, report
