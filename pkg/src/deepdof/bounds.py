"""Closed-form generalization-bound quantities and width planning.

Natural logarithms throughout; ``log_plus(x) = max(1, log x)``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .net_core import NormBudget
from .spectral import dof

SIGMA_FLOOR = 1e-8


def log_plus(x: float) -> float:
    return max(1.0, math.log(x))


def _sigma(sigma: float) -> float:
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        warnings.warn(f"sigma = 0 replaced by the floor {SIGMA_FLOOR:g}", RuntimeWarning, stacklevel=3)
        return SIGMA_FLOOR
    return sigma


def r_hat_inf(L: int, R_bar: float, R_bar_b: float, D_x: float) -> float:
    return R_bar**L * D_x + sum(R_bar ** (L - ell) * R_bar_b for ell in range(1, L + 1))


def g_hat(L: int, R_bar: float, D_x: float) -> float:
    return L * R_bar ** (L - 1) * D_x + sum(R_bar ** (L - ell) for ell in range(1, L + 1))


def required_width(N: float, delta: float) -> int:
    """Smallest integer ``m >= 5 N log(32 N / delta)``; clamped to 1 with a warning."""
    if not N > 0:
        raise ValueError("N must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    m = math.ceil(5.0 * N * math.log(32.0 * N / delta))
    if m < 1:
        warnings.warn(f"required width {m} for N={N:.3g} clamped to 1", RuntimeWarning, stacklevel=2)
        return 1
    return m


def width_condition(N: float, delta: float) -> float:
    """Right-hand side ``5 N log(32 N / delta)`` of the width requirement."""
    return 5.0 * N * math.log(32.0 * N / delta) if N > 0 else 0.0


def delta1(lambdas: Sequence[float], R: float, c_hat_delta: float, L: int) -> float:
    """Finite-approximation error; ``lambdas`` holds ``lambda_2..lambda_L``."""
    return sum(delta1_terms(lambdas, R, c_hat_delta, L))


def delta1_terms(lambdas: Sequence[float], R: float, c_hat_delta: float, L: int) -> list[float]:
    lambdas = list(lambdas)
    if len(lambdas) != L - 1:
        raise ValueError(f"need {L - 1} lambdas for depth {L}")
    if any(lam < 0 for lam in lambdas):
        raise ValueError("lambdas must be nonnegative")
    return [
        2.0 * math.sqrt(c_hat_delta ** (L - ell)) * R ** (L - ell + 1) * math.sqrt(lam)
        for ell, lam in zip(range(2, L + 1), lambdas)
    ]


def delta2(n: int, sigma: float, widths: Sequence[int], Ghat: float, R_bar: float, R_bar_b: float) -> float:
    """Estimation-error radius for a network with width chain ``widths = (m_1..m_{L+1})``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if sigma <= 0:
        raise ValueError("sigma must be positive; apply a floor before calling")
    P = sum(a * b for a, b in zip(widths[:-1], widths[1:]))
    arg = 1.0 + 4.0 * math.sqrt(2.0) * Ghat * max(R_bar, R_bar_b) * math.sqrt(n) / (sigma * math.sqrt(P))
    return math.sqrt(2.0 / n * P * log_plus(arg))


# --------------------------------------------------------------------------
# lambda / width balancing


@dataclass
class Balance:
    lam: float
    m: int
    dof: float
    iterations: int
    converged: bool
    method: str


def _rule(rule: str, n: int, d_x: int):
    if rule == "deep":
        return lambda m: m * m / n
    if rule == "two_layer":
        return lambda m: (d_x + 1) * m / n
    raise ValueError(f"unknown rule {rule!r}")


def balance_lambda(
    spec,
    n: int,
    delta: float = 0.1,
    *,
    rule: str = "deep",
    d_x: int = 1,
    damping: float = 0.5,
    rtol: float = 0.01,
    max_iter: int = 100,
    lam_floor: float = 1e-12,
) -> Balance:
    """Fixed point of ``lam -> N(lam) -> m = required_width(N) -> lam = rule(m)``.

    ``rule="deep"`` is ``lam = m^2 / n``; ``rule="two_layer"`` is
    ``lam = (d_x + 1) m / n``. Damped iteration first; the result is then
    snapped to the smallest integer width consistent with both relations,
    so the returned pair satisfies ``lam = rule(m)``
    and ``m >= 5 N(lam) log(32 N(lam) / delta)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lam_of = _rule(rule, n, d_x)
    mu = spec.eigenvalues if hasattr(spec, "eigenvalues") else np.asarray(spec, dtype=float)
    if not np.any(mu > 0):
        warnings.warn("zero spectrum: width fixed to 1", RuntimeWarning, stacklevel=2)
        return Balance(max(lam_of(1), lam_floor), 1, 0.0, 0, False, "degenerate")

    def width(lam):
        N = dof(mu, lam)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return (required_width(N, delta) if N > 0 else 1), N

    def image(lam):
        return max(lam_of(width(lam)[0]), lam_floor)

    lam = max(lam_of(1), lam_floor)
    damped_ok, it = False, 0
    for it in range(1, max_iter + 1):
        new = (1 - damping) * lam + damping * image(lam)
        if abs(new - lam) <= rtol * lam:
            lam, damped_ok = new, True
            break
        lam = new
    # integer widths make the map a step function; snap to the smallest m with
    # m >= required_width(N(rule(m))), found by bisection (m - h(m) is increasing)
    def feasible(m):
        return m >= width(max(lam_of(m), lam_floor))[0]

    lo, hi = 0, max(width(max(lam_of(1), lam_floor))[0], 1)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    m = hi
    m_damped = width(lam)[0]
    method = "damped" if damped_ok and m_damped == m else "bisection"
    lam_m = max(lam_of(m), lam_floor)
    N = width(lam_m)[1]
    converged = feasible(m)
    if not converged:
        warnings.warn("lambda balancing did not converge", RuntimeWarning, stacklevel=2)
    return Balance(lam_m, m, N, it, converged, method)


# --------------------------------------------------------------------------
# polynomial decay closed forms


@dataclass(frozen=True)
class PolyRate:
    lam: float
    term: float
    exponent: float


def poly_rate(n: int, a: float, s: float, role: str = "deep_layer", d_x: int = 1) -> PolyRate:
    """Optimal ``lambda`` and its error term under ``mu_j <= a j^{-1/s}``."""
    if not 0 < s < 1:
        raise ValueError("s must lie in (0, 1)")
    if not a > 0:
        raise ValueError("a must be positive")
    if role == "deep_layer":
        lam = a ** (2 * s / (1 + 2 * s)) * n ** (-1.0 / (1 + 2 * s))
        return PolyRate(lam, lam * math.log(n), -1.0 / (1 + 2 * s))
    if role == "two_layer":
        lam = a ** (s / (1 + s)) * (n / (d_x + 1)) ** (-1.0 / (1 + s)) * math.log(n)
        term = a ** (s / (1 + s)) * (d_x + 1) ** (1.0 / (1 + s)) * n ** (-1.0 / (1 + s)) * math.log(n)
        return PolyRate(lam, term, -1.0 / (1 + s))
    raise ValueError(f"unknown role {role!r}")


# --------------------------------------------------------------------------
# summary rows


def total_bound(
    row: str,
    *,
    n: int,
    sigma: float,
    R_inf: float,
    widths: Sequence[int],
    L: int | None = None,
    R: float = 1.0,
    lambdas: Sequence[float] | None = None,
    s: Sequence[float] | None = None,
    d_x: int | None = None,
) -> float:
    """One row of the summary table of error bounds (up to constants).

    ``general``: ``L sum_l R^{L-l+1} lam_l + (sigma^2 + R_inf^2)/n sum m_l m_{l+1} log n``;
    ``finite_dim``: the second term only, with the true widths;
    ``poly``: ``L sum_l (R v 1)^{L-l+1} n^{-1/(1+2 s_l)} log n + d_x^2 log(n) / n``.
    """
    L = len(widths) - 1 if L is None else L
    variance = (sigma**2 + R_inf**2) / n * sum(a * b for a, b in zip(widths[:-1], widths[1:])) * math.log(n)
    if row == "finite_dim":
        return variance
    if row == "general":
        if lambdas is None or len(lambdas) != L - 1:
            raise ValueError(f"general row needs {L - 1} lambdas")
        bias = L * sum(R ** (L - ell + 1) * lam for ell, lam in zip(range(2, L + 1), lambdas))
        return bias + variance
    if row == "poly":
        if s is None or len(s) != L - 1:
            raise ValueError(f"poly row needs {L - 1} decay exponents")
        d_x = widths[0] if d_x is None else d_x
        bias = L * sum(
            max(R, 1.0) ** (L - ell + 1) * n ** (-1.0 / (1 + 2 * s_l)) * math.log(n)
            for ell, s_l in zip(range(2, L + 1), s)
        )
        return bias + d_x**2 / n * math.log(n)
    raise ValueError(f"unknown row {row!r}")


# --------------------------------------------------------------------------
# report


@dataclass
class BoundReport:
    n: int
    sigma: float
    L: int
    budget: dict
    widths: list[int]
    lambdas: list[float]
    R_inf: float
    G_hat: float
    delta1: float
    delta2: float
    eps_n: float
    eps_tilde_n: float
    total_erm_bound: float
    total_bayes_bound: float
    table_general: float
    table_general_sqrt_lambda: float
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def bound_report(n: int, sigma: float, widths: Sequence[int], lambdas: Sequence[float], budget: NormBudget) -> BoundReport:
    """Evaluate every bound quantity for one configuration.

    ``total_erm_bound`` is ``delta1^2 + (sigma^2 + R_inf^2) delta2^2`` and
    ``total_bayes_bound`` is ``max(1, R_inf^2/sigma^2)(delta1^2 + sigma^2 delta2^2)``,
    both up to unspecified universal constants.
    """
    widths = [int(w) for w in widths]
    L = len(widths) - 1
    notes = ["bounds hold up to unspecified universal constants"]
    sig = _sigma(sigma)
    if sig != sigma:
        notes.append(f"sigma floored to {sig:g}")
    Rinf = r_hat_inf(L, budget.R_bar, budget.R_bar_b, budget.D_x)
    G = g_hat(L, budget.R_bar, budget.D_x)
    d1 = delta1(lambdas, budget.R, budget.c_hat_delta, L)
    d2 = delta2(n, sig, widths, G, budget.R_bar, budget.R_bar_b)
    general = total_bound("general", n=n, sigma=sigma, R_inf=Rinf, widths=widths, R=budget.R, lambdas=lambdas)
    general_sqrt = total_bound(
        "general", n=n, sigma=sigma, R_inf=Rinf, widths=widths, R=budget.R, lambdas=[math.sqrt(x) for x in lambdas]
    )
    notes.append("table_general uses lambda_l as printed; table_general_sqrt_lambda uses sqrt(lambda_l)")
    return BoundReport(
        n=n,
        sigma=sigma,
        L=L,
        budget={"R": budget.R, "R_b": budget.R_b, "D_x": budget.D_x, "delta": budget.delta},
        widths=widths,
        lambdas=[float(x) for x in lambdas],
        R_inf=Rinf,
        G_hat=G,
        delta1=d1,
        delta2=d2,
        eps_n=d1 + sig * d2,
        eps_tilde_n=d1 + d2,
        total_erm_bound=d1**2 + (sig**2 + Rinf**2) * d2**2,
        total_bayes_bound=max(1.0, Rinf**2 / sig**2) * (d1**2 + sig**2 * d2**2),
        table_general=general,
        table_general_sqrt_lambda=general_sqrt,
        notes=notes,
    )
