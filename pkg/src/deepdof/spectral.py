"""Per-layer kernel spectra, degrees of freedom and leverage scores.

All spectra handed to :func:`dof` are *operator* spectra: eigenvalues of
``T = Phi^T Phi / n`` (equivalently Gram eigenvalues divided by ``n``), so a
regularization level ``lam`` means the same thing for every sample size.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .net_core import Network, layer_activations

JACOBI_MAX_N = 128
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
CLAMP_RTOL = 1e-10


class NotPSDError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray
    source_rank: int
    n_clamped: int = 0

    @property
    def nonzero(self) -> np.ndarray:
        return self.eigenvalues[self.eigenvalues > 0]

    def __len__(self):
        return self.eigenvalues.size


@dataclass(frozen=True)
class DecayFit:
    a: float
    s: float
    fit_residual: float
    n_fitted: int
    finite_rank: bool = False
    clipped: bool = False


@dataclass(frozen=True)
class Leverage:
    q: np.ndarray
    scores: np.ndarray
    degenerate: bool = False

    @property
    def dof(self) -> float:
        return float(self.scores.sum())


def feature_matrix(net: Network, X, ell: int) -> np.ndarray:
    """``Phi[i, j] = eta(F_ell(x_i, v_j)) / sqrt(m)`` so that ``Phi Phi^T`` is the kernel matrix."""
    F = layer_activations(net, X, ell)
    return F / math.sqrt(F.shape[1])


def gram_matrix(Phi: np.ndarray) -> np.ndarray:
    return Phi @ Phi.T


# --------------------------------------------------------------------------
# eigensolver


def _round_robin(n_even: int):
    """Brent-Luk ordering: n-1 rounds of n/2 disjoint pairs covering all pairs."""
    players = list(range(n_even))
    rounds = []
    for _ in range(n_even - 1):
        half = n_even // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _off_norm(A):
    D = A.copy()
    np.fill_diagonal(D, 0.0)
    return float(np.linalg.norm(D))


def jacobi_eigh(M: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Cyclic Jacobi with parallel (round-robin) ordering.

    Each round rotates n/2 disjoint index pairs at once; rotations on
    disjoint pairs commute, so a round is one orthogonal similarity.
    Returns unsorted ``(eigenvalues, V)`` with ``M = V diag(w) V^T``.
    """
    A = np.array(M, dtype=np.float64, copy=True)
    n = A.shape[0]
    V = np.eye(n)
    if n < 2:
        return np.diag(A).copy(), V
    pad = n % 2
    if pad:
        A = np.pad(A, ((0, 1), (0, 1)))
        V = np.eye(n + 1)
    N = A.shape[0]
    rounds = _round_robin(N)
    scale = np.linalg.norm(A)
    if scale == 0:
        return np.zeros(n), np.eye(n)
    for _ in range(max_sweeps):
        off = _off_norm(A)
        if off <= tol * scale:
            break
        for p, q in rounds:
            apq = A[p, q]
            active = np.abs(apq) > 1e-300
            if not np.any(active):
                continue
            p, q, apq = p[active], q[active], apq[active]
            app, aqq = A[p, p], A[q, q]
            tau = (aqq - app) / (2.0 * apq)
            # for huge |tau|, t -> 1 / (2 tau) without squaring tau
            big = np.abs(tau) > 1e150
            tb = np.where(big, 1.0, tau)
            t = np.where(big, 0.5 / np.where(big, tau, 1.0), np.sign(tb) / (np.abs(tb) + np.sqrt(1.0 + tb * tb)))
            t[tau == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            Ap, Aq = A[p, :].copy(), A[q, :]
            A[p, :] = c[:, None] * Ap - s[:, None] * Aq
            A[q, :] = s[:, None] * Ap + c[:, None] * Aq
            Ap, Aq = A[:, p].copy(), A[:, q]
            A[:, p] = Ap * c - Aq * s
            A[:, q] = Ap * s + Aq * c
            Vp, Vq = V[:, p].copy(), V[:, q]
            V[:, p] = Vp * c - Vq * s
            V[:, q] = Vp * s + Vq * c
    else:
        off = _off_norm(A)
        if off > tol * scale:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps (off={off:.3g})")
    w = np.diag(A).copy()
    if pad:
        w, V = w[:n], V[:n, :n]
    return w, V


def eigh_psd(M, method: str = "auto", clamp_rtol: float = CLAMP_RTOL):
    """Eigen-decomposition of a symmetric PSD matrix, eigenvalues nonincreasing.

    Negative eigenvalues above ``-clamp_rtol * mu_1`` are clamped to zero;
    anything more negative raises :class:`NotPSDError`.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("expected a square matrix")
    nrm = np.linalg.norm(M)
    if np.linalg.norm(M - M.T) > 1e-10 * max(nrm, 1e-300):
        raise ValueError("matrix is not symmetric")
    M = 0.5 * (M + M.T)
    n = M.shape[0]
    if method == "auto":
        method = "jacobi" if n <= JACOBI_MAX_N else "lapack"
    if method == "jacobi":
        w, V = jacobi_eigh(M)
    elif method == "lapack":
        w, V = np.linalg.eigh(M)
    else:
        raise ValueError(f"unknown method {method!r}")
    order = np.argsort(-w, kind="stable")
    w, V = w[order], V[:, order]
    top = w[0] if n else 0.0
    floor = -clamp_rtol * max(top, 0.0)
    if n and w[-1] < floor and w[-1] < -1e-300:
        raise NotPSDError(f"eigenvalue {w[-1]:.3g} below clamp tolerance {floor:.3g}")
    neg = w < 0
    w[neg] = 0.0
    rank = int(np.sum(w > clamp_rtol * max(top, 0.0))) if top > 0 else 0
    return Spectrum(w, rank, int(neg.sum())), V


def operator_spectrum(Phi: np.ndarray, method: str = "auto") -> Spectrum:
    """Eigenvalues of ``Phi^T Phi / n``, computed on the smaller side."""
    n, m = Phi.shape
    if m <= n:
        spec, _ = eigh_psd(Phi.T @ Phi / n, method)
        return spec
    spec, _ = eigh_psd(Phi @ Phi.T / n, method)
    return spec


def layer_spectrum(net: Network, X, ell: int, method: str = "auto") -> Spectrum:
    return operator_spectrum(feature_matrix(net, X, ell), method)


# --------------------------------------------------------------------------
# degree of freedom


def _eigs(spec) -> np.ndarray:
    return spec.eigenvalues if isinstance(spec, Spectrum) else np.asarray(spec, dtype=np.float64)


def dof(spec, lam: float) -> float:
    """``N(lam) = sum_j mu_j / (mu_j + lam)`` for an operator spectrum."""
    if not lam > 0:
        raise ValueError("lam must be positive")
    mu = _eigs(spec)
    return float(np.sum(mu / (mu + lam)))


def dof_curve(spec, lambdas: Iterable[float]) -> list[tuple[float, float]]:
    return [(float(lam), dof(spec, lam)) for lam in lambdas]


def lambda_grid(spec, n_points: int = 25) -> np.ndarray:
    """Log grid spanning ``[mu_min / 10, 10 mu_1]`` over the nonzero eigenvalues."""
    mu = _eigs(spec)
    nz = mu[mu > 0]
    if nz.size == 0:
        return np.logspace(-12, 0, n_points)
    return np.logspace(math.log10(nz.min() / 10), math.log10(nz.max() * 10), n_points)


def dof_envelope_bound(a: float, s: float, lam: float) -> float:
    """Bound on ``N(lam)`` for spectra with ``mu_j <= a j^{-1/s}``.

    ``N <= M + (a/lam) (1/s - 1)^{-1} M^{1 - 1/s}`` with the balancing
    choice ``M = ceil(((a/lam)/(1/s - 1))^s)``.
    """
    if not 0 < s < 1:
        raise ValueError("s must lie in (0, 1)")
    k = (a / lam) / (1.0 / s - 1.0)
    M = max(1, math.ceil(k**s))
    return M + k * M ** (1.0 - 1.0 / s)


@dataclass(frozen=True)
class NodeKernel:
    """Eigendecomposition of ``T = Phi^T Phi / n`` over the nodes of one layer."""

    spectrum: Spectrum
    V: np.ndarray

    @classmethod
    def from_features(cls, Phi: np.ndarray, method: str = "auto") -> "NodeKernel":
        n = Phi.shape[0]
        spec, V = eigh_psd(Phi.T @ Phi / n, method)
        return cls(spec, V)

    def leverage(self, lam: float) -> Leverage:
        if not lam > 0:
            raise ValueError("lam must be positive")
        m = self.V.shape[0]
        mu = self.spectrum.eigenvalues
        if not np.any(mu > 0):
            return Leverage(np.full(m, 1.0 / m), np.zeros(m), degenerate=True)
        scores = (self.V**2) @ (mu / (mu + lam))
        return Leverage(scores / scores.sum(), scores)


def leverage_scores(Phi: np.ndarray, lam: float, method: str = "auto") -> Leverage:
    """Ridge leverage of each node: ``diag(T (T + lam)^{-1})``, ``T = Phi^T Phi / n``.

    The normalized scores are an empirical surrogate of the optimal
    sampling density over nodes.
    """
    if not lam > 0:
        raise ValueError("lam must be positive")
    if not np.any(Phi):
        m = Phi.shape[1]
        return Leverage(np.full(m, 1.0 / m), np.zeros(m), degenerate=True)
    return NodeKernel.from_features(Phi, method).leverage(lam)


# --------------------------------------------------------------------------
# decay fit


def fit_decay(spec, rel_floor: float = 1e-10, s_min: float = 0.01, s_max: float = 0.99) -> DecayFit:
    """Envelope fit ``mu_j <= a j^{-1/s}``.

    The exponent comes from a log-log least-squares slope over the nonzero
    eigenvalues; ``a`` is then the smallest amplitude that makes the
    power law an upper envelope of every fitted eigenvalue. A zero tail
    behind a head that does not decay is reported as finite rank, with
    ``s`` at its lower clip.
    """
    mu = np.sort(_eigs(spec))[::-1]
    if mu.size == 0 or mu[0] <= 0:
        raise ValueError("spectrum has no positive eigenvalue")
    keep = mu > rel_floor * mu[0]
    k = int(keep.sum())
    if k < 8:
        raise ValueError(f"need at least 8 nonzero eigenvalues, got {k}")
    j = np.arange(1, mu.size + 1)[keep]
    lj, lmu = np.log(j), np.log(mu[keep])
    slope, icpt = np.polyfit(lj, lmu, 1)
    resid = float(np.sqrt(np.mean((lmu - (icpt + slope * lj)) ** 2)))
    s = -1.0 / slope if slope < 0 else math.inf
    # a zero tail after a non-decaying head is the finite-dimensional case
    finite_rank = k < mu.size and s > s_max
    if finite_rank:
        s = s_min
    clipped = finite_rank or not s_min <= s <= s_max
    s = float(min(max(s, s_min), s_max))
    log_a = float(np.max(lmu + lj / s))
    a = math.exp(log_a) if log_a < 700 else math.inf
    return DecayFit(float(a), s, resid, k, bool(finite_rank), bool(clipped))


# --------------------------------------------------------------------------
# export


def _fmt(x: float) -> str:
    return repr(float(x))


def write_spectrum_csv(path, spectra: Mapping[int, Spectrum]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "j", "mu_j"])
        for layer in sorted(spectra):
            for j, mu in enumerate(_eigs(spectra[layer]), start=1):
                w.writerow([layer, j, _fmt(mu)])


def write_dof_csv(path, curves: Mapping[int, list[tuple[float, float]]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "lambda", "dof"])
        for layer in sorted(curves):
            for lam, n in curves[layer]:
                w.writerow([layer, _fmt(lam), _fmt(n)])
