"""Finite feedforward networks, norm accounting and synthetic teachers.

A network is the composition ``A_L o eta o ... o eta o A_1`` of affine maps
with a single global activation. Wide "reference" networks with a uniform
node measure play the role of the integral-form teacher.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity")
MODEL_FORMAT = "deepdof.network/1"


def relu(u: np.ndarray) -> np.ndarray:
    return np.maximum(u, 0.0)


def activate(u: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return relu(u)
    if activation == "identity":
        return u
    raise ValueError(f"unknown activation {activation!r}")


@dataclass(frozen=True)
class Network:
    """Immutable finite network.

    ``weights[k]`` has shape ``(m_{k+2}, m_{k+1})`` in the 1-based layer
    numbering used throughout (``m_1 = d_x``, ``m_{L+1} = 1``).
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise ValueError("need the same positive number of weights and biases")
        ws, bs = [], []
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            W = np.array(W, dtype=np.float64, copy=True)
            b = np.array(b, dtype=np.float64, copy=True).reshape(-1)
            if W.ndim != 2:
                raise ValueError(f"layer {k + 1}: weight must be a matrix")
            if b.shape[0] != W.shape[0]:
                raise ValueError(f"layer {k + 1}: bias length {b.shape[0]} != rows {W.shape[0]}")
            if k > 0 and W.shape[1] != ws[-1].shape[0]:
                raise ValueError(
                    f"layer {k + 1}: expects {W.shape[1]} inputs, previous layer gives {ws[-1].shape[0]}"
                )
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k + 1}: non-finite parameters")
            W.setflags(write=False)
            b.setflags(write=False)
            ws.append(W)
            bs.append(b)
        if ws[-1].shape[0] != 1:
            raise ValueError("last layer must have a single output")
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def widths(self) -> tuple[int, ...]:
        """``(m_1, ..., m_{L+1})`` with ``m_1 = d_x`` and ``m_{L+1} = 1``."""
        return (self.input_dim,) + tuple(W.shape[0] for W in self.weights)

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def replace_layer(self, ell: int, W: np.ndarray, b: np.ndarray) -> "Network":
        ws, bs = list(self.weights), list(self.biases)
        ws[ell - 1], bs[ell - 1] = W, b
        return Network(tuple(ws), tuple(bs), self.activation)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)])

    def with_flat(self, theta: np.ndarray) -> "Network":
        return Network(*unflatten(theta, self.widths), self.activation)


def unflatten(theta: np.ndarray, widths: Sequence[int]) -> tuple[tuple[np.ndarray, ...], tuple[np.ndarray, ...]]:
    ws, bs, pos = [], [], 0
    for m_in, m_out in zip(widths[:-1], widths[1:]):
        ws.append(theta[pos : pos + m_in * m_out].reshape(m_out, m_in))
        pos += m_in * m_out
        bs.append(theta[pos : pos + m_out])
        pos += m_out
    if pos != theta.size:
        raise ValueError(f"parameter vector has {theta.size} entries, widths need {pos}")
    return tuple(ws), tuple(bs)


@dataclass(frozen=True)
class NormBudget:
    """Norm constants of the teacher class and the derived class-F radii."""

    R: float = 1.0
    R_b: float = 1.0
    D_x: float = 1.0
    delta: float = 0.1

    def __post_init__(self):
        if not (self.R > 0 and self.R_b > 0 and self.D_x > 0):
            raise ValueError("R, R_b and D_x must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")

    @property
    def c_hat_delta(self) -> float:
        return 4.0 / (1.0 - self.delta)

    @property
    def R_bar(self) -> float:
        return math.sqrt(self.c_hat_delta) * self.R

    @property
    def R_bar_b(self) -> float:
        return self.R_b / (1.0 - self.delta)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    noise_sigma: float = 0.0
    f_true: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X and y disagree on the number of samples")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def check_support(self, budget: NormBudget) -> None:
        if self.n and np.max(np.abs(self.X)) > budget.D_x:
            raise ValueError("inputs exceed the sup-norm bound D_x")


def _check_input(net: Network, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise ValueError(f"expected inputs with {net.input_dim} columns, got shape {X.shape}")
    return X


def pre_activations(net: Network, X, ell: int) -> np.ndarray:
    """Output of the ``ell``-th affine map, ``F_ell(x, .)`` (n x m_{ell+1})."""
    if not 1 <= ell <= net.depth:
        raise ValueError(f"layer index {ell} outside 1..{net.depth}")
    H = _check_input(net, X)
    for k in range(ell):
        if k > 0:
            H = activate(H, net.activation)
        H = H @ net.weights[k].T + net.biases[k]
    return H


def forward(net: Network, X) -> np.ndarray:
    return pre_activations(net, X, net.depth)[:, 0]


def layer_activations(net: Network, X, ell: int) -> np.ndarray:
    """Post-activation features ``eta(F_ell(x_i, v_j))`` of hidden layer ``ell``."""
    if not 1 <= ell <= net.depth - 1:
        raise ValueError(f"hidden layer index {ell} outside 1..{net.depth - 1}")
    return activate(pre_activations(net, X, ell), net.activation)


def forward_from(net: Network, H: np.ndarray, ell: int) -> np.ndarray:
    """Finish the forward pass given the post-activations of hidden layer ``ell``."""
    for k in range(ell, net.depth):
        if k > ell:
            H = activate(H, net.activation)
        H = H @ net.weights[k].T + net.biases[k]
    return H[:, 0]


def param_norms(net: Network) -> list[tuple[float, float]]:
    return [(float(np.linalg.norm(W)), float(np.linalg.norm(b))) for W, b in zip(net.weights, net.biases)]


def node_norms(net: Network) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-output-node norms under the uniform node measure.

    Row ``tau`` of layer ``ell`` corresponds to the weight function
    ``h(tau, j) = m_ell * W[tau, j]``, so its L2(Q_ell) norm equals
    ``sqrt(m_ell) * ||W[tau, :]||``. Biases are reported as ``|b_tau|``.
    """
    out = []
    for W, b in zip(net.weights, net.biases):
        out.append((math.sqrt(W.shape[1]) * np.linalg.norm(W, axis=1), np.abs(b)))
    return out


def satisfies_node_bounds(net: Network, R: float, R_b: float, rtol: float = 1e-12) -> bool:
    return all(
        np.all(h <= R * (1 + rtol)) and np.all(c <= R_b * (1 + rtol)) for h, c in node_norms(net)
    )


def in_class(net: Network, budget: NormBudget, rtol: float = 1e-12) -> bool:
    return all(
        w <= budget.R_bar * (1 + rtol) and b <= budget.R_bar_b * (1 + rtol) for w, b in param_norms(net)
    )


def sup_norm_bound(net: Network, budget: NormBudget) -> float:
    """Uniform bound on ``|f(x)|`` over class F for the depth of ``net``."""
    L = net.depth
    Rb, Rbb = budget.R_bar, budget.R_bar_b
    return Rb**L * budget.D_x + sum(Rb ** (L - ell) * Rbb for ell in range(1, L + 1))


def rescale(net: Network, ell: int, c: float) -> Network:
    """Move a positive factor ``c`` from layer ``ell + 1`` into layer ``ell``.

    For a positively homogeneous activation the function is unchanged.
    """
    if c <= 0:
        raise ValueError("c must be positive")
    if not 1 <= ell < net.depth:
        raise ValueError("ell must index a hidden layer")
    ws, bs = list(net.weights), list(net.biases)
    ws[ell - 1] = ws[ell - 1] * c
    bs[ell - 1] = bs[ell - 1] * c
    ws[ell] = ws[ell] / c
    return Network(tuple(ws), tuple(bs), net.activation)


# --------------------------------------------------------------------------
# model file


def save_network(net: Network, path) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "input_dim": net.input_dim,
        "activation": net.activation,
        "layers": [
            {"shape": list(W.shape), "weight": W.ravel().tolist(), "bias": b.tolist()}
            for W, b in zip(net.weights, net.biases)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def network_from_dict(doc: dict) -> Network:
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a {MODEL_FORMAT} document")
    ws, bs = [], []
    for layer in doc["layers"]:
        rows, cols = layer["shape"]
        ws.append(np.array(layer["weight"], dtype=np.float64).reshape(rows, cols))
        bs.append(np.array(layer["bias"], dtype=np.float64))
    net = Network(tuple(ws), tuple(bs), doc["activation"])
    if net.input_dim != doc["input_dim"]:
        raise ValueError("input_dim does not match the first weight matrix")
    return net


def load_network(path) -> Network:
    return network_from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# teachers


def _normalize_to_node_bounds(ws, bs, R, R_b):
    """Scale rows so every node norm is <= R and every |bias| <= R_b."""
    out_w, out_b = [], []
    for W, b in zip(ws, bs):
        nrm = math.sqrt(W.shape[1]) * np.linalg.norm(W, axis=1)
        scale = np.where(nrm > R, R / np.maximum(nrm, 1e-300), 1.0)
        out_w.append(W * scale[:, None])
        out_b.append(np.clip(b, -R_b, R_b))
    return out_w, out_b


def _random_rows(rng, m_out, m_in, R):
    """Rows with L2(Q) norm exactly R under the uniform node measure."""
    W = rng.standard_normal((m_out, m_in))
    W *= R / (math.sqrt(m_in) * np.linalg.norm(W, axis=1, keepdims=True))
    return W


def make_teacher(
    kind: str,
    dims: Sequence[int],
    seed: int = 0,
    *,
    a: float = 1.0,
    s: float = 0.5,
    R: float = 1.0,
    R_b: float = 1.0,
    D_x: float = 1.0,
    activation: str = "relu",
    bias_scale: float = 0.3,
    n_calibration: int = 4096,
) -> Network:
    """Synthetic teacher networks.

    ``dims`` is the full width chain ``(d_x, m_2, ..., m_L, 1)``.

    * ``finite_dim``: a small network lying inside the norm-constrained class:
      node norms <= (R, R_b) and also ``||W||_F <= R``, ``||b|| <= R_b``.
    * ``kernel_two_layer``: wide random-feature network (any depth), every
      node norm equal to R and biases uniform on ``bias_scale * [-R_b, R_b]``
      so that most ReLU kinks fall inside the input cube.
    * ``poly_decay``: like ``kernel_two_layer`` but first-layer feature
      amplitudes are graded as ``j**-gamma`` with ``gamma`` bisected so the
      second-layer kernel spectrum decays like ``j**(-1/s)``; the layer is
      then shrunk if needed so that ``mu_j <= a * j**(-1/s)``.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or dims[-1] != 1 or min(dims) < 1:
        raise ValueError("dims must be (d_x, ..., 1) with positive entries")
    rng = np.random.default_rng(seed)
    if kind == "finite_dim":
        ws = [rng.standard_normal((o, i)) for i, o in zip(dims[:-1], dims[1:])]
        bs = [rng.uniform(-1, 1, o) for o in dims[1:]]
        ws, bs = _normalize_to_node_bounds(ws, bs, R, R_b)
        ws = [W * min(1.0, R / np.linalg.norm(W)) for W in ws]
        bs = [b * min(1.0, R_b / max(np.linalg.norm(b), 1e-300)) for b in bs]
        return Network(tuple(ws), tuple(bs), activation)
    if kind not in ("kernel_two_layer", "poly_decay"):
        raise ValueError(f"unknown teacher kind {kind!r}")
    if kind == "poly_decay" and not (0 < s < 1 and a > 0):
        raise ValueError("poly_decay needs 0 < s < 1 and a > 0")
    ws = [_random_rows(rng, o, i, R) for i, o in zip(dims[:-1], dims[1:])]
    bs = [rng.uniform(-bias_scale * R_b, bias_scale * R_b, o) for o in dims[1:]]
    net = Network(tuple(ws), tuple(bs), activation)
    if kind == "kernel_two_layer" or len(dims) < 3:
        return net
    return _grade_first_layer(net, a, s, D_x, rng, n_calibration)


def _grade_first_layer(net, a, s, D_x, rng, n_cal):
    from .spectral import feature_matrix, operator_spectrum, fit_decay

    X = rng.uniform(-D_x, D_x, (n_cal, net.input_dim))
    F = layer_activations(net, X, 1)
    m = F.shape[1]
    order = rng.permutation(m)
    ranks = np.empty(m)
    ranks[order] = np.arange(1, m + 1)
    target = 1.0 / s

    def exponent(gamma):
        amp = ranks**-gamma
        mu = operator_spectrum((F * amp) / math.sqrt(m), "lapack")
        return 1.0 / fit_decay(mu).s, amp

    p0, _ = exponent(0.0)
    if p0 > target + 0.05:
        raise ValueError(
            f"natural eigendecay exponent {p0:.2f} already exceeds 1/s = {target:.2f}; "
            "use a larger input dimension"
        )
    lo, hi = 0.0, 4.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        p, _ = exponent(mid)
        if p < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-4:
            break
    _, amp = exponent(0.5 * (lo + hi))
    # positive homogeneity: scaling row j scales feature j by amp_j
    net = net.replace_layer(1, net.weights[0] * amp[:, None], net.biases[0] * amp)
    mu = operator_spectrum(feature_matrix(net, X, 1)).eigenvalues
    j = np.arange(1, mu.size + 1)
    excess = np.max(mu / (a * j**-target))
    if excess > 1:
        c = 1.0 / math.sqrt(excess)
        net = net.replace_layer(1, net.weights[0] * c, net.biases[0] * c)
    return net
