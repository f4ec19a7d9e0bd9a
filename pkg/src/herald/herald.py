"""Learnable soft incidence matrix and residual dynamic Laplacian.

Pipeline for one layer, given node embeddings ``X`` and the static operator ``N``:

1. hyperedge features: mean of member-node embeddings
2. project them with ``W_e``
3. single-head self-attention over nodes with values ``X W_v``
4. node/hyperedge pseudo-distance ``d_ij = w_s^T (xbar_i - fbar_j)^2``
5. Gaussian kernel ``exp(-d_ij / 2 sigma^2)`` gives the soft incidence matrix
6. ``N_res`` is the normalized operator of the soft incidence matrix, and the
   mixed operator is ``(1 - a) N + a N_res``; the Laplacian is ``I`` minus that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .hypergraph import Hypergraph, normalized_operator
from .tensor import Tensor

INCIDENCE_FLOOR = 1e-12


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


@dataclass
class HeraldParams:
    """Learnable tensors of one adaptor instance.

    ``w_v``: ``d x h`` value/attention projection, ``w_e``: ``d x h``
    hyperedge projection, ``w_s``: ``h x 1`` distance weights.  ``sigma`` is
    the Gaussian bandwidth (not the layer activation).
    """

    w_v: Tensor
    w_e: Tensor
    w_s: Tensor
    sigma: float = 1.0
    scaled_attention: bool = False

    def __post_init__(self):
        d, h = self.w_v.shape
        if self.w_e.shape != (d, h) or self.w_s.shape != (h, 1):
            raise ValueError(
                f"inconsistent HERALD shapes: w_v {self.w_v.shape}, w_e {self.w_e.shape}, w_s {self.w_s.shape}"
            )
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @classmethod
    def init(cls, in_dim: int, hidden: int, rng: np.random.Generator, sigma: float = 1.0,
             scaled_attention: bool = False) -> "HeraldParams":
        return cls(
            w_v=glorot(rng, in_dim, hidden),
            w_e=glorot(rng, in_dim, hidden),
            w_s=glorot(rng, hidden, 1),
            sigma=sigma,
            scaled_attention=scaled_attention,
        )

    @property
    def in_dim(self) -> int:
        return self.w_v.shape[0]

    @property
    def hidden(self) -> int:
        return self.w_v.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.w_v, self.w_e, self.w_s]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


@dataclass(frozen=True)
class MixSchedule:
    """How the mixing strength ``a`` depends on the layer index."""

    mode: str = "cosine_layerwise"
    value: float = 0.0

    def __post_init__(self):
        if self.mode not in ("cosine_layerwise", "constant"):
            raise ValueError(f"unknown mix schedule {self.mode!r}")
        if self.mode == "constant" and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"constant mix coefficient must lie in [0, 1], got {self.value}")

    @classmethod
    def parse(cls, text: str) -> "MixSchedule":
        """``"cosine"`` or ``"const:<a>"``."""
        if text in ("cosine", "cosine_layerwise"):
            return cls()
        if text.startswith("const:"):
            return cls("constant", float(text.split(":", 1)[1]))
        raise ValueError(f"cannot parse mix schedule {text!r}; use 'cosine' or 'const:<a>'")

    def describe(self) -> str:
        return "cosine" if self.mode == "cosine_layerwise" else f"const:{self.value!r}"


def mix_coefficient(schedule: MixSchedule, layer: int) -> float:
    """``a = 1 - 0.9 (cos(pi (l - 1) / 10) + 1) / 2`` for 1-based layer ``l``.

    The cosine ramp reaches 1 at ``l = 11`` and is held there afterwards.
    """
    if schedule.mode == "constant":
        return schedule.value
    if layer < 1:
        raise ValueError(f"layer index must be >= 1, got {layer}")
    if layer > 11:
        return 1.0
    a = 1.0 - 0.9 * (math.cos(math.pi * (layer - 1) / 10.0) + 1.0) / 2.0
    return min(max(a, 0.0), 1.0)


def hyperedge_features(X: Tensor, g: Hypergraph) -> Tensor:
    """Row ``j`` is the mean embedding of the members of hyperedge ``j``."""
    if X.shape[0] != g.num_nodes:
        raise ValueError(f"expected {g.num_nodes} feature rows, got {X.shape[0]}")
    return T.matmul(Tensor(g.edge_mean_operator), X)


def attention_weights(X: Tensor, p: HeraldParams) -> tuple[Tensor, Tensor]:
    """Return ``(alpha, V)`` with ``V = X W_v`` and ``alpha = softmax_rows(V V^T)``."""
    V = T.matmul(X, p.w_v)
    scores = T.matmul(V, T.transpose(V))
    if p.scaled_attention:
        scores = T.scale(scores, 1.0 / math.sqrt(p.hidden))
    return T.softmax_rows(scores), V


def attended_node_features(X: Tensor, p: HeraldParams) -> Tensor:
    alpha, V = attention_weights(X, p)
    return T.matmul(alpha, V)


def project_hyperedges(F: Tensor, p: HeraldParams) -> Tensor:
    return T.matmul(F, p.w_e)


def pseudo_distance(Xbar: Tensor, Fbar: Tensor, p: HeraldParams) -> Tensor:
    """``d_ij = w_s^T (xbar_i - fbar_j)^2``; negative when ``w_s`` has negative entries."""
    n, m = Xbar.shape[0], Fbar.shape[0]
    if Xbar.shape[1] != Fbar.shape[1] or Xbar.shape[1] != p.hidden:
        raise ValueError(f"feature widths disagree: {Xbar.shape}, {Fbar.shape}, hidden {p.hidden}")
    # sum_k w_k (x_ik - f_jk)^2 = sum_k w_k x_ik^2 + sum_k w_k f_jk^2 - 2 sum_k w_k x_ik f_jk
    x_sq = T.matmul(T.square(Xbar), p.w_s)
    f_sq = T.matmul(T.square(Fbar), p.w_s)
    cross = T.matmul(T.scale_cols(Xbar, T.transpose(p.w_s)), T.transpose(Fbar))
    dist = T.add(T.matmul(x_sq, T.ones(1, m)), T.matmul(T.ones(n, 1), T.transpose(f_sq)))
    return T.sub(dist, T.scale(cross, 2.0))


def soft_incidence(Xbar: Tensor, Fbar: Tensor, p: HeraldParams, rescale: bool = False) -> Tensor:
    """Gaussian kernel ``exp(-d_ij / 2 sigma^2)`` floored at 1e-12.

    Entries exceed 1 wherever ``d_ij < 0``.  With ``rescale`` the whole
    matrix is divided by its largest entry when that entry exceeds 1, which
    prevents overflow and leaves the normalized operator unchanged (it is
    invariant to a global scale of the incidence matrix).  The floor is
    applied after the rescale, so it becomes relative to the largest entry;
    a floor far below the largest entry drives soft degrees toward zero and
    overflows their negative powers in the backward pass.
    """
    logits = T.scale(pseudo_distance(Xbar, Fbar, p), -1.0 / (2.0 * p.sigma**2))
    if rescale:
        shift = float(logits.data.max())
        if shift > 0.0:
            logits = T.sub(logits, shift)
    return T.clamp_min(T.exp(logits), INCIDENCE_FLOOR)


def residual_operator(Htilde: Tensor, weights, N, a: float) -> tuple[Tensor, Tensor]:
    """Return ``(N_hat, N_res)`` where ``N_hat = (1 - a) N + a N_res``."""
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"mix coefficient must lie in [0, 1], got {a}")
    N = T.as_tensor(N)
    n_res = normalized_operator(Htilde, weights)
    n_hat = T.add(T.scale(N, 1.0 - a), T.scale(n_res, a))
    return n_hat, n_res


class HeraldOutput(NamedTuple):
    laplacian: Tensor
    n_hat: Tensor
    n_res: Tensor
    htilde: Tensor
    a: float


def herald_forward(X: Tensor, g: Hypergraph, N, p: HeraldParams, a: float) -> HeraldOutput:
    """Adapted Laplacian ``I - N_hat`` for one layer, plus its intermediates."""
    F = project_hyperedges(hyperedge_features(X, g), p)
    Xbar = attended_node_features(X, p)
    Htilde = soft_incidence(Xbar, F, p, rescale=True)
    n_hat, n_res = residual_operator(Htilde, g.edge_weights, N, a)
    lap = T.sub(T.eye(g.num_nodes), n_hat)
    return HeraldOutput(lap, n_hat, n_res, Htilde, a)


def herald_parameter_count(in_dim: int, hidden: int) -> int:
    return 2 * in_dim * hidden + hidden
