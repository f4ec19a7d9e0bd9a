"""Hypergraph structure, degree operators and the normalized HGNN operator."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class StructuralError(ValueError):
    """The hypergraph violates a structural invariant (empty edge, zero degree, ...)."""


class DegreePair(NamedTuple):
    vertex: np.ndarray
    edge: np.ndarray


@dataclass(frozen=True, eq=False)
class Hypergraph:
    """Immutable hypergraph with optional node features and labels.

    ``hyperedges`` is a tuple of sorted vertex-id tuples.  Duplicate
    hyperedges are allowed; duplicate ids inside one hyperedge are merged.
    ``labels`` holds per-node class ids, or a single graph-level id.
    """

    num_nodes: int
    hyperedges: tuple[tuple[int, ...], ...]
    edge_weights: np.ndarray | None = None
    features: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.num_nodes < 1:
            raise StructuralError("a hypergraph needs at least one vertex")
        edges = tuple(tuple(sorted(set(int(v) for v in e))) for e in self.hyperedges)
        for i, e in enumerate(edges):
            if not e:
                raise StructuralError(f"hyperedge {i} is empty")
            if e[0] < 0 or e[-1] >= self.num_nodes:
                raise StructuralError(f"hyperedge {i} references a vertex outside [0, {self.num_nodes})")
        object.__setattr__(self, "hyperedges", edges)

        weights = np.ones(len(edges)) if self.edge_weights is None else np.asarray(self.edge_weights, dtype=np.float64)
        if weights.shape != (len(edges),):
            raise StructuralError(f"expected {len(edges)} edge weights, got shape {weights.shape}")
        if not np.all(weights > 0):
            raise StructuralError("edge weights must be strictly positive")
        object.__setattr__(self, "edge_weights", weights)

        covered = np.zeros(self.num_nodes, dtype=bool)
        for e in edges:
            covered[list(e)] = True
        if not covered.all():
            isolated = np.flatnonzero(~covered).tolist()
            raise StructuralError(f"isolated vertices (in no hyperedge): {isolated}")

        if self.features is not None:
            feats = np.asarray(self.features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != self.num_nodes:
                raise StructuralError(f"features must be {self.num_nodes} x d, got shape {feats.shape}")
            object.__setattr__(self, "features", feats)
        if self.labels is not None:
            object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))

    @classmethod
    def from_edges(cls, num_nodes: int, hyperedges: Iterable[Iterable[int]], edge_weights=None,
                   features=None, labels=None) -> "Hypergraph":
        edges = tuple(tuple(e) for e in hyperedges)
        return cls(num_nodes, edges, edge_weights, features, labels)

    @property
    def num_edges(self) -> int:
        return len(self.hyperedges)

    @property
    def feature_dim(self) -> int:
        if self.features is None:
            raise StructuralError("hypergraph carries no features")
        return self.features.shape[1]

    @cached_property
    def incidence(self) -> np.ndarray:
        """Binary ``|V| x |E|`` incidence matrix."""
        H = np.zeros((self.num_nodes, self.num_edges))
        for j, e in enumerate(self.hyperedges):
            H[list(e), j] = 1.0
        H.flags.writeable = False
        return H

    @cached_property
    def edge_mean_operator(self) -> np.ndarray:
        """``D_e^{-1} H^T``: row ``j`` averages the members of hyperedge ``j``."""
        sizes = np.array([len(e) for e in self.hyperedges], dtype=np.float64)
        op = self.incidence.T / sizes[:, None]
        op.flags.writeable = False
        return op

    @cached_property
    def operator(self) -> np.ndarray:
        """Static normalized operator ``N`` of the binary incidence matrix."""
        N = normalized_operator(self.incidence, self.edge_weights).data
        N.flags.writeable = False
        return N

    def permuted(self, perm: Sequence[int]) -> "Hypergraph":
        """Relabel vertices so that old vertex ``perm[i]`` becomes vertex ``i``."""
        perm = np.asarray(perm)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(len(perm))
        edges = [[int(inverse[v]) for v in e] for e in self.hyperedges]
        feats = None if self.features is None else self.features[perm]
        labels = self.labels
        if labels is not None and labels.ndim == 1 and labels.shape[0] == self.num_nodes:
            labels = labels[perm]
        return Hypergraph.from_edges(self.num_nodes, edges, self.edge_weights, feats, labels)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def degrees(g_or_H, weights=None) -> DegreePair:
    """Weighted vertex degrees ``d(v)`` and hyperedge sizes ``delta(e)``.

    Accepts a :class:`Hypergraph` or any nonnegative incidence-like matrix.
    """
    if isinstance(g_or_H, Hypergraph):
        H, w = g_or_H.incidence, g_or_H.edge_weights
    else:
        H = _as_array(g_or_H)
        w = np.ones(H.shape[1]) if weights is None else np.asarray(weights, dtype=np.float64)
    dv = H @ w
    de = H.sum(axis=0)
    _require_positive(dv, de)
    return DegreePair(dv, de)


def _require_positive(dv: np.ndarray, de: np.ndarray) -> None:
    bad_v = np.flatnonzero(~(dv > 0))
    if bad_v.size:
        raise StructuralError(f"zero degree at vertices {bad_v.tolist()}")
    bad_e = np.flatnonzero(~(de > 0))
    if bad_e.size:
        raise StructuralError(f"zero degree at hyperedges {bad_e.tolist()}")


def normalized_operator(H_like, weights=None) -> Tensor:
    """``D_v^{-1/2} H W D_e^{-1} H^T D_v^{-1/2}`` with degrees taken from ``H_like``.

    Differentiable when ``H_like`` is a grad-carrying Tensor; gradients flow
    through both degree matrices.  Computed as ``C C^T`` with
    ``C = D_v^{-1/2} H (W D_e^{-1})^{1/2}`` so the result is PSD by construction.
    """
    H = T.as_tensor(H_like)
    if H.ndim != 2:
        raise StructuralError(f"incidence matrix must be 2-D, got shape {H.shape}")
    w = np.ones(H.shape[1]) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (H.shape[1],):
        raise StructuralError(f"expected {H.shape[1]} edge weights, got shape {w.shape}")
    if (H.data < 0).any():
        raise StructuralError("incidence matrix has negative entries")

    dv = T.row_sum(T.scale_cols(H, w))
    de = T.col_sum(H)
    _require_positive(dv.data.ravel(), de.data.ravel())
    C = T.scale_rows(H, T.power(dv, -0.5))
    C = T.scale_cols(C, T.power(T.scale_cols(T.power(de, -1.0), w), 0.5))
    return T.matmul(C, T.transpose(C))


def laplacian(N) -> Tensor:
    """``L = I - N``."""
    N = T.as_tensor(N)
    if N.ndim != 2 or N.shape[0] != N.shape[1]:
        raise StructuralError(f"operator must be square, got shape {N.shape}")
    return T.sub(T.eye(N.shape[0]), N)


def from_simple_graph(num_nodes: int, edges: Iterable[tuple[int, int]], features=None, labels=None) -> Hypergraph:
    """Centroid expansion: hyperedge ``e_v = {v} + neighbors(v)`` for every vertex, weights 1."""
    members = [{v} for v in range(num_nodes)]
    for u, v in edges:
        u, v = int(u), int(v)
        if not (0 <= u < num_nodes and 0 <= v < num_nodes):
            raise StructuralError(f"edge ({u}, {v}) outside [0, {num_nodes})")
        members[u].add(v)
        members[v].add(u)
    return Hypergraph.from_edges(num_nodes, members, None, features, labels)
