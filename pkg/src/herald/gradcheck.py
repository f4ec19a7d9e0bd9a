"""Central finite-difference checks of every differentiable building block."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .herald import (
    HeraldParams,
    attended_node_features,
    herald_forward,
    hyperedge_features,
    residual_operator,
    soft_incidence,
)
from .hypergraph import Hypergraph, normalized_operator
from .model import HGNN, ModelConfig, hgnn_layer
from .tensor import Tensor
from .training import cross_entropy, regularization, topology_regularizer

STEP = 1e-5
THRESHOLD = 1e-4
# Below this magnitude a gradient entry is compared absolutely, not relatively.
DENOM_FLOOR = 1e-6


def numerical_gradient(f: Callable[[], float], param: Tensor, step: float = STEP) -> np.ndarray:
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = f()
        flat[i] = orig - step
        minus = f()
        flat[i] = orig
        out[i] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOM_FLOOR)
    return float((np.abs(analytic - numeric) / denom).max())


def check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], step: float = STEP) -> dict[str, float]:
    """Max relative error between backprop and central differences, per named parameter."""
    for p in params.values():
        p.grad = np.zeros_like(p.data)
    T.backward(loss_fn())
    errors = {}
    for name, p in params.items():
        analytic = p.grad.copy()
        numeric = numerical_gradient(lambda: loss_fn().item(), p, step)
        errors[name] = relative_error(analytic, numeric)
    return errors


def random_hypergraph(rng: np.random.Generator, num_nodes: int = 12, num_edges: int = 6, dim: int = 4,
                      extra: float = 0.3) -> Hypergraph:
    """Every vertex joins one random hyperedge (the first ``num_edges`` vertices seed each edge,
    any edge still empty gets a random vertex), then each further membership is added with
    probability ``extra``."""
    members = [set() for _ in range(num_edges)]
    for v in range(num_nodes):
        members[v if v < num_edges else int(rng.integers(num_edges))].add(v)
    for e in members:
        if not e:
            e.add(int(rng.integers(num_nodes)))
    for v in range(num_nodes):
        for e in range(num_edges):
            if rng.random() < extra:
                members[e].add(v)
    feats = rng.normal(size=(num_nodes, dim))
    labels = rng.integers(0, 3, size=num_nodes)
    return Hypergraph.from_edges(num_nodes, members, None, feats, labels)


def _leaf(rng, *shape, low=None, high=None):
    data = rng.normal(size=shape) if low is None else rng.uniform(low, high, size=shape)
    return Tensor(data, requires_grad=True)


def _weights(rng, shape):
    return Tensor(rng.normal(size=shape))


def suite_matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    w = _weights(rng, (3, 2))
    return check(lambda: T.sum(T.mul(T.matmul(a, b), w)), {"a": a, "b": b})


def suite_softmax_rows(rng):
    a = _leaf(rng, 5, 5)
    w = _weights(rng, (5, 5))
    return check(lambda: T.sum(T.mul(T.softmax_rows(a), w)), {"a": a})


def suite_elementwise(rng):
    a, b = _leaf(rng, 3, 3), _leaf(rng, 3, 3, low=0.5, high=2.0)
    w = _weights(rng, (3, 3))

    def loss():
        z = T.add(T.mul(a, b), T.div(a, b))
        z = T.add(z, T.sub(T.exp(T.scale(a, 0.3)), T.square(b)))
        z = T.add(z, T.relu(a))
        z = T.add(z, T.power(b, -0.5))
        return T.sum(T.mul(z, w))

    return check(loss, {"a": a, "b": b})


def suite_reductions(rng):
    a = _leaf(rng, 4, 3)
    r, c = _weights(rng, (4, 1)), _weights(rng, (1, 3))

    def loss():
        z = T.sum(T.mul(T.row_sum(a), r))
        z = T.add(z, T.sum(T.mul(T.col_sum(a), c)))
        z = T.add(z, T.mean(a))
        return T.add(z, T.frobenius_norm(a))

    return check(loss, {"a": a})


def _herald_setup(rng, n=12, m=6, d=4, h=3):
    g = random_hypergraph(rng, n, m, d)
    p = HeraldParams.init(d, h, rng)
    X = Tensor(g.features, requires_grad=True)
    return g, p, X


def suite_hyperedge_features(rng):
    g, _, X = _herald_setup(rng)
    w = _weights(rng, (g.num_edges, X.shape[1]))
    return check(lambda: T.sum(T.mul(hyperedge_features(X, g), w)), {"X": X})


def suite_attended_node_features(rng):
    g, p, X = _herald_setup(rng)
    w = _weights(rng, (g.num_nodes, p.hidden))
    return check(lambda: T.sum(T.mul(attended_node_features(X, p), w)), {"X": X, "w_v": p.w_v})


def suite_soft_incidence(rng):
    n, m, h = 6, 3, 3
    xbar, fbar = _leaf(rng, n, h), _leaf(rng, m, h)
    p = HeraldParams.init(2, h, rng)
    w = _weights(rng, (n, m))
    return check(lambda: T.sum(T.mul(soft_incidence(xbar, fbar, p), w)),
                 {"xbar": xbar, "fbar": fbar, "w_s": p.w_s})


def suite_normalized_operator(rng):
    H = _leaf(rng, 8, 4, low=0.2, high=1.5)
    w = _weights(rng, (8, 8))
    return check(lambda: T.sum(T.mul(normalized_operator(H), w)), {"H": H})


def suite_residual_operator(rng):
    H = _leaf(rng, 6, 3, low=0.2, high=1.5)
    N = Tensor(normalized_operator(np.abs(rng.normal(size=(6, 3))) + 0.1).data)
    w = _weights(rng, (6, 6))
    return check(lambda: T.sum(T.mul(residual_operator(H, None, N, 0.3)[0], w)), {"H": H})


def suite_herald_forward(rng):
    g, p, X = _herald_setup(rng)
    N = Tensor(g.operator)
    params = {"w_v": p.w_v, "w_e": p.w_e, "w_s": p.w_s, "X": X}
    return check(lambda: T.sum(herald_forward(X, g, N, p, 0.4).laplacian), params)


def suite_hgnn_layer(rng):
    g = random_hypergraph(rng)
    theta = _leaf(rng, 4, 5)
    X = Tensor(g.features)
    w = _weights(rng, (g.num_nodes, 5))
    return check(lambda: T.sum(T.mul(hgnn_layer(X, g.operator, theta, "relu"), w)), {"theta": theta})


def suite_cross_entropy(rng):
    logits = _leaf(rng, 4, 3)
    labels = rng.integers(0, 3, size=4)
    return check(lambda: cross_entropy(logits, labels), {"logits": logits})


def suite_topology_regularizer(rng):
    N = Tensor(rng.normal(size=(4, 4)))
    n_res = _leaf(rng, 4, 4)
    return check(lambda: topology_regularizer(N, n_res), {"n_res": n_res})


def full_model_loss(model: HGNN, g: Hypergraph, reg_weight: float = 0.1) -> Callable[[], Tensor]:
    N = Tensor(g.operator)
    X = Tensor(g.features)

    def loss():
        out = model.forward(g, X, N)
        total = cross_entropy(out.logits, g.labels)
        reg = regularization(out, N)
        if reg is not None:
            total = T.add(total, T.scale(reg, reg_weight))
        return total

    return loss


def suite_full_model(rng, fast: bool = False):
    """Cross-entropy plus topology regularizer of a 3-layer HGNN with HERALD on layers 2 and 3."""
    g = random_hypergraph(rng, 12, 6, 4)
    config = ModelConfig.node_default(4, 3, hidden=5, herald_hidden=3, fast_herald=fast)
    model = HGNN(config, seed=int(rng.integers(1 << 31)))
    return check(full_model_loss(model, g), model.named_parameters())


SUITES: dict[str, Callable[[np.random.Generator], dict[str, float]]] = {
    "matmul": suite_matmul,
    "softmax_rows": suite_softmax_rows,
    "elementwise": suite_elementwise,
    "reductions": suite_reductions,
    "hyperedge_features": suite_hyperedge_features,
    "attended_node_features": suite_attended_node_features,
    "soft_incidence": suite_soft_incidence,
    "normalized_operator": suite_normalized_operator,
    "residual_operator": suite_residual_operator,
    "herald_forward": suite_herald_forward,
    "hgnn_layer": suite_hgnn_layer,
    "cross_entropy": suite_cross_entropy,
    "topology_regularizer": suite_topology_regularizer,
    "full_model": suite_full_model,
    "full_model_fast": lambda rng: suite_full_model(rng, fast=True),
}


def run_suites(names=None, seed: int = 0, repeats: int = 1) -> dict[str, dict[str, float]]:
    """Worst error per parameter group over ``repeats`` seeded instances of each suite."""
    results: dict[str, dict[str, float]] = {}
    for name in names or SUITES:
        worst: dict[str, float] = {}
        for r in range(repeats):
            rng = np.random.default_rng([seed, r, sum(map(ord, name))])
            for group, err in SUITES[name](rng).items():
                worst[group] = max(worst.get(group, 0.0), err)
        results[name] = worst
    return results
