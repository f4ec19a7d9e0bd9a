import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from herald import tensor as T
from herald.gradcheck import numerical_gradient, random_hypergraph
from herald.herald import MixSchedule
from herald.hypergraph import Hypergraph
from herald.model import HGNN, ConfigError, LayerSpec, ModelConfig, hgnn_layer, load_checkpoint, readout_sum, \
    save_checkpoint
from herald.tensor import Tensor


def toy_graph(seed=0, n=12, m=6, d=4):
    return random_hypergraph(np.random.default_rng(seed), n, m, d)


# --- hgnn_layer -------------------------------------------------------------------------------


def test_layer_identity_relu():
    out = hgnn_layer(Tensor([[-1.0, 2.0]]), np.eye(1), Tensor(np.eye(2)), "relu")
    np.testing.assert_array_equal(out.data, [[0, 2]])


def test_layer_averaging():
    N = np.full((2, 2), 0.5)
    out = hgnn_layer(Tensor([[2.0, 0.0], [0.0, 2.0]]), N, Tensor(np.eye(2)), "none")
    np.testing.assert_array_equal(out.data, [[1, 1], [1, 1]])


def test_layer_shape_mismatch():
    with pytest.raises(ValueError):
        hgnn_layer(Tensor(np.ones((2, 3))), np.eye(2), Tensor(np.ones((2, 2))))


def test_layer_theta_gradient():
    g = toy_graph()
    rng = np.random.default_rng(1)
    theta = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(12, 5)))
    loss = lambda: T.sum(T.mul(hgnn_layer(Tensor(g.features), g.operator, theta, "relu"), w))  # noqa: E731
    T.backward(loss())
    numeric = numerical_gradient(lambda: loss().item(), theta)
    denom = np.maximum(np.abs(numeric), 1e-8)
    assert (np.abs(theta.grad - numeric) / denom).max() < 1e-5


# --- readout ------------------------------------------------------------------------------------


def test_readout_examples():
    np.testing.assert_array_equal(readout_sum(Tensor([[1.0, 2.0], [3.0, 4.0]])).data, [[4, 6]])
    np.testing.assert_array_equal(readout_sum(Tensor([[1.5, -2.0]])).data, [[1.5, -2.0]])


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 5)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)), st.randoms())
def test_readout_permutation_invariant(E, rnd):
    # integer-valued entries keep every partial sum exact, so any order gives the same bits
    E = np.round(E)
    perm = list(range(E.shape[0]))
    rnd.shuffle(perm)
    np.testing.assert_array_equal(readout_sum(Tensor(E[perm])).data, readout_sum(Tensor(E)).data)


def test_readout_permutation_invariant_for_model_outputs():
    g = toy_graph(2)
    cfg = ModelConfig.graph_default(4, 2, hidden=6, herald_hidden=3)
    model = HGNN(cfg, seed=0)
    perm = np.random.default_rng(0).permutation(12)
    a = model.forward(g).logits.data
    b = model.forward(g.permuted(perm)).logits.data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


# --- configuration --------------------------------------------------------------------------------


def test_node_default_layout():
    cfg = ModelConfig.node_default(10, 3)
    assert [(s.in_dim, s.out_dim) for s in cfg.layers] == [(10, 64), (64, 64), (64, 3)]
    assert [s.herald for s in cfg.layers] == [False, True, True]
    assert [s.activation for s in cfg.layers] == ["relu", "relu", "none"]
    assert cfg.herald_hidden == 32 and cfg.sigma == 1.0 and cfg.mix == MixSchedule()


def test_graph_default_layout():
    cfg = ModelConfig.graph_default(7, 2)
    assert len(cfg.layers) == 2 and [s.herald for s in cfg.layers] == [False, True]
    assert cfg.readout == "sum" and cfg.num_classes == 2


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(layers=[])
    with pytest.raises(ConfigError):
        ModelConfig(layers=[LayerSpec(3, 4, "relu"), LayerSpec(5, 2, "none")])
    with pytest.raises(ConfigError):
        ModelConfig(layers=[LayerSpec(3, 2, "relu")])
    with pytest.raises(ConfigError):
        LayerSpec(3, 2, "tanh")
    with pytest.raises(ConfigError):
        LayerSpec(3, 2, dropout=1.0)
    with pytest.raises(ConfigError):
        ModelConfig(layers=[LayerSpec(3, 2)], task="graph_classification")


def test_config_dict_round_trip():
    cfg = ModelConfig.node_default(5, 3, hidden=8, mix=MixSchedule.parse("const:0.3"), fast_herald=True)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# --- forward ---------------------------------------------------------------------------------------


def test_single_plain_layer_is_hgnn_convolution():
    g = toy_graph(3)
    cfg = ModelConfig(layers=[LayerSpec(4, 3, "none")])
    model = HGNN(cfg, seed=1)
    out = model.forward(g).logits.data
    np.testing.assert_array_equal(out, (g.operator @ g.features) @ model.thetas[0].data)


def test_zero_mix_is_bit_identical_to_plain_hgnn():
    g = toy_graph(4)
    plain = HGNN(ModelConfig.node_default(4, 3, hidden=8, herald=False), seed=5)
    mixed = HGNN(ModelConfig.node_default(4, 3, hidden=8, mix=MixSchedule("constant", 0.0)), seed=5)
    for a, b in zip(plain.thetas, mixed.thetas):
        np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(plain.forward(g).logits.data, mixed.forward(g).logits.data)


def test_forward_is_deterministic():
    g = toy_graph(5)
    cfg = ModelConfig.node_default(4, 3, hidden=8, herald_hidden=4)
    a = HGNN(cfg, seed=3).forward(g).logits.data
    b = HGNN(cfg, seed=3).forward(g).logits.data
    np.testing.assert_array_equal(a, b)


def test_herald_layers_use_their_own_operator():
    g = toy_graph(6)
    model = HGNN(ModelConfig.node_default(4, 3, hidden=8, herald_hidden=4), seed=0)
    out = model.forward(g)
    assert len(out.heralds) == 2
    np.testing.assert_array_equal(out.operators[0].data, g.operator)
    assert out.operators[1] is out.heralds[0].n_hat and out.operators[2] is out.heralds[1].n_hat
    assert [h.a for h in out.heralds] == [pytest.approx(0.1220245676671808), pytest.approx(0.1859423525312737)]


@pytest.mark.slow
def test_cora_shaped_forward():
    rng = np.random.default_rng(0)
    n, m, d, c = 2708, 1579, 1433, 7
    edges = [list(rng.choice(n, size=int(rng.integers(2, 6)), replace=False)) for _ in range(m)]
    covered = set().union(*map(set, edges))
    edges += [[v] for v in range(n) if v not in covered]
    feats = (rng.random((n, d)) < 0.01).astype(float)
    g = Hypergraph.from_edges(n, edges, features=feats)
    model = HGNN(ModelConfig.node_default(d, c), seed=0)
    logits = model.forward(g).logits
    assert logits.shape == (2708, 7)
    assert np.isfinite(logits.data).all()


# --- FastHERALD -------------------------------------------------------------------------------------


def test_fast_herald_shares_one_operator():
    g = toy_graph(7)
    model = HGNN(ModelConfig.node_default(4, 3, hidden=8, herald_hidden=4, fast_herald=True), seed=0)
    out = model.forward(g)
    assert len(out.heralds) == 1 and out.heralds[0].a == pytest.approx(0.1)
    first = out.operators[0].data
    for op in out.operators[1:]:
        np.testing.assert_array_equal(op.data, first)


def test_fast_herald_parameter_counts():
    layerwise = HGNN(ModelConfig.node_default(10, 3, hidden=8, herald_hidden=4), seed=0)
    fast = HGNN(ModelConfig.node_default(10, 3, hidden=8, herald_hidden=4, fast_herald=True), seed=0)
    assert len(layerwise.heralds) == 2 and len(fast.heralds) == 1
    assert fast.herald_parameter_count() == 2 * 10 * 4 + 4
    assert layerwise.herald_parameter_count() == 2 * (2 * 8 * 4 + 4)
    assert fast.num_parameters() < layerwise.num_parameters()


def test_fast_herald_single_layer_equals_layerwise():
    g = toy_graph(8)
    spec = [LayerSpec(4, 3, "none", herald=True)]
    layerwise = HGNN(ModelConfig(layers=spec), seed=2)
    fast = HGNN(ModelConfig(layers=[LayerSpec(4, 3, "none", herald=True)], fast_herald=True), seed=2)
    fast.load_state_dict(layerwise.state_dict())
    np.testing.assert_array_equal(fast.forward(g).logits.data, layerwise.forward(g).logits.data)


# --- dropout ----------------------------------------------------------------------------------------


def test_dropout_only_in_training():
    g = toy_graph(9)
    model = HGNN(ModelConfig.node_default(4, 3, hidden=16, herald=False, dropout=0.5), seed=0)
    eval_a = model.forward(g).logits.data
    eval_b = model.forward(g).logits.data
    np.testing.assert_array_equal(eval_a, eval_b)
    train = model.forward(g, training=True, rng=np.random.default_rng(0)).logits.data
    assert not np.array_equal(train, eval_a)
    with pytest.raises(ValueError):
        model.forward(g, training=True)


# --- checkpoints ------------------------------------------------------------------------------------


@pytest.mark.parametrize("task", ["node", "graph"])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, task):
    g = toy_graph(10)
    if task == "node":
        cfg = ModelConfig.node_default(4, 3, hidden=8, herald_hidden=4, mix=MixSchedule.parse("const:0.4"))
    else:
        cfg = ModelConfig.graph_default(4, 2, hidden=8, herald_hidden=4, fast_herald=True)
    model = HGNN(cfg, seed=11)
    for p in model.parameters():
        p.data = p.data + np.random.default_rng(0).normal(size=p.shape) * 1e-3
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, model, epoch=17, manifest={"seed": 11})
    loaded, doc = load_checkpoint(path)
    assert doc["epoch"] == 17 and doc["seed"] == 11 and doc["manifest"] == {"seed": 11}
    assert loaded.config == cfg
    for name, arr in model.state_dict().items():
        np.testing.assert_array_equal(loaded.state_dict()[name], arr)
        assert loaded.state_dict()[name].dtype == np.float64
    np.testing.assert_array_equal(loaded.forward(g).logits.data, model.forward(g).logits.data)


def test_checkpoint_mismatch_is_config_error(tmp_path):
    model = HGNN(ModelConfig.node_default(4, 3, hidden=8), seed=0)
    other = HGNN(ModelConfig.node_default(4, 3, hidden=8, herald=False), seed=0)
    with pytest.raises(ConfigError):
        other.load_state_dict(model.state_dict())
