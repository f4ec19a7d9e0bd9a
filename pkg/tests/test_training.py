import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from herald import tensor as T
from herald.data_io import GraphSample, NodeDataset, make_fixture, make_graph_fixture, tu_to_samples
from herald.gradcheck import numerical_gradient
from herald.model import HGNN, ConfigError, ModelConfig
from herald.tensor import ContractError, Tensor
from herald.training import (
    DivergenceError,
    GraphSplit,
    TrainConfig,
    accuracy,
    aggregate,
    cross_entropy,
    cross_validate,
    fold_assignments,
    regularization,
    topology_regularizer,
    train,
)


def toy_dataset(seed=0, n=12):
    """12-node fixture with single-class hyperedges, so labels stay separable after smoothing.

    Every node is used for training, validation and test."""
    g = make_fixture("separable_node_task", seed, n=n, purity=1.0)
    idx = np.arange(n)
    return NodeDataset(g, idx, idx, idx)


def split_dataset(seed=0, n=60):
    g = make_fixture("separable_node_task", seed, n=n)
    return NodeDataset.from_hypergraph(g, None, seed=seed)


def small_model(data, seed=0, **kw):
    kw.setdefault("hidden", 16)
    kw.setdefault("herald_hidden", 8)
    return HGNN(ModelConfig.node_default(data.num_features, data.num_classes, **kw), seed=seed)


# --- cross-entropy -----------------------------------------------------------------------------


def test_cross_entropy_uniform_two_classes():
    assert cross_entropy(Tensor(np.zeros((3, 2))), [0, 1, 1]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_cross_entropy_huge_margin_tends_to_zero():
    assert cross_entropy(Tensor([[200.0, 0.0], [0.0, 200.0]]), [0, 1]).item() < 1e-80


def test_cross_entropy_matches_log_sum_exp_oracle():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 3)) * 3
    y = np.array([2, 0, 1, 1])
    mask = np.array([True, False, True, True])
    oracle = 0.0
    for i in np.flatnonzero(mask):
        top = max(z[i])
        lse = top + math.log(sum(math.exp(v - top) for v in z[i]))
        oracle += lse - z[i, y[i]]
    oracle /= mask.sum()
    assert cross_entropy(Tensor(z), y, mask).item() == pytest.approx(oracle, abs=1e-12)
    assert cross_entropy(Tensor(z), y, np.flatnonzero(mask)).item() == pytest.approx(oracle, abs=1e-12)


def test_cross_entropy_empty_mask():
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros((2, 2))), [0, 1], np.zeros(2, dtype=bool))


def test_cross_entropy_gradient():
    rng = np.random.default_rng(1)
    z = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    y = rng.integers(0, 3, size=4)
    T.backward(cross_entropy(z, y))
    numeric = numerical_gradient(lambda: cross_entropy(z, y).item(), z)
    assert np.abs(z.grad - numeric).max() / np.abs(numeric).max() < 1e-6


# --- accuracy ---------------------------------------------------------------------------------------


def test_accuracy_examples():
    assert accuracy(np.array([[2.0, 1.0], [0.0, 3.0]]), [0, 1]) == 1.0
    assert accuracy(np.array([[0.0, 1.0], [1.0, 0.0]]), [0, 1]) == 0.0
    assert accuracy(np.array([[1.0, 1.0]]), [0]) == 1.0  # tie goes to the lowest class
    assert accuracy(np.array([[1.0, 5.0], [1.0, 0.0]]), [1, 1], [True, False]) == 1.0
    with pytest.raises(ContractError):
        accuracy(np.zeros((2, 2)), [0, 1], [])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.just(3)), elements=st.integers(-20, 20).map(float)),
       st.floats(-50, 50).map(round), st.integers(0, 2**32 - 1))
def test_accuracy_invariant_to_row_shift(z, c, seed):
    labels = np.random.default_rng(seed).integers(0, 3, size=z.shape[0])
    assert accuracy(z + c, labels) == accuracy(z, labels)


# --- topology regularizer ----------------------------------------------------------------------------


def test_regularizer_examples():
    N = Tensor(np.eye(2))
    assert topology_regularizer(N, Tensor(np.eye(2))).item() == 0.0
    assert topology_regularizer(N, Tensor(np.zeros((2, 2)))).item() == pytest.approx(math.sqrt(2), abs=1e-15)
    with pytest.raises(ContractError):
        topology_regularizer(N, Tensor(np.zeros((3, 3))))


def test_regularizer_gradient():
    rng = np.random.default_rng(2)
    N = Tensor(rng.normal(size=(4, 4)))
    n_res = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    T.backward(topology_regularizer(N, n_res))
    numeric = numerical_gradient(lambda: topology_regularizer(N, n_res).item(), n_res)
    assert (np.abs(n_res.grad - numeric) / np.abs(numeric)).max() < 1e-5


def test_regularizer_averages_over_herald_layers():
    data = toy_dataset()
    model = small_model(data)
    out = model.forward(data.graph)
    N = data.graph.operator
    per_layer = [np.linalg.norm(N - h.n_res.data) for h in out.heralds]
    assert len(per_layer) == 2
    assert regularization(out, N).item() == pytest.approx(np.mean(per_layer), abs=1e-14)
    assert regularization(small_model(data, herald=False).forward(data.graph), N) is None


# --- config ---------------------------------------------------------------------------------------------


def test_train_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.max_epochs, cfg.patience, cfg.reg_weight, cfg.eval_metric) == (0.01, 1000, 100, 0.1, "accuracy")
    for bad in ({"lr": 0.0}, {"patience": 5, "max_epochs": 4}, {"reg_weight": -1.0}, {"eval_metric": "f1"}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


# --- training loop -----------------------------------------------------------------------------------------


def test_separable_toy_reaches_full_train_accuracy_within_200_epochs():
    data = toy_dataset()
    report = train(small_model(data), data, TrainConfig(max_epochs=200, patience=200))
    first = next(r.epoch for r in report.history if r.train_acc == 1.0)
    assert first <= 200


def test_loss_decreases_over_first_ten_epochs():
    data = toy_dataset()
    report = train(small_model(data), data, TrainConfig(max_epochs=10, patience=10))
    losses = [r.train_loss for r in report.history]
    assert len(losses) == 10 and losses[-1] < losses[0]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_patience_zero_stops_at_first_non_improving_epoch():
    data = split_dataset()
    report = train(small_model(data), data, TrainConfig(max_epochs=200, patience=0))
    best_acc, best_loss = -1.0, math.inf
    expected = None
    for r in report.history:
        if r.val_acc > best_acc or (r.val_acc == best_acc and r.val_loss < best_loss):
            best_acc, best_loss = r.val_acc, r.val_loss
        else:
            expected = r.epoch
            break
    assert expected is not None and report.stopped_epoch == expected == len(report.history)


def test_reported_test_accuracy_comes_from_best_validation_checkpoint():
    data = split_dataset(1)
    model = small_model(data, seed=1)
    report = train(model, data, TrainConfig(max_epochs=150, patience=30, seed=1))
    assert report.best_val_epoch < report.stopped_epoch
    best = report.history[report.best_val_epoch - 1]
    assert best.val_acc == max(r.val_acc for r in report.history) == report.best_val_accuracy

    # replaying exactly best_val_epoch epochs ends on the same parameters
    replay = small_model(data, seed=1)
    train(replay, data, TrainConfig(max_epochs=report.best_val_epoch, patience=report.best_val_epoch, seed=1))
    for name, arr in model.state_dict().items():
        np.testing.assert_array_equal(replay.state_dict()[name], arr)
    logits = model.forward(data.graph).logits
    assert report.test_accuracy == accuracy(logits, data.graph.labels, data.test_idx)


def test_training_is_seed_deterministic():
    data = split_dataset(2)
    a = train(small_model(data, seed=3), data, TrainConfig(max_epochs=40, seed=3, patience=40))
    b = train(small_model(data, seed=3), data, TrainConfig(max_epochs=40, seed=3, patience=40))
    assert a.metrics_csv() == b.metrics_csv()
    assert a.to_dict() == b.to_dict() or repr(a.to_dict()) == repr(b.to_dict())


def test_plain_hgnn_trajectory_is_bit_stable():
    data = split_dataset(3)
    runs = [train(small_model(data, seed=4, herald=False), data, TrainConfig(max_epochs=30, patience=30,
                                                                               reg_weight=0.0, seed=4))
            for _ in range(2)]
    assert runs[0].metrics_csv() == runs[1].metrics_csv()


def test_zero_mix_training_matches_plain_hgnn_bit_for_bit():
    from herald.herald import MixSchedule

    data = split_dataset(4)
    cfg = TrainConfig(max_epochs=50, patience=50, reg_weight=0.0, seed=5)
    plain = train(small_model(data, seed=5, herald=False), data, cfg)
    zero = train(small_model(data, seed=5, mix=MixSchedule("constant", 0.0)), data, cfg)
    for a, b in zip(plain.history, zero.history):
        assert (a.train_loss, a.train_acc, a.val_loss, a.val_acc) == (b.train_loss, b.train_acc, b.val_loss, b.val_acc)


def _reg_ratio(seed, reg_weight, epochs=200):
    data = toy_dataset(seed)
    report = train(small_model(data, seed=seed), data,
                   TrainConfig(reg_weight=reg_weight, max_epochs=epochs, patience=epochs, seed=seed))
    return report.history[-1].train_reg / report.history[0].train_reg


@pytest.mark.slow
def test_large_regularizer_pulls_residual_operator_toward_static():
    heavy = np.mean([_reg_ratio(s, 1e6) for s in range(5)])
    free = np.mean([_reg_ratio(s, 0.0) for s in range(5)])
    assert heavy < 0.8 * free


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="optimization stalls in a collapsed-attention plateau; see decisions ledger")
def test_large_regularizer_reaches_ten_percent_of_initial_distance():
    ratios = [_reg_ratio(s, 1e6, epochs=1000) for s in range(3)]
    assert max(ratios) < 0.1


def test_divergence_raises_with_health_report():
    data = split_dataset()
    model = small_model(data, herald=False)
    model.thetas[0].data[:] = np.nan
    with pytest.raises(DivergenceError) as exc:
        train(model, data, TrainConfig(max_epochs=5, patience=5))
    assert exc.value.health["nan_count"] > 0


def test_task_dataset_mismatch():
    data = split_dataset()
    graph_model = HGNN(ModelConfig.graph_default(8, 3, hidden=4), seed=0)
    with pytest.raises(ConfigError):
        train(graph_model, data, TrainConfig(max_epochs=2, patience=1))


# --- graph task and cross-validation ------------------------------------------------------------------------


def graph_samples(n=20, seed=0):
    return tu_to_samples(make_graph_fixture(seed, num_graphs=n))


def test_graph_training_produces_report():
    samples = graph_samples(20)
    split = GraphSplit(samples[:12], samples[12:16], samples[16:])
    cfg = ModelConfig.graph_default(samples[0].graph.feature_dim, 2, hidden=8, herald_hidden=4)
    report = train(HGNN(cfg, 0), split, TrainConfig(max_epochs=5, patience=5, batch_size=4))
    assert len(report.history) == 5 and 0.0 <= report.test_accuracy <= 1.0
    assert report.stopped_epoch <= 5 and 1 <= report.best_val_epoch <= report.stopped_epoch
    assert all(math.isfinite(r.train_reg) for r in report.history)


def test_stratified_folds_of_identical_graphs():
    labels = [0] * 10 + [1] * 10
    folds = fold_assignments(labels, 10, seed=0)
    for _, test in folds:
        assert len(test) == 2 and sorted(np.array(labels)[test]) == [0, 1]


def test_mutag_shaped_fold_sizes():
    labels = [0] * 63 + [1] * 125
    sizes = sorted(len(test) for _, test in fold_assignments(labels, 10, seed=0))
    assert sizes[0] >= 18 and sizes[-1] <= 19 and sum(sizes) == 188


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=4, max_size=40), st.integers(2, 4), st.integers(0, 100))
def test_folds_partition_the_dataset(labels, folds, seed):
    if folds > len(labels):
        folds = len(labels)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assignment = fold_assignments(labels, folds, seed)
    tests = np.concatenate([t for _, t in assignment])
    assert sorted(tests.tolist()) == list(range(len(labels)))
    for train_idx, test_idx in assignment:
        assert not set(train_idx) & set(test_idx)
        assert len(train_idx) + len(test_idx) == len(labels)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        again = fold_assignments(labels, folds, seed)
    assert all(np.array_equal(a[1], b[1]) for a, b in zip(assignment, again))


def test_small_class_falls_back_with_warning():
    with pytest.warns(UserWarning, match="non-stratified"):
        fold_assignments([0, 0, 0, 1, 1, 1, 1, 1], 4, seed=0)


def test_cross_validate_reports_mean_and_std():
    samples = graph_samples(12)
    cfg = ModelConfig.graph_default(samples[0].graph.feature_dim, 2, hidden=8, herald=False)
    report = cross_validate(samples, cfg, TrainConfig(max_epochs=3, patience=3), folds=3)
    assert len(report.folds) == len(report.fold_accuracies) == 3
    assert report.mean_accuracy == pytest.approx(np.mean(report.fold_accuracies))
    assert report.std_accuracy == pytest.approx(np.std(report.fold_accuracies))


def test_cross_validate_two_graphs_two_folds():
    samples = graph_samples(2)
    cfg = ModelConfig.graph_default(samples[0].graph.feature_dim, 2, hidden=4, herald=False)
    with pytest.warns(UserWarning):
        report = cross_validate(samples, cfg, TrainConfig(max_epochs=2, patience=2), folds=2)
    assert len(report.folds) == 2


def test_aggregate():
    from herald.training import TrainReport

    reports = [TrainReport(test_accuracy=a) for a in (0.5, 0.7, 0.9)]
    agg = aggregate(reports)
    assert agg.mean_accuracy == pytest.approx(0.7) and agg.std_accuracy == pytest.approx(np.std([0.5, 0.7, 0.9]))


def test_report_csv_columns():
    data = toy_dataset()
    report = train(small_model(data, herald=False), data, TrainConfig(max_epochs=2, patience=2, reg_weight=0.0))
    lines = report.metrics_csv().splitlines()
    assert lines[0] == "epoch,train_loss,train_ce,train_reg,train_acc,val_loss,val_acc"
    assert len(lines) == 3


def test_graph_sample_type():
    assert isinstance(graph_samples(2)[0], GraphSample)
