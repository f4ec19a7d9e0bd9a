"""Losses, the Adam/early-stopping loop, metrics and k-fold cross-validation."""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from sklearn.model_selection import KFold, StratifiedKFold, train_test_split

from . import tensor as T
from .data_io import GraphSample, NodeDataset
from .model import HGNN, ConfigError, ForwardOutput, ModelConfig
from .tensor import HEALTH, AdamState, ContractError, NumericError, Tensor, adam_step

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """The training loss became non-finite."""

    def __init__(self, message: str, health: dict):
        super().__init__(message)
        self.health = health


@dataclass
class TrainConfig:
    lr: float = 0.01
    max_epochs: int = 1000
    patience: int = 100
    reg_weight: float = 0.1
    seed: int = 0
    batch_size: int = 32
    val_fraction: float = 0.2
    eval_metric: str = "accuracy"

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ConfigError(f"patience must lie in [0, max_epochs], got {self.patience}")
        if self.reg_weight < 0:
            raise ConfigError("reg_weight must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.eval_metric != "accuracy":
            raise ConfigError(f"unsupported eval metric {self.eval_metric!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_ce: float
    train_reg: float
    train_acc: float
    val_loss: float
    val_acc: float


METRIC_COLUMNS = [f for f in EpochRecord.__dataclass_fields__]


@dataclass
class TrainReport:
    history: list[EpochRecord] = field(default_factory=list)
    stopped_epoch: int = 0
    best_val_epoch: int = 0
    best_val_accuracy: float = float("nan")
    test_accuracy: float = float("nan")
    fold_accuracies: list[float] = field(default_factory=list)
    mean_accuracy: float = float("nan")
    std_accuracy: float = float("nan")
    folds: list["TrainReport"] = field(default_factory=list)
    health: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["folds"] = [f.to_dict() for f in self.folds]
        return d

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for rec in self.history:
            writer.writerow([repr(getattr(rec, c)) for c in METRIC_COLUMNS])
        return buf.getvalue()


def _as_index(mask, n: int) -> np.ndarray:
    idx = np.asarray(mask)
    if idx.dtype == bool:
        if idx.shape != (n,):
            raise ContractError(f"boolean mask must have length {n}")
        idx = np.flatnonzero(idx)
    idx = idx.astype(np.int64).ravel()
    if idx.size == 0:
        raise ContractError("mask selects no examples")
    return idx


def cross_entropy(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean negative log-softmax of the true class over the masked rows."""
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).ravel()
    idx = _as_index(np.arange(n) if mask is None else mask, n)
    weights = np.zeros((n, c))
    np.add.at(weights, (idx, labels[idx]), 1.0 / idx.size)
    return T.scale(T.sum(T.mul(T.log_softmax_rows(logits), Tensor(weights))), -1.0)


def _ce_value(logits: np.ndarray, labels: np.ndarray, idx: np.ndarray) -> float:
    z = logits[idx]
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(idx.size), labels[idx]].mean())


def accuracy(logits, labels, mask=None) -> float:
    """Argmax match rate; ties go to the lowest class index."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    idx = _as_index(np.arange(z.shape[0]) if mask is None else mask, z.shape[0])
    return float((z[idx].argmax(axis=1) == labels[idx]).mean())


def topology_regularizer(N, n_res: Tensor) -> Tensor:
    """Frobenius norm of ``N - N_res``."""
    N = T.as_tensor(N)
    if N.shape != n_res.shape:
        raise ContractError(f"regularizer shapes differ: {N.shape} vs {n_res.shape}")
    return T.frobenius_norm(T.sub(N, n_res))


def regularization(out: ForwardOutput, N) -> Tensor | None:
    """Mean topology regularizer over every HERALD output of a forward pass."""
    if not out.heralds:
        return None
    terms = [topology_regularizer(N, h.n_res) for h in out.heralds]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(terms)) if len(terms) > 1 else total


def _objective(ce: Tensor, reg: Tensor | None, weight: float) -> Tensor:
    if reg is None or weight == 0.0:
        return ce
    return T.add(ce, T.scale(reg, weight))


def _check_finite(loss: Tensor, epoch: int) -> None:
    if not math.isfinite(loss.item()):
        raise DivergenceError(f"loss became {loss.item()} at epoch {epoch}", HEALTH.as_dict())


class _EarlyStopper:
    """Tracks the best validation epoch; ties in accuracy are broken by lower loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_acc = -math.inf
        self.best_loss = math.inf
        self.best_epoch = 0
        self.best_state: dict | None = None
        self.since = 0

    def update(self, epoch: int, acc: float, loss: float, model: HGNN) -> bool:
        """Record an epoch; returns True when training should stop."""
        if acc > self.best_acc or (acc == self.best_acc and loss < self.best_loss):
            self.best_acc, self.best_loss, self.best_epoch = acc, loss, epoch
            self.best_state = model.state_dict()
            self.since = 0
            return False
        self.since += 1
        return self.since >= self.patience


def train(model: HGNN, data, cfg: TrainConfig) -> TrainReport:
    """Full-batch (node task) or mini-batch-of-graphs (graph task) Adam training.

    ``data`` is a :class:`NodeDataset` or a :class:`GraphSplit`.  The model is
    left holding the best-validation parameters, which are also the ones
    scored on the test split.
    """
    HEALTH.reset()
    if isinstance(data, NodeDataset):
        if model.config.task != "node_classification":
            raise ConfigError("node dataset given to a graph-classification model")
        loop = _train_nodes
    elif isinstance(data, GraphSplit):
        if model.config.task != "graph_classification":
            raise ConfigError("graph split given to a node-classification model")
        loop = _train_graphs
    else:
        raise TypeError(f"cannot train on {type(data).__name__}")
    try:
        report = loop(model, data, cfg)
    except NumericError as exc:
        raise DivergenceError(f"non-finite values during training: {exc}", HEALTH.as_dict()) from exc
    report.health = HEALTH.as_dict()
    return report


def _dropout_rng(cfg: TrainConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))


def _train_nodes(model: HGNN, data: NodeDataset, cfg: TrainConfig) -> TrainReport:
    g = data.graph
    X, N, labels = Tensor(g.features), Tensor(g.operator), g.labels
    params = model.parameters()
    state = AdamState.for_params(params, lr=cfg.lr)
    rng = _dropout_rng(cfg)
    stopper = _EarlyStopper(cfg.patience)
    report = TrainReport()

    for epoch in range(1, cfg.max_epochs + 1):
        out = model.forward(g, X, N, training=True, rng=rng)
        ce = cross_entropy(out.logits, labels, data.train_idx)
        reg = regularization(out, N)
        loss = _objective(ce, reg, cfg.reg_weight)
        _check_finite(loss, epoch)
        T.backward(loss)
        adam_step(params, state)

        logits = model.forward(g, X, N).logits.data
        rec = EpochRecord(
            epoch=epoch,
            train_loss=loss.item(),
            train_ce=ce.item(),
            train_reg=float("nan") if reg is None else reg.item(),
            train_acc=accuracy(logits, labels, data.train_idx),
            val_loss=_ce_value(logits, labels, data.val_idx),
            val_acc=accuracy(logits, labels, data.val_idx),
        )
        report.history.append(rec)
        logger.debug("epoch %d loss %.5f val_acc %.4f", epoch, rec.train_loss, rec.val_acc)
        if stopper.update(epoch, rec.val_acc, rec.val_loss, model):
            break

    report.stopped_epoch = report.history[-1].epoch
    model.load_state_dict(stopper.best_state)
    report.best_val_epoch = stopper.best_epoch
    report.best_val_accuracy = stopper.best_acc
    report.test_accuracy = accuracy(model.forward(g, X, N).logits, labels, data.test_idx)
    return report


@dataclass
class GraphSplit:
    train: list[GraphSample]
    val: list[GraphSample]
    test: list[GraphSample]


class _Prepared:
    __slots__ = ("graph", "X", "N", "label")

    def __init__(self, s: GraphSample):
        self.graph = s.graph
        self.X = Tensor(s.graph.features)
        self.N = Tensor(s.graph.operator)
        self.label = np.array([s.label])


def _evaluate_graphs(model: HGNN, items: Sequence[_Prepared]) -> tuple[float, float]:
    logits = np.vstack([model.forward(p.graph, p.X, p.N).logits.data for p in items])
    labels = np.concatenate([p.label for p in items])
    idx = np.arange(len(items))
    return accuracy(logits, labels), _ce_value(logits, labels, idx)


def _train_graphs(model: HGNN, split: GraphSplit, cfg: TrainConfig) -> TrainReport:
    if not split.train or not split.val or not split.test:
        raise ContractError("graph training needs non-empty train, val and test sets")
    train_items = [_Prepared(s) for s in split.train]
    val_items = [_Prepared(s) for s in split.val]
    test_items = [_Prepared(s) for s in split.test]
    params = model.parameters()
    state = AdamState.for_params(params, lr=cfg.lr)
    rng = _dropout_rng(cfg)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    stopper = _EarlyStopper(cfg.patience)
    report = TrainReport()

    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_items))
        tot_loss = tot_ce = tot_reg = 0.0
        n_reg = n_correct = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_items[i] for i in order[start:start + cfg.batch_size]]
            batch_loss = None
            for p in batch:
                out = model.forward(p.graph, p.X, p.N, training=True, rng=rng)
                ce = cross_entropy(out.logits, p.label)
                reg = regularization(out, p.N)
                term = _objective(ce, reg, cfg.reg_weight)
                tot_ce += ce.item()
                n_correct += int(out.logits.data.argmax(axis=1)[0] == p.label[0])
                if reg is not None:
                    tot_reg += reg.item()
                    n_reg += 1
                batch_loss = term if batch_loss is None else T.add(batch_loss, term)
            batch_loss = T.scale(batch_loss, 1.0 / len(batch))
            _check_finite(batch_loss, epoch)
            tot_loss += batch_loss.item() * len(batch)
            T.backward(batch_loss)
            adam_step(params, state)

        val_acc, val_loss = _evaluate_graphs(model, val_items)
        n = len(train_items)
        # train_acc is the running accuracy of the training forwards within the epoch
        rec = EpochRecord(epoch, tot_loss / n, tot_ce / n, tot_reg / n_reg if n_reg else float("nan"),
                          n_correct / n, val_loss, val_acc)
        report.history.append(rec)
        if stopper.update(epoch, val_acc, val_loss, model):
            break

    report.stopped_epoch = report.history[-1].epoch
    model.load_state_dict(stopper.best_state)
    report.best_val_epoch = stopper.best_epoch
    report.best_val_accuracy = stopper.best_acc
    report.test_accuracy, _ = _evaluate_graphs(model, test_items)
    return report


def fold_assignments(labels: Sequence[int], folds: int = 10, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded stratified k-fold ``(train_idx, test_idx)`` pairs.

    Falls back to plain shuffled k-fold, with a warning, when some class has
    fewer members than ``folds``.
    """
    labels = np.asarray(labels)
    if folds < 2 or folds > len(labels):
        raise ConfigError(f"cannot make {folds} folds from {len(labels)} graphs")
    _, counts = np.unique(labels, return_counts=True)
    placeholder = np.zeros(len(labels))
    if counts.min() < folds:
        warnings.warn(
            f"smallest class has {counts.min()} graphs (< {folds} folds); using non-stratified folds",
            stacklevel=2,
        )
        splitter = KFold(n_splits=folds, shuffle=True, random_state=seed)
        return list(splitter.split(placeholder))
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    return list(splitter.split(placeholder, labels))


def _carve_validation(train_idx: np.ndarray, labels: np.ndarray, fraction: float, seed: int):
    if len(train_idx) < 2:
        # Too few graphs to hold any out: validate on the training graph itself.
        return train_idx, train_idx
    n_val = max(1, int(round(fraction * len(train_idx))))
    sub = labels[train_idx]
    _, counts = np.unique(sub, return_counts=True)
    stratify = sub if counts.min() >= 2 and n_val >= len(counts) else None
    tr, va = train_test_split(train_idx, test_size=n_val, random_state=seed, stratify=stratify)
    return np.sort(tr), np.sort(va)


def cross_validate(samples: Sequence[GraphSample], config: ModelConfig, cfg: TrainConfig,
                   folds: int = 10, val_fraction: float = 0.1) -> TrainReport:
    """k-fold CV: per fold, hold out ``val_fraction`` of the training graphs for early stopping."""
    labels = np.array([s.label for s in samples])
    report = TrainReport()
    for k, (train_idx, test_idx) in enumerate(fold_assignments(labels, folds, cfg.seed)):
        tr, va = _carve_validation(train_idx, labels, val_fraction, cfg.seed + k)
        split = GraphSplit([samples[i] for i in tr], [samples[i] for i in va], [samples[i] for i in test_idx])
        fold_report = train(HGNN(config, seed=cfg.seed), split, cfg)
        logger.info("fold %d: test accuracy %.4f (stopped at %d)", k + 1, fold_report.test_accuracy,
                    fold_report.stopped_epoch)
        report.folds.append(fold_report)
        report.fold_accuracies.append(fold_report.test_accuracy)
    accs = np.array(report.fold_accuracies)
    report.mean_accuracy = float(accs.mean())
    report.std_accuracy = float(accs.std())
    report.test_accuracy = report.mean_accuracy
    return report


def aggregate(reports: Sequence[TrainReport]) -> TrainReport:
    """Mean and std of test accuracy over independent runs (e.g. seeds)."""
    out = TrainReport(folds=list(reports))
    out.fold_accuracies = [r.test_accuracy for r in reports]
    accs = np.array(out.fold_accuracies)
    out.mean_accuracy = float(accs.mean())
    out.std_accuracy = float(accs.std())
    out.test_accuracy = out.mean_accuracy
    return out
