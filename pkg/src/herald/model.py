"""HGNN backbone with optional per-layer (or shared) HERALD adaptors."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .herald import HeraldOutput, HeraldParams, MixSchedule, glorot, herald_forward, mix_coefficient
from .hypergraph import Hypergraph
from .tensor import Tensor

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Model or training configuration is inconsistent."""


@dataclass
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"
    herald: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        if self.activation not in ("relu", "none"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


@dataclass
class ModelConfig:
    layers: list[LayerSpec]
    herald_hidden: int = 32
    sigma: float = 1.0
    mix: MixSchedule = field(default_factory=MixSchedule)
    fast_herald: bool = False
    task: str = "node_classification"
    readout: str = "sum"
    num_classes: int | None = None
    scaled_attention: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise ConfigError("a model needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_dim != b.in_dim:
                raise ConfigError(f"layer {i + 1} outputs {a.out_dim} features but layer {i + 2} expects {b.in_dim}")
        if self.task not in ("node_classification", "graph_classification"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task == "node_classification" and self.layers[-1].activation != "none":
            raise ConfigError("the last layer of a node model must emit logits (activation 'none')")
        if self.task == "graph_classification":
            if self.readout != "sum":
                raise ConfigError(f"unsupported readout {self.readout!r}")
            if not self.num_classes or self.num_classes < 1:
                raise ConfigError("graph models need num_classes for the classifier head")
        if self.herald_hidden < 1:
            raise ConfigError("herald_hidden must be positive")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")

    @property
    def uses_herald(self) -> bool:
        return any(layer.herald for layer in self.layers)

    @classmethod
    def node_default(cls, in_dim: int, num_classes: int, hidden: int = 64, num_layers: int = 3,
                     herald: bool = True, dropout: float = 0.0, **kwargs) -> "ModelConfig":
        """``d -> hidden -> ... -> C``; HERALD on every layer except the first."""
        dims = [in_dim] + [hidden] * (num_layers - 1) + [num_classes]
        layers = [
            LayerSpec(
                dims[i], dims[i + 1],
                activation="relu" if i < num_layers - 1 else "none",
                herald=herald and i >= 1,
                dropout=dropout if i < num_layers - 1 else 0.0,
            )
            for i in range(num_layers)
        ]
        if herald and num_layers == 1:
            layers[0].herald = True
        return cls(layers=layers, task="node_classification", **kwargs)

    @classmethod
    def graph_default(cls, in_dim: int, num_classes: int, hidden: int = 64, num_layers: int = 2,
                      herald: bool = True, dropout: float = 0.0, **kwargs) -> "ModelConfig":
        """HGNN layers -> sum readout -> linear classifier."""
        dims = [in_dim] + [hidden] * num_layers
        layers = [
            LayerSpec(dims[i], dims[i + 1], "relu", herald=herald and (i >= 1 or num_layers == 1), dropout=dropout)
            for i in range(num_layers)
        ]
        return cls(layers=layers, task="graph_classification", num_classes=num_classes, **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mix"] = self.mix.describe()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["layers"] = [LayerSpec(**layer) for layer in d["layers"]]
        mix = d.get("mix", "cosine")
        d["mix"] = MixSchedule.parse(mix) if isinstance(mix, str) else MixSchedule(**mix)
        return cls(**d)


def hgnn_layer(X: Tensor, n_hat, theta: Tensor, activation: str = "relu") -> Tensor:
    """``activation(N_hat X Theta)``."""
    out = T.matmul(T.matmul(T.as_tensor(n_hat), X), theta)
    if activation == "relu":
        return T.relu(out)
    if activation == "none":
        return out
    raise ConfigError(f"unknown activation {activation!r}")


def readout_sum(E: Tensor) -> Tensor:
    """Column sums, ``1 x c``."""
    return T.col_sum(E)


class ForwardOutput(NamedTuple):
    logits: Tensor
    heralds: list[HeraldOutput]
    operators: list[Tensor]


class HGNN:
    """Parameter container plus forward pass.

    Initialization draws from independent streams of ``seed``: layer weights,
    HERALD bundles and the classifier head each get their own generator, so
    toggling HERALD never changes the backbone's initial weights.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        theta_seq, herald_seq, head_seq = np.random.SeedSequence(seed).spawn(3)
        theta_rng = np.random.default_rng(theta_seq)
        herald_rng = np.random.default_rng(herald_seq)
        head_rng = np.random.default_rng(head_seq)

        self.thetas = [glorot(theta_rng, s.in_dim, s.out_dim) for s in config.layers]
        self.heralds: dict[int, HeraldParams] = {}
        if config.fast_herald:
            self.heralds[1] = self._new_herald(config.layers[0].in_dim, herald_rng)
        else:
            for idx, spec in enumerate(config.layers, start=1):
                if spec.herald:
                    self.heralds[idx] = self._new_herald(spec.in_dim, herald_rng)

        self.head_w: Tensor | None = None
        self.head_b: Tensor | None = None
        if config.task == "graph_classification":
            self.head_w = glorot(head_rng, config.layers[-1].out_dim, config.num_classes)
            self.head_b = Tensor(np.zeros((1, config.num_classes)), requires_grad=True)

    def _new_herald(self, in_dim: int, rng: np.random.Generator) -> HeraldParams:
        c = self.config
        return HeraldParams.init(in_dim, c.herald_hidden, rng, sigma=c.sigma, scaled_attention=c.scaled_attention)

    def named_parameters(self) -> dict[str, Tensor]:
        params = {f"theta{i}": t for i, t in enumerate(self.thetas, start=1)}
        for layer, hp in self.heralds.items():
            params[f"herald{layer}.w_v"] = hp.w_v
            params[f"herald{layer}.w_e"] = hp.w_e
            params[f"herald{layer}.w_s"] = hp.w_s
        if self.head_w is not None:
            params["head.w"] = self.head_w
            params["head.b"] = self.head_b
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def herald_parameter_count(self) -> int:
        return sum(hp.num_parameters() for hp in self.heralds.values())

    def forward(self, g: Hypergraph, X=None, N=None, training: bool = False,
                rng: np.random.Generator | None = None) -> ForwardOutput:
        """Logits for every node (node task) or a ``1 x C`` row (graph task).

        ``N`` defaults to the static operator of ``g``; pass it to reuse a
        precomputed Tensor.  Dropout is active only when ``training`` is set.
        """
        c = self.config
        X = T.as_tensor(g.features if X is None else X)
        N = T.as_tensor(g.operator if N is None else N)
        heralds: list[HeraldOutput] = []
        operators: list[Tensor] = []

        shared = None
        if c.fast_herald:
            shared = herald_forward(X, g, N, self.heralds[1], mix_coefficient(c.mix, 1))
            heralds.append(shared)

        h = X
        for idx, (spec, theta) in enumerate(zip(c.layers, self.thetas), start=1):
            if shared is not None:
                op = shared.n_hat
            elif spec.herald:
                out = herald_forward(h, g, N, self.heralds[idx], mix_coefficient(c.mix, idx))
                heralds.append(out)
                op = out.n_hat
            else:
                op = N
            operators.append(op)
            h = hgnn_layer(h, op, theta, spec.activation)
            if training and spec.dropout > 0.0 and idx < len(c.layers):
                if rng is None:
                    raise ValueError("dropout needs an rng during training")
                keep = (rng.random(h.shape) >= spec.dropout) / (1.0 - spec.dropout)
                h = T.mul(h, Tensor(keep))

        if c.task == "graph_classification":
            h = T.add(T.matmul(readout_sum(h), self.head_w), self.head_b)
        return ForwardOutput(h, heralds, operators)

    __call__ = forward

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            raise ConfigError(f"checkpoint parameters {sorted(state)} do not match model {sorted(params)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigError(f"checkpoint {name} has shape {arr.shape}, model expects {p.shape}")
            p.data = arr.copy()


def save_checkpoint(path, model: HGNN, epoch: int, manifest: dict | None = None) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "epoch": epoch,
        "parameters": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in model.state_dict().items()
        },
    }
    if manifest is not None:
        doc["manifest"] = manifest
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple[HGNN, dict]:
    """Rebuild the model from a checkpoint; returns ``(model, document)``."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')!r}")
    model = HGNN(ModelConfig.from_dict(doc["config"]), seed=doc["seed"])
    state = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["parameters"].items()
    }
    model.load_state_dict(state)
    return model, doc
