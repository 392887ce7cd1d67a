"""Feed-forward blocks: dense layers, representation nets, softmax heads, SGD."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from fedmvt import tensor as T
from fedmvt.tensor import GradMap, ShapeError, Tensor


@dataclass
class DenseLayer:
    weight: Tensor
    bias: Tensor
    activation: str = "none"

    def __post_init__(self):
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def zeros(cls, n_in: int, n_out: int, activation: str = "none") -> "DenseLayer":
        return cls(
            Tensor(np.zeros((n_in, n_out)), requires_grad=True),
            Tensor(np.zeros((1, n_out)), requires_grad=True),
            activation,
        )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        out = T.add_row(T.matmul(x, self.weight), self.bias)
        return T.relu(out) if self.activation == "relu" else out


@dataclass
class RepresentationNet:
    """Maps one party's raw features to a width-``output_dim`` representation."""

    layers: list[DenseLayer]

    @classmethod
    def mlp(cls, n_in: int, hidden: Sequence[int], n_out: int) -> "RepresentationNet":
        widths = [n_in, *hidden, n_out]
        layers = [
            DenseLayer.zeros(widths[i], widths[i + 1], "relu" if i < len(widths) - 2 else "none")
            for i in range(len(widths) - 1)
        ]
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]


@dataclass
class SoftmaxClassifier:
    head: DenseLayer
    num_classes: int = field(init=False)

    def __post_init__(self):
        if self.head.activation != "none":
            raise ValueError("classifier head must be linear")
        self.num_classes = self.head.out_dim

    @classmethod
    def create(cls, n_in: int, num_classes: int) -> "SoftmaxClassifier":
        return cls(DenseLayer.zeros(n_in, num_classes))

    @property
    def input_dim(self) -> int:
        return self.head.in_dim

    def params(self) -> list[Tensor]:
        return self.head.params()


def forward_net(net: RepresentationNet, x: Tensor) -> Tensor:
    if x.shape[1] != net.input_dim:
        raise ShapeError(f"forward_net: input width {x.shape[1]} != net width {net.input_dim}")
    out = x
    for layer in net.layers:
        out = layer(out)
    return out


def forward_classifier(f: SoftmaxClassifier, r: Tensor) -> Tensor:
    if r.shape[1] != f.input_dim:
        raise ShapeError(
            f"forward_classifier: input width {r.shape[1]} != classifier width {f.input_dim}"
        )
    return T.softmax_rows(f.head(r))


def _layers_of(module) -> list[DenseLayer]:
    if isinstance(module, RepresentationNet):
        return module.layers
    if isinstance(module, SoftmaxClassifier):
        return [module.head]
    if isinstance(module, DenseLayer):
        return [module]
    raise TypeError(f"cannot initialise {type(module).__name__}")


def init_params(module, seed: int) -> None:
    """Glorot-uniform weights, zero biases.  Deterministic per seed."""
    rng = np.random.default_rng(seed)
    for layer in _layers_of(module):
        n_in, n_out = layer.weight.shape
        limit = np.sqrt(6.0 / (n_in + n_out))
        layer.weight.values[...] = rng.uniform(-limit, limit, size=(n_in, n_out))
        layer.bias.values[...] = 0.0


def submodel_seed(seed: int, name: str) -> int:
    """Stable per-submodel seed, independent of which other submodels exist."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def sgd_step(params: Iterable[Tensor], grads: GradMap, lr: float) -> None:
    params = list(params)
    seen: set[int] = set()
    for p in params:
        if p.node in seen:
            raise RuntimeError("sgd_step: parameter listed twice")
        seen.add(p.node)
        if p.node not in grads:
            raise RuntimeError(f"sgd_step: no gradient for parameter {p!r}")
    for p in params:
        p.values -= lr * grads[p.node].values


def n_params(params: Iterable[Tensor]) -> int:
    return sum(p.values.size for p in params)
