"""MLP teachers and quantizable students."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .quantizer import QuantPlan
from .tensor import ShapeError, Tensor

ACTIVATIONS = ("relu", "none")
ROLES = ("student", "teacher")


@dataclass
class Layer:
    name: str
    weight: Tensor  # [in, out]
    bias: Tensor  # [out]
    activation: str = "relu"

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]


@dataclass
class ModelParams:
    layers: list[Layer]
    role: str = "student"
    frozen: bool = False

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_features != nxt.in_features:
                raise ShapeError(
                    f"layer {prev.name} emits {prev.out_features} features "
                    f"but {nxt.name} expects {nxt.in_features}"
                )
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
        if self.frozen:
            self.freeze()

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].in_features] + [layer.out_features for layer in self.layers]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_features

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def freeze(self) -> "ModelParams":
        self.frozen = True
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelParams":
        layers = [
            Layer(
                l.name,
                Tensor(l.weight.data.copy(), requires_grad=l.weight.requires_grad),
                Tensor(l.bias.data.copy(), requires_grad=l.bias.requires_grad),
                l.activation,
            )
            for l in self.layers
        ]
        return ModelParams(layers, self.role, self.frozen)


@dataclass
class TeacherEnsemble:
    """Frozen full-precision teachers that agree on the class count."""

    teachers: list[ModelParams] = field(default_factory=list)

    def __post_init__(self):
        if not self.teachers:
            raise ValueError("a teacher ensemble needs at least one teacher")
        classes = {t.num_classes for t in self.teachers}
        if len(classes) != 1:
            raise ValueError(f"teachers disagree on class count: {sorted(classes)}")
        for t in self.teachers:
            t.role = "teacher"
            t.freeze()

    def __len__(self) -> int:
        return len(self.teachers)

    @property
    def num_classes(self) -> int:
        return self.teachers[0].num_classes

    def logits(self, x) -> list[np.ndarray]:
        return [forward(t, x).data for t in self.teachers]

    def checksums(self) -> list[str]:
        return [t.checksum() for t in self.teachers]


def build_mlp(
    widths: Sequence[int], seed: int, role: str = "student", frozen: bool | None = None
) -> ModelParams:
    """ReLU MLP with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.

    The final layer has no activation, so the model emits logits.
    """
    widths = list(widths)
    if len(widths) < 2:
        raise ValueError(f"need input and output widths, got {widths}")
    if any(w < 1 for w in widths):
        raise ValueError(f"widths must be positive, got {widths}")
    if frozen is None:
        frozen = role == "teacher"
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=(fan_out,))
        act = "none" if i == len(widths) - 2 else "relu"
        layers.append(Layer(f"fc{i}", T.parameter(w), T.parameter(b), act))
    return ModelParams(layers, role=role, frozen=frozen)


def forward(
    model: ModelParams, x, quant: QuantPlan | None = None, training: bool = False
) -> Tensor:
    """Logits of ``model`` on a ``[B, d]`` batch.

    With ``quant`` the weights and hidden activations are fake-quantized;
    ``training`` lets running activation ranges update.
    """
    h = T.as_tensor(x)
    if h.data.ndim != 2 or h.shape[1] != model.layers[0].in_features:
        raise ShapeError(f"input shape {h.shape} does not match first layer width {model.layers[0].in_features}")
    for i, layer in enumerate(model.layers):
        w = layer.weight
        if quant is not None:
            if i > 0:
                h = quant.activation(f"{layer.name}.in", h, training)
            w = quant.weight(layer)
        h = T.add(T.matmul(h, w), layer.bias)
        if layer.activation == "relu":
            h = T.relu(h)
    return h
