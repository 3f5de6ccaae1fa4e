"""Uniform affine fake quantization with straight-through gradients.

A value is mapped to an integer code ``q = round(clip((x - x_min) / s, 0, 2**n - 1))``
with ``s = (x_max - x_min) / (2**n - 1)`` and dequantized back to ``s * q + x_min``.
All arithmetic stays in float64; only the rounding is simulated.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .tensor import Tensor, as_tensor

if TYPE_CHECKING:
    from .models import Layer, ModelParams

MIN_BITS, MAX_BITS = 2, 8
PASSTHROUGH_BITS = 32
PER_TENSOR = "minmax"
RUNNING = "running"
STE_MODES = ("clipped", "identity")


class QuantStateError(RuntimeError):
    """Fake quantization was requested before the range was known."""


def check_bits(bits: int) -> None:
    if bits != PASSTHROUGH_BITS and not MIN_BITS <= bits <= MAX_BITS:
        raise ValueError(f"unsupported bit-width {bits}; expected {MIN_BITS}..{MAX_BITS} or {PASSTHROUGH_BITS}")


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    range_source: str = PER_TENSOR
    x_min: float | None = None
    x_max: float | None = None
    momentum: float = 0.9
    observed: int = 0

    def __post_init__(self):
        if not MIN_BITS <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in {MIN_BITS}..{MAX_BITS}, got {self.bits}")
        if self.range_source not in (PER_TENSOR, RUNNING):
            raise ValueError(f"unknown range source {self.range_source!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")

    @property
    def levels(self) -> int:
        return 2**self.bits - 1

    @property
    def finalized(self) -> bool:
        return self.x_min is not None and self.x_max is not None

    @property
    def degenerate(self) -> bool:
        return self.finalized and not self.x_max > self.x_min

    @property
    def scale(self) -> float:
        if not self.finalized:
            raise QuantStateError("scale of an uncalibrated QuantSpec")
        return (self.x_max - self.x_min) / self.levels


def calibrate(spec: QuantSpec, batch) -> QuantSpec:
    """Return ``spec`` with its range updated from ``batch``.

    Per-tensor specs take the batch extrema; running specs blend them in with
    an exponential moving average (the first batch initializes the range).
    """
    values = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot calibrate on an empty batch")
    lo, hi = float(values.min()), float(values.max())
    if spec.range_source == RUNNING and spec.finalized:
        m = spec.momentum
        lo = m * spec.x_min + (1.0 - m) * lo
        hi = m * spec.x_max + (1.0 - m) * hi
    return dataclasses.replace(spec, x_min=lo, x_max=hi, observed=spec.observed + 1)


def quantize_codes(x, spec: QuantSpec) -> np.ndarray:
    """Integer codes in ``[0, 2**bits - 1]`` for the values of ``x``."""
    if not spec.finalized:
        raise QuantStateError("fake_quant on a spec whose range has not been calibrated")
    values = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if spec.degenerate:
        return np.zeros(values.shape, dtype=np.int64)
    codes = np.rint(np.clip((values - spec.x_min) / spec.scale, 0, spec.levels))
    return codes.astype(np.int64)


def fake_quant(x, spec: QuantSpec, ste: str = "clipped") -> Tensor:
    """Quantize-dequantize ``x`` on the tape.

    The backward pass is a straight-through estimator: the incoming gradient
    passes unchanged for values inside ``[x_min, x_max]`` and is zeroed outside.
    ``ste="identity"`` passes it everywhere. A degenerate range maps every
    value to ``x_min`` with zero gradient.
    """
    if ste not in STE_MODES:
        raise ValueError(f"ste must be one of {STE_MODES}, got {ste!r}")
    x = as_tensor(x)
    codes = quantize_codes(x, spec)
    if spec.degenerate:
        out = np.full(x.shape, spec.x_min)
        mask = np.zeros(x.shape)
    else:
        # top code lands on x_max exactly instead of within an ulp of it
        out = np.where(codes == spec.levels, spec.x_max, spec.scale * codes + spec.x_min)
        if ste == "clipped":
            mask = ((x.data >= spec.x_min) & (x.data <= spec.x_max)).astype(np.float64)
        else:
            mask = np.ones(x.shape)
    return Tensor.from_op(out, (x,), lambda g: x._accumulate(g * mask), "fake_quant")


@dataclass
class QuantizedView:
    """Dequantized view of one source tensor under a spec."""

    source: Tensor
    spec: QuantSpec
    values: np.ndarray


@dataclass
class QuantPlan:
    """Every fake-quant site of one student model.

    Weight specs are re-derived from the current weights on every forward.
    Activation specs track a running range; while fewer than ``warmup``
    batches have been observed in training they only observe and the
    activation passes through unquantized.
    """

    wbits: int
    abits: int
    weights: dict[str, QuantSpec] = field(default_factory=dict)
    activations: dict[str, QuantSpec] = field(default_factory=dict)
    warmup: int = 20
    momentum: float = 0.9
    ste: str = "clipped"
    update_ranges: bool = True

    def weight(self, layer: "Layer") -> Tensor:
        if layer.name not in self.weights:
            return layer.weight
        spec = calibrate(dataclasses.replace(self.weights[layer.name], observed=0), layer.weight)
        self.weights[layer.name] = spec
        return fake_quant(layer.weight, spec, self.ste)

    def activation(self, site: str, h: Tensor, training: bool = False) -> Tensor:
        if site not in self.activations:
            return h
        spec = self.activations[site]
        if training and self.update_ranges:
            spec = calibrate(spec, h)
            self.activations[site] = spec
            if spec.observed <= self.warmup:
                return h
        return fake_quant(h, spec, self.ste)

    def views(self, model: "ModelParams") -> list[QuantizedView]:
        out = []
        for layer in model.layers:
            if layer.name in self.weights:
                spec = calibrate(self.weights[layer.name], layer.weight)
                values = fake_quant(layer.weight.detach(), spec, self.ste).data
                out.append(QuantizedView(layer.weight, spec, values))
        return out


def activation_sites(model: "ModelParams") -> list[str]:
    """Inputs of every layer after the first, i.e. the hidden activations."""
    return [f"{layer.name}.in" for layer in model.layers[1:]]


def quantize_model(
    model: "ModelParams",
    wbits: int,
    abits: int,
    *,
    warmup: int = 20,
    momentum: float = 0.9,
    ste: str = "clipped",
    exempt_first_last: bool = False,
) -> QuantPlan | None:
    """Attach fake-quant sites to ``model``; returns ``None`` when both widths are 32."""
    check_bits(wbits)
    check_bits(abits)
    if wbits == PASSTHROUGH_BITS and abits == PASSTHROUGH_BITS:
        return None
    plan = QuantPlan(wbits, abits, warmup=warmup, momentum=momentum, ste=ste)
    if wbits != PASSTHROUGH_BITS:
        last = len(model.layers) - 1
        for i, layer in enumerate(model.layers):
            if exempt_first_last and i in (0, last):
                continue
            plan.weights[layer.name] = QuantSpec(wbits, PER_TENSOR)
    if abits != PASSTHROUGH_BITS:
        for site in activation_sites(model):
            plan.activations[site] = QuantSpec(abits, RUNNING, momentum=momentum)
    return plan
