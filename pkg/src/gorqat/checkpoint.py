"""Single-file binary checkpoints.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"GORQCKPT"
    8       4     uint32 format version (currently 1)
    12      4     uint32 header length H
    16      H     UTF-8 JSON header: layer names/shapes/activations, model role,
                  GoR step count, quant plan layout, float count N
    16+H    8N    float64 payload: per layer weight (row-major) then bias;
                  then alpha_task, alpha_kd, eta, clip_floor if a GoR state is
                  present; then x_min, x_max, momentum per quant spec
                  (weights first, then activations; NaN for an unset range)
    16+H+8N 4     uint32 CRC-32 of every preceding byte

An optional ``<path>.json`` sidecar carries free-form run metadata.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from pathlib import Path

import numpy as np

from .models import Layer, ModelParams
from .quantizer import QuantPlan, QuantSpec
from .regularizer import GoRState
from .tensor import Tensor

MAGIC = b"GORQCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


class CheckpointError(OSError):
    """Base class for unreadable checkpoints."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def _spec_header(name: str, spec: QuantSpec) -> dict:
    return {"name": name, "bits": spec.bits, "range_source": spec.range_source, "observed": spec.observed}


def _spec_floats(spec: QuantSpec) -> list[float]:
    lo = math.nan if spec.x_min is None else spec.x_min
    hi = math.nan if spec.x_max is None else spec.x_max
    return [lo, hi, spec.momentum]


def encode(model: ModelParams, state: GoRState | None = None, plan: QuantPlan | None = None) -> bytes:
    floats: list[np.ndarray] = []
    layers = []
    for layer in model.layers:
        layers.append({"name": layer.name, "shape": list(layer.weight.shape), "activation": layer.activation})
        floats.extend((layer.weight.data.ravel(), layer.bias.data.ravel()))
    header: dict = {"model": {"role": model.role, "frozen": model.frozen, "layers": layers}, "gor": None, "quant": None}
    if state is not None:
        header["gor"] = {"step_count": state.step_count}
        floats.append(np.array([state.alpha_task, state.alpha_kd, state.eta, state.clip_floor]))
    if plan is not None:
        header["quant"] = {
            "wbits": plan.wbits,
            "abits": plan.abits,
            "warmup": plan.warmup,
            "momentum": plan.momentum,
            "ste": plan.ste,
            "update_ranges": plan.update_ranges,
            "weights": [_spec_header(k, v) for k, v in plan.weights.items()],
            "activations": [_spec_header(k, v) for k, v in plan.activations.items()],
        }
        for spec in list(plan.weights.values()) + list(plan.activations.values()):
            floats.append(np.array(_spec_floats(spec)))
    payload = np.concatenate(floats).astype("<f8") if floats else np.zeros(0, "<f8")
    header["n_floats"] = int(payload.size)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(head)) + head + payload.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> tuple[ModelParams, GoRState | None, QuantPlan | None]:
    if len(blob) < _PREFIX.size:
        raise TruncatedCheckpointError(f"checkpoint is {len(blob)} bytes, shorter than its fixed prefix")
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    head_end = _PREFIX.size + head_len
    if len(blob) < head_end:
        raise TruncatedCheckpointError(f"header runs past end of file at byte {len(blob)}")
    try:
        header = json.loads(blob[_PREFIX.size:head_end].decode("utf-8"))
        n_floats = int(header["n_floats"])
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    end = head_end + 8 * n_floats
    if len(blob) != end + 4:
        raise TruncatedCheckpointError(f"expected {end + 4} bytes, found {len(blob)}")
    (crc,) = struct.unpack_from("<I", blob, end)
    if crc != zlib.crc32(blob[:end]):
        raise ChecksumError("checksum mismatch")

    values = np.frombuffer(blob, dtype="<f8", count=n_floats, offset=head_end).astype(np.float64)
    pos = 0

    def take(n: int) -> np.ndarray:
        nonlocal pos
        out = values[pos:pos + n]
        pos += n
        return out

    m = header["model"]
    trainable = not m["frozen"]
    layers = []
    for entry in m["layers"]:
        fan_in, fan_out = entry["shape"]
        w = Tensor(take(fan_in * fan_out).reshape(fan_in, fan_out).copy(), requires_grad=trainable)
        b = Tensor(take(fan_out).copy(), requires_grad=trainable)
        layers.append(Layer(entry["name"], w, b, entry["activation"]))
    model = ModelParams(layers, role=m["role"], frozen=m["frozen"])

    state = None
    if header["gor"] is not None:
        a_t, a_k, eta, floor = take(4)
        state = GoRState(float(a_t), float(a_k), float(eta), float(floor), header["gor"]["step_count"])

    plan = None
    if header["quant"] is not None:
        q = header["quant"]
        plan = QuantPlan(q["wbits"], q["abits"], warmup=q["warmup"], momentum=q["momentum"], ste=q["ste"], update_ranges=q["update_ranges"])
        for table, entries in ((plan.weights, q["weights"]), (plan.activations, q["activations"])):
            for entry in entries:
                lo, hi, mom = (float(v) for v in take(3))
                table[entry["name"]] = QuantSpec(
                    entry["bits"],
                    entry["range_source"],
                    None if math.isnan(lo) else lo,
                    None if math.isnan(hi) else hi,
                    mom,
                    entry["observed"],
                )
    return model, state, plan


def save_checkpoint(
    path,
    model: ModelParams,
    state: GoRState | None = None,
    plan: QuantPlan | None = None,
    metadata: dict | None = None,
) -> Path:
    path = Path(path)
    path.write_bytes(encode(model, state, plan))
    if metadata is not None:
        sidecar_path(path).write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[ModelParams, GoRState | None, QuantPlan | None]:
    return decode(Path(path).read_bytes())


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")
