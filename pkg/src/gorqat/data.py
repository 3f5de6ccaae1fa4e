"""Datasets: synthetic Gaussian blobs, CSV feature tables and IDX image/label pairs."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    """Malformed input file; the message names the byte offset."""


class DataError(ValueError):
    """Well-formed input whose content violates the dataset invariants."""


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for split, y in (("train", self.y_train), ("test", self.y_test)):
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise DataError(f"{split} labels outside [0, {self.num_classes})")
        if self.x_train.shape[1:] != self.x_test.shape[1:]:
            raise DataError(f"train features {self.x_train.shape} and test features {self.x_test.shape} disagree")

    @property
    def num_features(self) -> int:
        return self.x_train.shape[1]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name == "train":
            return self.x_train, self.y_train
        if name == "test":
            return self.x_test, self.y_test
        raise ValueError(f"unknown split {name!r}")


def _split(x: np.ndarray, y: np.ndarray, num_classes: int, seed: int, test_fraction: float, provenance: dict) -> Dataset:
    order = np.random.default_rng(seed).permutation(len(y))
    n_test = int(round(test_fraction * len(y)))
    test, train = order[:n_test], order[n_test:]
    return Dataset(x[train], y[train], x[test], y[test], num_classes, provenance)


def blobs(k: int = 2, n: int = 1000, sigma: float = 0.45, seed: int = 0, dim: int = 2, test_fraction: float = 0.2) -> Dataset:
    """``k`` isotropic Gaussian clusters of spread ``sigma``.

    Cluster centres sit evenly on the unit circle in the first two
    coordinates, so two classes are 2 apart. Classes are balanced.
    """
    if k < 2 or n < k or dim < 2 or not sigma > 0:
        raise ValueError(f"invalid blob parameters k={k} n={n} dim={dim} sigma={sigma}")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(k) / k
    centres = np.zeros((k, dim))
    centres[:, 0], centres[:, 1] = np.cos(angles), np.sin(angles)
    y = np.arange(n) % k
    x = centres[y] + sigma * rng.standard_normal((n, dim))
    prov = {"source": "blobs", "k": k, "n": n, "sigma": sigma, "seed": seed, "dim": dim}
    return _split(x, y, k, seed, test_fraction, prov)


def read_csv(path, num_classes: int | None = None, seed: int = 0, test_fraction: float = 0.2) -> Dataset:
    """Header ``f0,...,fd,label`` then one numeric row per sample."""
    raw = Path(path).read_bytes()
    lines = raw.splitlines(keepends=True)
    if not lines:
        raise ParseError(f"{path}: empty file at byte 0")
    header = [c.strip() for c in lines[0].decode("utf-8").strip().split(",")]
    expected = [f"f{i}" for i in range(len(header) - 1)] + ["label"]
    if len(header) < 2 or header != expected:
        raise ParseError(f"{path}: header at byte 0 must be f0,...,fd,label, got {','.join(header)}")
    offset = len(lines[0])
    xs, ys = [], []
    for line in lines[1:]:
        text = line.decode("utf-8").strip()
        if text:
            cells = text.split(",")
            try:
                if len(cells) != len(header):
                    raise ValueError(f"{len(cells)} fields, expected {len(header)}")
                feats = [float(c) for c in cells[:-1]]
                label = float(cells[-1])
                if label != int(label):
                    raise ValueError(f"label {cells[-1]!r} is not an integer")
            except ValueError as exc:
                raise ParseError(f"{path}: malformed row at byte {offset}: {exc}") from None
            xs.append(feats)
            ys.append(int(label))
        offset += len(line)
    if not ys:
        raise DataError(f"{path}: no samples")
    y = np.array(ys, dtype=np.int64)
    classes = int(y.max()) + 1 if num_classes is None else num_classes
    if y.min() < 0 or y.max() >= classes:
        raise DataError(f"{path}: label outside [0, {classes})")
    prov = {"source": "csv", "path": str(path), "seed": seed}
    return _split(np.array(xs, dtype=np.float64), y, classes, seed, test_fraction, prov)


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def parse_idx(blob: bytes) -> np.ndarray:
    """Decode one IDX file (big-endian header, any element type)."""
    if len(blob) < 4:
        raise ParseError(f"IDX file truncated at byte {len(blob)} (need 4-byte magic)")
    zero, code, ndim = struct.unpack_from(">HBB", blob, 0)
    if zero != 0 or code not in _IDX_TYPES:
        raise ParseError(f"bad IDX magic {blob[:4].hex()} at byte 0")
    if len(blob) < 4 + 4 * ndim:
        raise ParseError(f"IDX dimension table truncated at byte {len(blob)}")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    dtype = np.dtype(_IDX_TYPES[code])
    start = 4 + 4 * ndim
    count = int(np.prod(dims)) if dims else 1
    need = start + count * dtype.itemsize
    if len(blob) < need:
        raise ParseError(f"IDX payload truncated at byte {len(blob)}, expected {need} bytes")
    return np.frombuffer(blob, dtype=dtype, count=count, offset=start).reshape(dims)


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(
    images,
    labels,
    test_images=None,
    test_labels=None,
    num_classes: int | None = None,
    seed: int = 0,
    test_fraction: float = 0.2,
) -> Dataset:
    """IDX image/label pair(s); pixels are scaled to [0, 1] and flattened.

    Without an explicit test pair the samples are split by ``seed``.
    """

    def load(img_path, lbl_path):
        x = parse_idx(_read_maybe_gzip(img_path))
        y = parse_idx(_read_maybe_gzip(lbl_path))
        if y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise DataError(f"{img_path} holds {x.shape[0]} items but {lbl_path} has labels shaped {y.shape}")
        scale = 255.0 if x.dtype == np.uint8 else 1.0
        x = x.reshape(x.shape[0], -1).astype(np.float64) / scale
        return x, y.astype(np.int64)

    x, y = load(images, labels)
    prov = {"source": "idx", "images": str(images), "labels": str(labels), "seed": seed}
    if test_images is None:
        classes = int(y.max()) + 1 if num_classes is None else num_classes
        if y.min() < 0 or y.max() >= classes:
            raise DataError(f"{labels}: label outside [0, {classes})")
        return _split(x, y, classes, seed, test_fraction, prov)
    xt, yt = load(test_images, test_labels)
    classes = int(max(y.max(), yt.max())) + 1 if num_classes is None else num_classes
    prov.update(test_images=str(test_images), test_labels=str(test_labels))
    return Dataset(x, y, xt, yt, classes, prov)


def ingest(source: str, **params) -> Dataset:
    """Dispatch on provenance: ``blobs``, ``csv`` or ``idx``."""
    if source == "blobs":
        return blobs(**params)
    if source == "csv":
        return read_csv(**params)
    if source == "idx":
        return read_idx(**params)
    raise ValueError(f"unknown data source {source!r}")
