import struct
import zlib

import numpy as np
import pytest

from gorqat.checkpoint import (
    MAGIC,
    BadMagicError,
    ChecksumError,
    TruncatedCheckpointError,
    VersionMismatchError,
    decode,
    encode,
    load_checkpoint,
    save_checkpoint,
    sidecar_path,
)
from gorqat.models import build_mlp, forward
from gorqat.quantizer import quantize_model
from gorqat.regularizer import GoRState


@pytest.fixture
def quantized():
    model = build_mlp([2, 8, 8, 2], seed=0)
    plan = quantize_model(model, 4, 4, warmup=0)
    forward(model, np.random.default_rng(0).normal(size=(16, 2)), plan, training=True)
    return model, GoRState(0.75, 1.5, eta=1e-2, step_count=9), plan


class TestRoundTrip:
    def test_bytes_stable(self, quantized):
        blob = encode(*quantized)
        assert encode(*decode(blob)) == blob

    def test_values_exact(self, quantized):
        model, state, plan = quantized
        m2, s2, p2 = decode(encode(model, state, plan))
        assert m2.checksum() == model.checksum()
        assert s2 == state
        assert p2.weights == plan.weights and p2.activations == plan.activations

    def test_four_bit_restore(self, quantized):
        _, _, plan = decode(encode(*quantized))
        assert plan.wbits == 4 and all(s.bits == 4 for s in plan.weights.values())

    def test_layout_prefix(self, quantized):
        blob = encode(*quantized)
        magic, version, head_len = struct.unpack_from("<8sII", blob)
        assert (magic, version) == (MAGIC, 1)
        (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
        assert crc == zlib.crc32(blob[:-4])

    def test_model_only(self):
        model = build_mlp([2, 3, 2], seed=1, role="teacher")
        m2, state, plan = decode(encode(model))
        assert state is None and plan is None and m2.frozen

    def test_sidecar(self, tmp_path, quantized):
        path = save_checkpoint(tmp_path / "ck.bin", *quantized, metadata={"seed": 3})
        assert sidecar_path(path).read_text().strip().startswith("{")
        assert load_checkpoint(path)[1].alpha_kd == 1.5


class TestCorruption:
    def test_bad_magic(self, quantized):
        blob = bytearray(encode(*quantized))
        blob[0:8] = b"NOTCKPT!"
        with pytest.raises(BadMagicError):
            decode(bytes(blob))

    def test_version(self, quantized):
        blob = bytearray(encode(*quantized))
        blob[8:12] = struct.pack("<I", 2)
        with pytest.raises(VersionMismatchError):
            decode(bytes(blob))

    @pytest.mark.parametrize("keep", [0, 10, 40, -1])
    def test_truncated(self, quantized, keep):
        blob = encode(*quantized)
        with pytest.raises(TruncatedCheckpointError):
            decode(blob[:keep])

    def test_checksum(self, quantized):
        blob = bytearray(encode(*quantized))
        blob[-20] ^= 0xFF
        with pytest.raises(ChecksumError):
            decode(bytes(blob))

    def test_errors_are_oserrors(self):
        with pytest.raises(OSError):
            decode(b"")
