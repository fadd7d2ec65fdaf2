import struct

import numpy as np
import pytest

from nnxtract.nnxio import (DimOverflowError, MagicMismatchError,
                            TruncatedPayloadError, VersionMismatchError,
                            load_model, save_extracted, save_model)
from conftest import random_victim


def test_round_trip_bit_exact(tmp_path, victim_10551):
    path = str(tmp_path / "m.nnx")
    save_model(victim_10551, path)
    back = load_model(path)
    for W1, W2 in zip(victim_10551.weights, back.weights):
        assert np.array_equal(W1, W2)
        assert W1.tobytes() == W2.tobytes()
    for b1, b2 in zip(victim_10551.biases, back.biases):
        assert b1.tobytes() == b2.tobytes()
    assert back.provenance == victim_10551.provenance
    assert back.seed == victim_10551.seed


def test_round_trip_preserves_odd_values(tmp_path):
    m = random_victim((3, 2, 1), seed=1)
    W0 = m.weights[0].copy()
    W0[0, 0] = np.nextafter(1.0, 2.0)          # LSB-sensitive value
    W0[1, 1] = -0.0
    W0[0, 1] = 5e-324                          # subnormal
    from nnxtract.model import VictimModel
    m = VictimModel.from_arrays([W0, m.weights[1]], list(m.biases))
    path = str(tmp_path / "odd.nnx")
    save_model(m, path)
    back = load_model(path)
    assert back.weights[0].tobytes() == W0.tobytes()


def test_magic_mismatch(tmp_path, victim_10551):
    path = str(tmp_path / "m.nnx")
    save_model(victim_10551, path)
    blob = bytearray(open(path, "rb").read())
    blob[:4] = b"XXXX"
    open(path, "wb").write(bytes(blob))
    with pytest.raises(MagicMismatchError):
        load_model(path)


def test_version_mismatch(tmp_path, victim_10551):
    path = str(tmp_path / "m.nnx")
    save_model(victim_10551, path)
    blob = bytearray(open(path, "rb").read())
    blob[4:8] = struct.pack("<I", 9)
    open(path, "wb").write(bytes(blob))
    with pytest.raises(VersionMismatchError):
        load_model(path)


def test_truncated_payload(tmp_path, victim_10551):
    path = str(tmp_path / "m.nnx")
    save_model(victim_10551, path)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:len(blob) - 13])
    with pytest.raises(TruncatedPayloadError):
        load_model(path)


def test_dim_overflow(tmp_path, victim_10551):
    path = str(tmp_path / "m.nnx")
    save_model(victim_10551, path)
    blob = bytearray(open(path, "rb").read())
    blob[12:16] = struct.pack("<I", 1 << 30)   # d_0 absurdly large
    open(path, "wb").write(bytes(blob))
    with pytest.raises(DimOverflowError):
        load_model(path)


def test_extracted_metadata_block(tmp_path, victim_10551):
    from nnxtract.extracted import ExtractedLayer, ExtractedModel
    layers = []
    for li in range(2):
        W = victim_10551.weights[li]
        layers.append(ExtractedLayer(
            layer_index=li + 1, signatures=W.copy(),
            signs=np.ones(W.shape[0], dtype=int),
            bias_multiples=victim_10551.biases[li].copy(),
            confidence=np.full(W.shape[0], 0.8),
            status=["easy"] * W.shape[0],
            achieved_precision=np.full(W.shape[0], 1e-8)))
    ext = ExtractedModel(layers=layers,
                         final_weights=victim_10551.weights[2][0].copy(),
                         final_bias=float(victim_10551.biases[2][0]),
                         alignment=[[1.0] * 5, [1.0] * 5])
    path = str(tmp_path / "ext.nnx")
    save_extracted(ext, path)
    model, meta = load_model(path, with_extra=True)
    assert meta["kind"] == "extracted"
    assert meta["layers"][0]["confidence"] == [0.8] * 5
    assert meta["layers"][1]["status"] == ["easy"] * 5
    assert np.array_equal(model.weights[0], victim_10551.weights[0])


def test_atomic_write_no_partial_file(tmp_path, victim_10551):
    # a failed write must not leave a half-written target behind
    path = str(tmp_path / "sub" / "m.nnx")
    with pytest.raises(FileNotFoundError):
        save_model(victim_10551, path)
    assert not (tmp_path / "sub").exists()
