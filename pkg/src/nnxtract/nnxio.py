"""NNX v1 model file format: bit-exact float64 round trip.

Layout (little-endian, no padding):

    magic  4 bytes  "NNXW" (4E 4E 58 57)
    u32    version = 1
    u32    number of dims (L+1)
    u32[]  layer dims d_0..d_L
    u8     provenance code (0 random-init, 1 random-trained, 2 imported)
    u64    training seed
    then for each layer i = 1..L:
        f64[d_i * d_{i-1}]  weights, row-major (row k = neuron k's inputs)
        f64[d_i]            biases

Extracted models append one JSON block: u32 byte length followed by UTF-8
payload holding per-neuron confidence/status/scale metadata.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .model import VictimModel, PROVENANCE_CODES, PROVENANCE_NAMES

MAGIC = b"NNXW"
VERSION = 1
MAX_DIM = 1 << 24
MAX_LAYERS = 255


class NnxFormatError(ValueError):
    """Base error for NNX parsing; `code` names the failure class."""

    code = "FORMAT"


class MagicMismatchError(NnxFormatError):
    code = "MAGIC_MISMATCH"


class VersionMismatchError(NnxFormatError):
    code = "VERSION_MISMATCH"


class TruncatedPayloadError(NnxFormatError):
    code = "TRUNCATED_PAYLOAD"


class DimOverflowError(NnxFormatError):
    code = "DIM_OVERFLOW"


def _pack_model(model: VictimModel, extra_json: dict | None) -> bytes:
    dims = model.layer_dims
    parts = [MAGIC, struct.pack("<II", VERSION, len(dims))]
    parts.append(struct.pack(f"<{len(dims)}I", *dims))
    parts.append(struct.pack("<BQ", PROVENANCE_CODES[model.provenance], model.seed))
    for W, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    if extra_json is not None:
        payload = json.dumps(extra_json).encode("utf-8")
        parts.append(struct.pack("<I", len(payload)))
        parts.append(payload)
    return b"".join(parts)


def save_model(model: VictimModel, path: str, extra_json: dict | None = None) -> None:
    """Write a model atomically (temp file + rename) in NNX v1 format."""
    blob = _pack_model(model, extra_json)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".nnx.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise TruncatedPayloadError(
                f"need {n} bytes at offset {self.off}, file has {len(self.blob)}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out


def load_model(path: str, with_extra: bool = False):
    """Load an NNX v1 file; returns VictimModel (and the JSON block if asked)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise MagicMismatchError(f"{path}: bad magic")
    version, ndims = struct.unpack("<II", r.take(8))
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    if not 3 <= ndims <= MAX_LAYERS:
        raise DimOverflowError(f"{path}: {ndims} dims out of range")
    dims = struct.unpack(f"<{ndims}I", r.take(4 * ndims))
    if any(d == 0 or d > MAX_DIM for d in dims):
        raise DimOverflowError(f"{path}: dim out of range in {dims}")
    prov_code, seed = struct.unpack("<BQ", r.take(9))
    if prov_code not in PROVENANCE_NAMES:
        raise NnxFormatError(f"{path}: unknown provenance code {prov_code}")
    weights, biases = [], []
    for i in range(1, ndims):
        n_w = dims[i] * dims[i - 1]
        if n_w * 8 > len(blob):
            raise DimOverflowError(f"{path}: layer {i} larger than file")
        W = np.frombuffer(r.take(8 * n_w), dtype="<f8").reshape(dims[i], dims[i - 1])
        b = np.frombuffer(r.take(8 * dims[i]), dtype="<f8")
        weights.append(W.copy())
        biases.append(b.copy())
    model = VictimModel.from_arrays(weights, biases, PROVENANCE_NAMES[prov_code], seed)
    extra = None
    if r.off < len(blob):
        (n_json,) = struct.unpack("<I", r.take(4))
        extra = json.loads(r.take(n_json).decode("utf-8"))
    return (model, extra) if with_extra else model


def save_extracted(extracted, path: str) -> None:
    """Persist an ExtractedModel: NNX payload plus per-neuron metadata block."""
    Ws, bs = extracted.as_weight_arrays()
    model = VictimModel.from_arrays(Ws, bs, "imported", 0)
    meta = {
        "kind": "extracted",
        "layers": [
            {
                "index": layer.layer_index,
                "confidence": [float(c) for c in layer.confidence],
                "status": list(layer.status),
                "sign": [int(s) for s in layer.signs],
                "precision": [float(p) for p in layer.achieved_precision],
                "scale": [float(s) for s in extracted.alignment[i]],
            }
            for i, layer in enumerate(extracted.layers)
        ],
    }
    save_model(model, path, extra_json=meta)
