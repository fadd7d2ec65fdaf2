"""The only gateway through which extraction code touches the victim.

Every victim evaluation anywhere in the pipeline goes through `query` or
`query_batch` and increments exactly one phase counter per evaluation.
Branch extractions own child oracles whose counters are summed into the
parent on merge.
"""
from __future__ import annotations

import threading

import numpy as np

from .extracted import ExtractedLayer
from .model import VictimModel, forward, forward_batch

PHASES = ("critpoint", "signature", "sign", "precision", "final_layer", "verify")

CRITPOINT = "critpoint"
SIGNATURE = "signature"
SIGN = "sign"
PRECISION = "precision"
FINAL_LAYER = "final_layer"
VERIFY = "verify"


class Oracle:
    """Query-counting black box around a victim model."""

    def __init__(self, victim: VictimModel):
        self._victim = victim
        self._lock = threading.Lock()
        self._counts = {p: 0 for p in PHASES}

    @property
    def input_dim(self) -> int:
        return self._victim.layer_dims[0]

    @property
    def layer_dims(self):
        return self._victim.layer_dims

    def query(self, x, phase: str) -> float:
        if phase not in self._counts:
            raise ValueError(f"unknown phase {phase!r}")
        y = forward(self._victim, x)  # validates finiteness before counting
        with self._lock:
            self._counts[phase] += 1
        return y

    def query_batch(self, X, phase: str) -> np.ndarray:
        if phase not in self._counts:
            raise ValueError(f"unknown phase {phase!r}")
        X = np.asarray(X, dtype=np.float64)
        y = forward_batch(self._victim, X)
        with self._lock:
            self._counts[phase] += X.shape[0]
        return y

    @property
    def total(self) -> int:
        with self._lock:
            return sum(self._counts.values())

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self._counts)

    def child(self) -> "Oracle":
        """Isolated counter set over the same victim, for branch extractions."""
        return Oracle(self._victim)

    def merge_child(self, child: "Oracle") -> None:
        counts = child.snapshot()
        with self._lock:
            for p, n in counts.items():
                self._counts[p] += n


# ---------------------------------------------------------------------------
# Quantization of extracted parameters consumed by sign extraction.
# The victim always evaluates in float64; only the attack's own copies of
# extracted weights/biases are rounded (then re-widened for arithmetic).
# ---------------------------------------------------------------------------

B64 = "b64"
B32 = "b32"
B16 = "b16"
QUANT_MODES = (B64, B32, B16)


def quantize_array(a: np.ndarray, mode: str):
    """Round-to-nearest-even at the target precision, re-widened to float64.

    Values that overflow to inf in float16 fall back to their float32
    rounding, and the positions are reported so callers can flag neurons
    rather than abort.
    """
    a = np.asarray(a, dtype=np.float64)
    if mode == B64:
        return a.copy(), np.zeros(a.shape, dtype=bool)
    if mode == B32:
        return a.astype(np.float32).astype(np.float64), np.zeros(a.shape, dtype=bool)
    if mode == B16:
        q16 = a.astype(np.float16).astype(np.float64)
        overflow = ~np.isfinite(q16) & np.isfinite(a)
        if overflow.any():
            q32 = a.astype(np.float32).astype(np.float64)
            q16 = np.where(overflow, q32, q16)
        return q16, overflow
    raise ValueError(f"unknown quantization mode {mode!r}")


def quantize_params(layer: ExtractedLayer, mode: str):
    """Quantized copy of an extracted layer plus per-neuron overflow flags."""
    if mode == B64:
        return layer.copy(), np.zeros(layer.width, dtype=bool)
    sig, over_w = quantize_array(layer.signatures, mode)
    bias, over_b = quantize_array(layer.bias_multiples, mode)
    out = layer.copy()
    out.signatures = sig
    out.bias_multiples = bias
    flags = over_w.any(axis=1) | over_b
    return out, flags
