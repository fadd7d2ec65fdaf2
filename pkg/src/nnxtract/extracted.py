"""Extracted-side network representations.

Extracted rows are scale-free: each is normalised so its entry of largest
magnitude is +/-1 (dividing by a fixed coordinate such as the first would
blow up precision whenever that coordinate is near zero).  A row together
with its resolved sign and bias multiple defines the same hyperplane as
the true neuron up to one positive scalar.
"""
from __future__ import annotations

import dataclasses

import numpy as np

SIGN_UNRESOLVED = 0

STATUS_EASY = "easy"
STATUS_HARD = "hard"
STATUS_BRANCH_RESOLVED = "branch_resolved"


def canonicalize_row(row: np.ndarray, bias: float = 0.0):
    """Rescale (row, bias) by a positive factor so max |row| entry is 1.

    Returns (row, bias, scale) where `scale` is the positive factor that
    was divided out.
    """
    row = np.asarray(row, dtype=np.float64)
    scale = float(np.abs(row).max())
    if scale <= 0.0:
        return row.copy(), float(bias), 1.0
    return row / scale, float(bias) / scale, scale


@dataclasses.dataclass
class ExtractedLayer:
    """One hidden layer's extraction state: rows, signs, biases, confidence."""

    layer_index: int                # 1-based, matching the d_i convention
    signatures: np.ndarray          # (d_i x d_{i-1}), canonical scale-free rows
    signs: np.ndarray               # per neuron: +1, -1, or 0 (unresolved)
    bias_multiples: np.ndarray      # per neuron, same scale as its signature row
    confidence: np.ndarray          # per neuron, in [0.5, 1.0]
    status: list                    # per neuron: easy | hard | branch_resolved
    achieved_precision: np.ndarray  # per neuron residual estimate
    witness_anchors: list = dataclasses.field(default_factory=list)
    # per neuron: a few input points known to sit on its boundary

    @property
    def width(self) -> int:
        return self.signatures.shape[0]

    def signed_rows(self) -> np.ndarray:
        s = np.where(self.signs == 0, 1, self.signs).astype(np.float64)
        return self.signatures * s[:, None]

    def signed_biases(self) -> np.ndarray:
        s = np.where(self.signs == 0, 1, self.signs).astype(np.float64)
        return self.bias_multiples * s

    def copy(self) -> "ExtractedLayer":
        return ExtractedLayer(
            self.layer_index,
            self.signatures.copy(),
            self.signs.copy(),
            self.bias_multiples.copy(),
            self.confidence.copy(),
            list(self.status),
            self.achieved_precision.copy(),
            [list(a) for a in self.witness_anchors],
        )


@dataclasses.dataclass
class ExtractedModel:
    """All hidden layers plus the exactly solved final affine map."""

    layers: list                    # ExtractedLayer for i = 1..L-1
    final_weights: np.ndarray       # (1 x d_{L-1})
    final_bias: float
    alignment: list                 # per layer: positive per-neuron scale factors

    @property
    def layer_dims(self):
        dims = [self.layers[0].signatures.shape[1]]
        dims += [layer.width for layer in self.layers]
        dims.append(1)
        return tuple(dims)

    def as_weight_arrays(self):
        Ws = [layer.signed_rows() for layer in self.layers]
        bs = [layer.signed_biases() for layer in self.layers]
        Ws.append(np.atleast_2d(self.final_weights))
        bs.append(np.atleast_1d(np.float64(self.final_bias)))
        return Ws, bs

    def forward_batch(self, X: np.ndarray) -> np.ndarray:
        H = np.asarray(X, dtype=np.float64)
        for layer in self.layers:
            H = np.maximum(H @ layer.signed_rows().T + layer.signed_biases(), 0.0)
        return H @ np.atleast_2d(self.final_weights).reshape(-1) + self.final_bias

    def forward(self, x) -> float:
        return float(self.forward_batch(np.asarray(x, dtype=np.float64)[None, :])[0])


class ExtractedPrefix:
    """Signed, completed layers 1..i-1 used as the attack's own forward model.

    All evaluation here is free: it never touches the victim.  Weight and
    bias arrays may be quantized copies of the extraction state; arithmetic
    always re-widens to float64.
    """

    def __init__(self, weights=(), biases=()):
        self.weights = [np.asarray(W, dtype=np.float64) for W in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @classmethod
    def from_layers(cls, layers) -> "ExtractedPrefix":
        return cls([l.signed_rows() for l in layers], [l.signed_biases() for l in layers])

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0] if self.weights else -1

    def hidden(self, x: np.ndarray) -> np.ndarray:
        """Post-ReLU output of the prefix (identity when the prefix is empty)."""
        h = np.asarray(x, dtype=np.float64)
        for W, b in zip(self.weights, self.biases):
            h = np.maximum(W @ h + b, 0.0)
        return h

    def hidden_batch(self, X: np.ndarray) -> np.ndarray:
        H = np.asarray(X, dtype=np.float64)
        for W, b in zip(self.weights, self.biases):
            H = np.maximum(H @ W.T + b, 0.0)
        return H

    def preacts(self, x: np.ndarray) -> list:
        """Per-layer pre-activation vectors along the prefix."""
        out = []
        h = np.asarray(x, dtype=np.float64)
        for W, b in zip(self.weights, self.biases):
            g = W @ h + b
            out.append(g)
            h = np.maximum(g, 0.0)
        return out

    def active_masks(self, x: np.ndarray) -> list:
        return [g > 0 for g in self.preacts(x)]

    def local_map(self, x: np.ndarray, masks=None):
        """Local affine map M, m of the prefix at x (rows of inactive neurons zeroed).

        If `masks` is given it overrides the activation pattern, pinning the
        map to a specific region even if x sits on a boundary.
        """
        x = np.asarray(x, dtype=np.float64)
        M = np.eye(x.shape[0])
        h = x
        for li, (W, b) in enumerate(zip(self.weights, self.biases)):
            g = W @ h + b
            mask = masks[li] if masks is not None else g > 0
            M = (W * mask[:, None]) @ M
            h = g * mask
        return M, h - M @ x

    def preact_gradient(self, x: np.ndarray, j: int) -> np.ndarray:
        """Input-space gradient of the last prefix layer's neuron-j pre-activation.

        Defined even where the neuron is inactive (it is the gradient of the
        affine pre-activation, not of the ReLU output).
        """
        sub = ExtractedPrefix(self.weights[:-1], self.biases[:-1])
        M, _ = sub.local_map(x)
        return self.weights[-1][j] @ M

    def extend(self, W, b) -> "ExtractedPrefix":
        return ExtractedPrefix(self.weights + [np.asarray(W, dtype=np.float64)],
                               self.biases + [np.asarray(b, dtype=np.float64)])
