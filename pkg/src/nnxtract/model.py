"""Victim and extracted network representations with exact float64 evaluation.

A network is a chain of affine maps with ReLU between them and a scalar
logit output.  Layer dims follow the "10-5x2-1" convention: d_0 inputs,
hidden widths d_1..d_{L-1}, and d_L = 1.
"""
from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

# Pre-activations closer to a boundary than this make the local linear
# region ill-defined (below binary64 boundary-refinement accuracy).
BOUNDARY_TOLERANCE = 1e-12

PROVENANCE_CODES = {"random-init": 0, "random-trained": 1, "imported": 2}
PROVENANCE_NAMES = {v: k for k, v in PROVENANCE_CODES.items()}


class AmbiguousRegionError(ValueError):
    """A point sits too close to an activation boundary for a stable local map."""


def _as_input(x, d0: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (d0,):
        raise ValueError(f"input has shape {x.shape}, expected ({d0},)")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    return x


@dataclasses.dataclass(frozen=True)
class VictimModel:
    """Ground-truth layered affine+ReLU network with a scalar logit."""

    weights: tuple  # weights[i]: (d_{i+1} x d_i) float64, i = 0..L-1
    biases: tuple   # biases[i]:  (d_{i+1},)       float64
    provenance: str = "random-init"
    seed: int = 0

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights/biases layer count mismatch")
        if len(self.weights) < 2:
            raise ValueError("need at least one hidden layer")
        dims = [self.weights[0].shape[1]]
        for W, b in zip(self.weights, self.biases):
            if W.ndim != 2 or b.ndim != 1 or W.shape[0] != b.shape[0]:
                raise ValueError("inconsistent layer shapes")
            if W.shape[1] != dims[-1]:
                raise ValueError("layer input dim mismatch")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError("non-finite parameters")
            dims.append(W.shape[0])
        if dims[-1] != 1:
            raise ValueError("output must be a scalar logit")
        if self.provenance not in PROVENANCE_CODES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "layer_dims", tuple(dims))

    @property
    def n_layers(self) -> int:
        """Number of affine layers L (hidden layers plus output)."""
        return len(self.weights)

    @classmethod
    def from_arrays(cls, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray],
                    provenance: str = "random-init", seed: int = 0) -> "VictimModel":
        W = tuple(np.ascontiguousarray(w, dtype=np.float64) for w in weights)
        B = tuple(np.ascontiguousarray(b, dtype=np.float64) for b in biases)
        return cls(W, B, provenance, seed)


def forward(model: VictimModel, x) -> float:
    """Evaluate the scalar logit f(x), left to right, entirely in float64."""
    h = _as_input(x, model.layer_dims[0])
    last = model.n_layers - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        h = W @ h + b
        if i != last:
            np.maximum(h, 0.0, out=h)
    return float(h[0])


def forward_batch(model: VictimModel, X: np.ndarray) -> np.ndarray:
    """Evaluate f on rows of X; returns a vector of logits."""
    H = np.asarray(X, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] != model.layer_dims[0]:
        raise ValueError(f"batch has shape {H.shape}, expected (n, {model.layer_dims[0]})")
    if not np.all(np.isfinite(H)):
        raise ValueError("batch contains non-finite values")
    last = model.n_layers - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        H = H @ W.T + b
        if i != last:
            np.maximum(H, 0.0, out=H)
    return H[:, 0]


def forward_prefix(model: VictimModel, x, upto_layer: int) -> np.ndarray:
    """Post-ReLU hidden vector after layer `upto_layer` (0 returns x itself)."""
    if not 0 <= upto_layer < model.n_layers:
        raise ValueError(f"layer index {upto_layer} out of range")
    h = _as_input(x, model.layer_dims[0])
    for i in range(upto_layer):
        h = model.weights[i] @ h + model.biases[i]
        np.maximum(h, 0.0, out=h)
    return h


def local_linear_map(layers: Sequence[tuple], x, *,
                     boundary_tolerance: float = BOUNDARY_TOLERANCE):
    """Affine map (M, m) of the ReLU prefix `layers` on x's linear region.

    `layers` is a sequence of (W, b) pairs, all followed by ReLU.  Returns
    M and m with prefix(x + v) = M v + m + ... exactly, for v small enough
    to stay inside the region.  Rows of inactive neurons are zeroed.

    Raises AmbiguousRegionError if any pre-activation magnitude is below
    `boundary_tolerance`: the caller should perturb x and retry.
    """
    x = np.asarray(x, dtype=np.float64)
    M = np.eye(x.shape[0])
    h = x
    for W, b in layers:
        g = W @ h + b
        scale = 1.0 + np.abs(g).max(initial=0.0)
        if np.any(np.abs(g) < boundary_tolerance * scale):
            raise AmbiguousRegionError("pre-activation within boundary tolerance")
        mask = g > 0
        M = (W * mask[:, None]) @ M
        h = g * mask
    m = h - M @ x
    return M, m


def victim_prefix_layers(model: VictimModel, upto_layer: int):
    """(W, b) pairs of the victim's first `upto_layer` ReLU layers."""
    return list(zip(model.weights[:upto_layer], model.biases[:upto_layer]))


@dataclasses.dataclass
class NeuronVerification:
    matched_row: int
    scale: float
    max_rel_error: float
    sign_correct: bool


@dataclasses.dataclass
class VerificationResult:
    """Per-neuron match quality of an extraction against ground truth."""

    layers: list            # list of lists of NeuronVerification
    functional_max_err: float
    n_check: int

    @property
    def all_matched(self) -> bool:
        return all(n.matched_row >= 0 for layer in self.layers for n in layer)

    @property
    def all_signs_correct(self) -> bool:
        return all(n.sign_correct for layer in self.layers for n in layer)

    def max_aligned_error(self) -> float:
        return max((n.max_rel_error for layer in self.layers for n in layer),
                   default=float("inf"))


def _match_rows(true_rows: np.ndarray, ext_rows: np.ndarray):
    """Greedy one-to-one assignment by absolute cosine similarity.

    Ties break toward the lowest index pair, which keeps the result
    deterministic.
    """
    nt, ne = true_rows.shape[0], ext_rows.shape[0]
    tn = true_rows / np.maximum(np.linalg.norm(true_rows, axis=1, keepdims=True), 1e-300)
    en = ext_rows / np.maximum(np.linalg.norm(ext_rows, axis=1, keepdims=True), 1e-300)
    sim = np.abs(en @ tn.T)
    assignment = [-1] * ne
    used = set()
    order = sorted(((-sim[e, t], e, t) for e in range(ne) for t in range(nt)))
    for _, e, t in order:
        if assignment[e] == -1 and t not in used:
            assignment[e] = t
            used.add(t)
    return assignment


def verify_extraction(truth: VictimModel, extracted, tol: float = 1e-6,
                      n_check: int = 1000, rng=None) -> VerificationResult:
    """Compare an ExtractedModel against ground truth up to per-neuron scale.

    An extracted hidden layer lives in its own coordinates: each of its
    input coordinates is a true previous-layer neuron scaled by that
    neuron's own extraction scale, in extraction order.  The comparison
    walks the layers forward carrying that permutation and scaling, so
    every extracted row is matched (by maximal absolute cosine similarity,
    greedy one-to-one) against the true rows expressed in the same
    coordinates, then aligned with the positive scale minimising relative
    error over (row, bias) jointly.  Functional agreement is the max
    |f - f_hat| over `n_check` standard-normal inputs.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    layers_out = []
    # h_ext[k] = h_true[perm[k]] / scale[k]; identity at the input layer
    perm = np.arange(truth.layer_dims[0])
    scale = np.ones(truth.layer_dims[0])
    for li, layer in enumerate(extracted.layers):
        W_true = truth.weights[li][:, perm] * scale[None, :]
        b_true = truth.biases[li]
        rows_ext = layer.signed_rows()
        bias_ext = layer.signed_biases()
        assignment = _match_rows(W_true, rows_ext)
        per_neuron = []
        next_perm = np.zeros(rows_ext.shape[0], dtype=int)
        next_scale = np.ones(rows_ext.shape[0])
        for k in range(rows_ext.shape[0]):
            t = assignment[k]
            if t < 0:
                per_neuron.append(NeuronVerification(-1, 0.0, float("inf"), False))
                continue
            v_true = np.concatenate([W_true[t], [b_true[t]]])
            v_ext = np.concatenate([rows_ext[k], [bias_ext[k]]])
            denom = float(v_ext @ v_ext)
            s = float(v_ext @ v_true) / denom if denom > 0 else 0.0
            sign_ok = s > 0
            err = np.abs(abs(s) * v_ext * np.sign(s) - v_true).max()
            rel = err / max(np.abs(v_true).max(), 1e-300)
            per_neuron.append(NeuronVerification(t, abs(s), float(rel), bool(sign_ok)))
            next_perm[k] = t
            next_scale[k] = abs(s) if abs(s) > 0 else 1.0
        layers_out.append(per_neuron)
        perm, scale = next_perm, next_scale

    X = rng.standard_normal((n_check, truth.layer_dims[0]))
    f_true = forward_batch(truth, X)
    f_ext = extracted.forward_batch(X)
    func_err = float(np.abs(f_true - f_ext).max())
    return VerificationResult(layers_out, func_err, n_check)
