"""Victim model generation: random-init, trained-on-random-data, import.

"Random" victims follow the benchmark convention: initialise, then train
100 epochs of full-batch gradient descent on randomly generated data.
Everything is seeded and pure numpy, so regenerating a suite yields
bit-identical files.
"""
from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from .model import VictimModel
from .nnxio import save_model

TRAIN_EPOCHS = 100
TRAIN_LR = 0.01
N_RAND_PER_INPUT = 10   # training pairs per input dimension

# The ten random benchmark models: widths 5..50, two hidden layers,
# inputs twice the width.
SUITE_WIDTHS = tuple(range(5, 51, 5))


@dataclasses.dataclass
class GenSpec:
    layer_dims: tuple
    mode: str = "random-init"     # random-init | random-trained
    seed: int = 0
    epochs: int = TRAIN_EPOCHS


def _init_params(dims, rng):
    weights, biases = [], []
    for i in range(len(dims) - 1):
        fan_in = dims[i]
        weights.append(rng.standard_normal((dims[i + 1], dims[i])) / np.sqrt(fan_in))
        biases.append(np.zeros(dims[i + 1]))
    return weights, biases


def _train_random(weights, biases, dims, rng, epochs, lr=TRAIN_LR):
    """Full-batch gradient descent on random regression data, squared loss."""
    n = N_RAND_PER_INPUT * dims[0]
    X = rng.standard_normal((n, dims[0]))
    y = rng.standard_normal(n)
    losses = []
    L = len(weights)
    for _ in range(epochs):
        acts = [X]
        H = X
        for i in range(L):
            Z = H @ weights[i].T + biases[i]
            H = Z if i == L - 1 else np.maximum(Z, 0.0)
            acts.append(H)
        out = acts[-1][:, 0]
        err = out - y
        losses.append(float(np.mean(err ** 2)))
        grad = (2.0 / n) * err[:, None]   # dL/d out
        for i in reversed(range(L)):
            H_in = acts[i]
            gW = grad.T @ H_in
            gb = grad.sum(axis=0)
            grad_h = grad @ weights[i]
            if i > 0:
                grad_h = grad_h * (acts[i] > 0)
            weights[i] = weights[i] - lr * gW
            biases[i] = biases[i] - lr * gb
            grad = grad_h
    return weights, biases, losses


def generate(spec: GenSpec):
    """Deterministic victim per the spec; returns (model, training losses)."""
    dims = tuple(int(d) for d in spec.layer_dims)
    rng = np.random.default_rng(spec.seed)
    weights, biases = _init_params(dims, rng)
    losses = []
    if spec.mode == "random-trained":
        weights, biases, losses = _train_random(weights, biases, dims, rng,
                                                spec.epochs)
        provenance = "random-trained"
    elif spec.mode == "random-init":
        provenance = "random-init"
    else:
        raise ValueError(f"unknown generation mode {spec.mode!r}")
    model = VictimModel.from_arrays(weights, biases, provenance, spec.seed)
    return model, losses


def suite_model_name(width: int) -> str:
    return f"{2 * width}-{width}x2-1"


def generate_suite(out_dir: str, suite: str = "table-random",
                   mode: str = "random-trained", seed_base: int = 1000):
    """Write the ten benchmark models plus a manifest; returns the manifest."""
    if suite not in ("table-random", "table1"):
        raise ValueError(f"unknown suite {suite!r}")
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for width in SUITE_WIDTHS:
        dims = (2 * width, width, width, 1)
        spec = GenSpec(layer_dims=dims, mode=mode, seed=seed_base + width)
        model, _ = generate(spec)
        name = suite_model_name(width)
        path = os.path.join(out_dir, f"{name}.nnx")
        save_model(model, path)
        layer_params = [int(dims[i + 1] * (dims[i] + 1)) for i in range(3)]
        entries.append({
            "name": name,
            "file": os.path.basename(path),
            "dims": list(dims),
            "width": width,
            "seed": spec.seed,
            "mode": mode,
            # layer-2 parameter count is the benchmark column; totals are
            # reported too since the convention is easy to misread
            "params_layer2": layer_params[1],
            "params_per_layer": layer_params,
            "params_total": sum(layer_params),
        })
    manifest = {"suite": suite, "mode": mode, "models": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest
