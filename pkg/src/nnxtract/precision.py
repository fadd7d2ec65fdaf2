"""Optional precision refinement of extracted rows.

Signature extraction alone lands around 1e-8 relative error.  This pass
re-derives witnesses that sit on the *victim's* boundary (binary searches
in small random intervals around the extracted model's own witnesses) and
refits the row by least squares through them, repeating while the
regression loss drops.  Target: residuals at or below 2^-35.

Runs after a layer's signs are fixed and never changes sign decisions;
the pipeline swaps refined rows in atomically per neuron.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .critpoints import (IntervalDegenerateError, LostBreakpointError,
                         refine_witness)
from .extracted import canonicalize_row
from .oracle import PRECISION
from .sign import SignContext, generate_sign_witnesses

THETA_INIT = 0.1
THETA_GROW = 1.1
THETA_SHRINK = 0.5
MAX_THETA_ADAPTATIONS = 50
MAX_ROUNDS = 10
TARGET_RESIDUAL = 2.0 ** -35
WITNESS_REJECT_VALUE = 1e-5     # drop witnesses whose current residual exceeds this
COORD_REJECT_VALUE = 1e-5       # reject refits that push a live coordinate below this


@dataclasses.dataclass
class RefinementState:
    neuron: int
    witness_set: list
    theta: float
    residual_before: float
    residual_after: float
    accepted: bool
    rounds: int = 0
    flagged: int = 0            # witnesses kept unrefined after adaptation ran out


def regression_loss(row: np.ndarray, bias: float, hidden: np.ndarray) -> float:
    """Sum plus max of |row . h_i + bias| over the witness set.

    The max term keeps a single outlier from hiding behind many near-zero
    residuals.
    """
    r = np.abs(hidden @ row + bias)
    return float(r.sum() + r.max(initial=0.0))


def refine_witness_set(oracle, ctx: SignContext, neuron: int, n: int, rng,
                       theta_init: float = THETA_INIT):
    """True-victim witnesses near the extracted boundary of one neuron.

    Each extracted-model witness is converted by searching for a victim
    slope change in [x - theta*v, x + theta*v] along a random direction v.
    theta halves when the interval catches a foreign kink and grows by 1.1
    when it catches none; witnesses that never convert are kept as-is and
    flagged.
    """
    approx = generate_sign_witnesses(ctx, neuron, n, rng)
    refined, flagged = [], 0
    preacts = ctx.preacts_target  # extracted target-layer pre-activations
    for w in approx:
        theta = theta_init
        found = None
        for _ in range(MAX_THETA_ADAPTATIONS):
            v = rng.standard_normal(w.x_star.shape[0])
            v /= np.linalg.norm(v)
            try:
                cand = refine_witness(oracle, w.x_star, v, phase=PRECISION,
                                      bracket_halfwidth=theta)
            except (LostBreakpointError, IntervalDegenerateError):
                theta *= THETA_GROW   # no solutions found: widen
                continue
            g = np.abs(preacts(cand.x_star[None, :])[0])
            others = np.delete(g, neuron)
            if g[neuron] > 0.5 * others.min(initial=np.inf):
                # converted to a critical point of a nearer foreign neuron
                theta *= THETA_SHRINK
                continue
            found = cand
            break
        if found is None:
            flagged += 1
            found = w
        refined.append(found)
    return refined, flagged


def refit_row(prefix_hidden, current_row: np.ndarray, current_bias: float):
    """Least-squares refit of (row, bias) through refined witnesses.

    Solves H x = [1...1] (each true witness satisfies row.h = -bias, so x
    recovers row / -bias); hyperplanes through the origin fall back to the
    smallest singular vector of [H | 1].  Returns (row, bias) or None when
    rejected: rank deficiency, or a proposal that moves a live coordinate
    below the rejection threshold.

    Witnesses whose residual under the current row stands out are foreign
    critical points and get dropped.  The gate is the absolute rejection
    value once the row has converged, but stays relative to the median
    residual early on, when the row's own error dominates every residual.
    """
    H = prefix_hidden
    res = np.abs(H @ current_row + current_bias)
    gate = max(WITNESS_REJECT_VALUE, 5.0 * float(np.median(res)))
    keep = res <= gate
    if keep.sum() < current_row.shape[0] + 1:
        return None
    H = H[keep]
    if np.linalg.matrix_rank(H, tol=1e-12) < min(H.shape):
        return None
    z, _, _, _ = np.linalg.lstsq(H, np.ones(H.shape[0]), rcond=None)
    fit_res = float(np.linalg.norm(H @ z - 1.0))
    if fit_res > 1e-6 * np.sqrt(H.shape[0]) or not np.all(np.isfinite(z)):
        # near-zero bias makes the =1 normalisation blow up; use the
        # homogeneous form instead
        design = np.concatenate([H, np.ones((H.shape[0], 1))], axis=1)
        _, _, Vt = np.linalg.svd(design, full_matrices=False)
        row, bias, _ = canonicalize_row(Vt[-1][:-1], float(Vt[-1][-1]))
    else:
        row, bias, _ = canonicalize_row(z, -1.0)
    if float(row @ current_row) < 0:
        row, bias = -row, -bias
    live = np.abs(current_row) >= COORD_REJECT_VALUE
    if np.any(live & (np.abs(row) < COORD_REJECT_VALUE)):
        return None
    return row, bias


def refine_neuron(oracle, ctx: SignContext, neuron: int, rng,
                  prefix=None, max_rounds: int = MAX_ROUNDS,
                  target: float = TARGET_RESIDUAL) -> RefinementState:
    """Iteratively sharpen one neuron's row; accepts only loss reductions."""
    prefix = prefix if prefix is not None else ctx.prefix
    d_prev = ctx.rows.shape[1]
    n = d_prev + 5
    row = ctx.rows[neuron].copy()
    bias = float(ctx.biases[neuron])
    state = RefinementState(neuron, [], THETA_INIT, np.inf, np.inf, False)
    for rnd in range(max_rounds):
        state.rounds = rnd + 1
        witnesses, flagged = refine_witness_set(oracle, ctx, neuron, n, rng)
        state.flagged += flagged
        state.witness_set = witnesses
        X = np.stack([w.x_star for w in witnesses])
        H = prefix.hidden_batch(X) if prefix.depth else X
        loss_now = regression_loss(row, bias, H)
        state.residual_before = min(state.residual_before, loss_now)
        proposal = refit_row(H, row, bias)
        if proposal is not None:
            new_row, new_bias = proposal
            loss_new = regression_loss(new_row, new_bias, H)
            if loss_new < loss_now:
                row, bias = new_row, new_bias
                state.accepted = True
                loss_now = loss_new
        state.residual_after = loss_now
        if loss_now <= target * len(witnesses):
            break
        # fresh witnesses next round come from the improved row
        ctx.rows[neuron] = row
        ctx.biases[neuron] = bias
    ctx.rows[neuron] = row
    ctx.biases[neuron] = bias
    return state
