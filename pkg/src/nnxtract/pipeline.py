"""End-to-end extraction: per-layer signature -> sign flow, hard-neuron
branch-and-verify, final-layer linear solve, and report assembly.

Layer order is strict: layer i+1 never starts before layer i's signs are
fixed or covered by a branch assignment.  Witnesses from the general
critical-point search depend only on the victim, so one shared stream
feeds every branch of a layer; targeted searches and signature probes are
per-branch and booked to isolated child counters that merge into the
parent when the branch finishes.
"""
from __future__ import annotations

import dataclasses
import itertools
import logging
import os
import time

import numpy as np

from . import critpoints as cp
from . import signature as sig
from .extracted import (ExtractedLayer, ExtractedModel, ExtractedPrefix,
                        STATUS_BRANCH_RESOLVED, STATUS_EASY, STATUS_HARD)
from .oracle import (B32, B64, CRITPOINT, FINAL_LAYER, PHASES, SIGN, SIGNATURE,
                     quantize_params)
from .precision import refine_neuron
from .sign import (SignContext, SignatureSuspectError, recover_sign)

log = logging.getLogger("nnxtract")


class ExtractionError(RuntimeError):
    """Extraction failed with layer context attached."""

    def __init__(self, message: str, layer: int = -1):
        super().__init__(message)
        self.layer = layer


class HardSetIncompleteError(ExtractionError):
    """No branch assignment survived verification."""


@dataclasses.dataclass
class ExtractionConfig:
    s: int = 15
    hard_threshold: float = 0.6
    rerun_threshold: float = 0.7
    quantization: str = B32
    precision_improve: bool = False
    max_hard: int = 10
    dedup: bool = True
    workers: int = 1
    line_range: float = 10.0
    max_lines_per_layer: int = 600
    max_targeted_attempts: int = 200
    residual_gate: float = 1e-3
    reject_fraction_limit: float = 0.25
    reject_min_count: int = 20
    retry_limit: int = 15
    total_invalid_limit: int = 15
    final_residual_limit: float = 1e-2
    verify_n: int = 1000


def _flatten_seed(seed):
    if isinstance(seed, tuple):
        out = ()
        for s in seed:
            out += _flatten_seed(s)
        return out
    return (int(seed) & ((1 << 63) - 1),)


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(_flatten_seed(seed) + key))


class WitnessSource:
    """Lazy shared stream of refined victim critical points.

    The stream depends only on the victim and the seed, never on any
    branch's extraction state, so branches of one layer consume it through
    independent cursors while its queries are booked once (to the owning
    oracle's CRITPOINT counter).
    """

    def __init__(self, oracle, seed, layer_index: int,
                 line_range: float = 10.0, max_lines: int = 600):
        self.oracle = oracle
        self.seed = seed
        self.layer_index = layer_index
        self.rng = _rng(seed, 0, layer_index)
        self.d0 = oracle.input_dim
        self.line_range = line_range
        self.max_lines = max_lines
        self.items = []
        self.lines_scanned = 0
        self._probes = {}

    def get(self, index: int):
        while index >= len(self.items) and self.lines_scanned < self.max_lines:
            self._scan_one()
        return self.items[index] if index < len(self.items) else None

    def probes(self, index: int, n_dirs: int):
        """Shared slope-jump measurements around witness `index`.

        Like the witnesses themselves these depend only on the victim, so
        one measurement serves every branch; queries are booked once, to
        this source's oracle.  Returns (dirs, y) or None when the point
        carries no measurable jump.
        """
        key = index
        if key in self._probes:
            entry = self._probes[key]
            return entry if entry is None or entry[0].shape[0] >= n_dirs else \
                self._measure(key, n_dirs)
        return self._measure(key, n_dirs)

    def _measure(self, index: int, n_dirs: int):
        w = self.items[index]
        rng = _rng(self.seed, 20, self.layer_index, index)
        try:
            entry = sig.probe_witness(self.oracle, w, n_dirs, rng)
        except sig.NullRowError:
            entry = None
        self._probes[index] = entry
        return entry

    def _scan_one(self):
        origin = self.rng.standard_normal(self.d0)
        direction = self.rng.standard_normal(self.d0)
        probe = cp.LineProbe(origin, direction, -self.line_range, self.line_range)
        self.lines_scanned += 1
        for bracket in cp.scan_line(self.oracle, probe):
            try:
                self.items.append(cp.bracket_witness(self.oracle, probe, bracket))
            except (cp.LostBreakpointError, cp.IntervalDegenerateError):
                continue


class _Meter:
    """Per-phase query deltas over one or two oracles (deduplicated)."""

    def __init__(self, *oracles):
        seen, self.oracles = set(), []
        for o in oracles:
            if id(o) not in seen:
                seen.add(id(o))
                self.oracles.append(o)
        self.start = [o.snapshot() for o in self.oracles]

    def delta(self) -> dict:
        out = {p: 0 for p in PHASES}
        for o, s0 in zip(self.oracles, self.start):
            now = o.snapshot()
            for p in PHASES:
                out[p] += now[p] - s0[p]
        return out


# ---------------------------------------------------------------------------
# Single-layer extraction
# ---------------------------------------------------------------------------

def _bias_consistency(pool: sig.SignaturePool, idx: int,
                      prefix: ExtractedPrefix, spread_tol: float = 1e-4):
    """Pure check that all member witnesses sit on the frozen hyperplane."""
    cluster = pool.clusters[idx]
    wits = [w for w in cluster.witnesses() if w is not None]
    if not wits or cluster.frozen_row is None:
        return True, 0.0
    row, bias = cluster.frozen_row[:-1], float(cluster.frozen_row[-1])
    ests = np.append([sig.recover_bias(row, w, prefix) for w in wits], bias)
    med = float(np.median(ests))
    ok = bool(np.abs(ests - med).max() <= spread_tol * (1.0 + abs(med)))
    return ok, bias


def _freeze_bias(pool: sig.SignaturePool, idx: int, prefix: ExtractedPrefix,
                 spread_tol: float = 1e-4) -> bool:
    """Fix the frozen cluster's bias, validating the row on the way.

    Every member witness must sit on the merged hyperplane, so the bias
    estimates -row.h(x_w) must agree across members.  Spread beyond the
    tolerance means the merge chained fragments of different neurons
    together: the freeze is rolled back and the most deviant member is
    split off.  Costs no queries (extracted-prefix evaluation only).
    """
    cluster = pool.clusters[idx]
    row, bias = cluster.frozen_row[:-1], float(cluster.frozen_row[-1])
    wits = [w for w in cluster.witnesses() if w is not None]
    ests = np.array([sig.recover_bias(row, w, prefix) for w in wits])
    if ests.size == 0:
        cluster.frozen_bias = bias
        return True
    med = float(np.median(ests))
    dev = np.abs(np.append(ests, bias) - med)
    if dev.max() > spread_tol * (1.0 + abs(med)):
        cluster.frozen_row = None
        cluster.scale_errors = None
        pool.touch()
        worst = int(np.argmax(np.abs(ests - med)))
        bad = None
        for m in cluster.members:
            if m.witness is wits[worst]:
                bad = m
                break
        if bad is not None and len(cluster.members) > 1:
            cluster.members = [m for m in cluster.members if m is not bad]
            cluster.covered[:] = False
            for m in cluster.members:
                cluster.covered |= m.mask
            nc = sig.ClusterState(pool.d_prev)
            nc.members.append(bad)
            nc.covered |= bad.mask
            pool.clusters.append(nc)
        return False
    # Joint refit over all member witnesses: each satisfies
    # row . h(x_w) + b = 0 with the full hidden vector (inactive
    # coordinates are exact zeros), so the (row, bias) ray is the
    # nullspace of [h | 1].  This beats chaining pairwise ratios whenever
    # enough independent witnesses exist.  No queries.
    d_prev = cluster.frozen_row.shape[0] - 1
    if len(wits) >= d_prev + 2:
        H = np.stack([prefix.hidden(w.x_star) for w in wits])
        design = np.concatenate([H, np.ones((len(wits), 1))], axis=1)
        _, S, Vt = np.linalg.svd(design, full_matrices=False)
        if S.size == d_prev + 1 and S[-2] > 1e-6 * S[0]:
            vec = Vt[-1]
            if float(vec[:-1] @ row) < 0:
                vec = -vec
            from .extracted import canonicalize_row
            r2, b2, _ = canonicalize_row(vec[:-1], float(vec[-1]))
            if np.abs(r2 - cluster.frozen_row[:-1]).max() < 1e-3:
                cluster.frozen_row = np.concatenate([r2, [b2]])
                bias = b2
    cluster.frozen_bias = bias
    return True


def _targeted_witness(oracle, prefix: ExtractedPrefix, pool: sig.SignaturePool,
                      cidx: int, rng, cfg: ExtractionConfig, attempts: list):
    """Walk a neuron's boundary toward regions that expose missing indices.

    From a known witness, steps inside the local boundary plane in the
    direction that raises a missing previous-layer neuron's pre-activation,
    re-refining against the victim after every step (the boundary bends
    wherever an earlier-layer state flips).  Witnesses whose activation
    pattern repeats existing coverage are discarded before any signature
    queries are spent on them.  `attempts` is a single-element budget list
    shared across calls for one neuron.
    """
    cluster = pool.clusters[cidx]
    if cluster.covered.all():
        return None  # NO_OP: nothing missing
    members = [m for m in cluster.members if m.witness is not None]
    if not members:
        return None
    base_i = 0
    while attempts[0] < cfg.max_targeted_attempts:
        base = members[base_i % len(members)]
        base_i += 1
        x = base.witness.x_star.copy()
        covered_vals = np.zeros(pool.d_prev - 1)
        rm = base.mask[:-1]
        covered_vals[rm] = base.values[:-1][rm]
        missing = np.flatnonzero(~cluster.covered[:-1])
        j = int(missing[int(rng.integers(len(missing)))])
        for step in range(24):
            if attempts[0] >= cfg.max_targeted_attempts:
                return None
            attempts[0] += 1
            scale = 1.0 + float(np.linalg.norm(x))
            try:
                M, _ = prefix.local_map(x)
            except Exception:
                break
            active_here = prefix.hidden(x) > 0
            vals = covered_vals * active_here
            normal = M.T @ vals
            nn = float(np.linalg.norm(normal))
            if nn < 1e-12:
                break
            normal /= nn
            grad = prefix.preact_gradient(x, j)
            walk = grad - float(grad @ normal) * normal
            wn = float(np.linalg.norm(walk))
            if wn < 1e-9 * max(float(np.linalg.norm(grad)), 1e-300):
                break  # missing neuron's gradient unreachable along this plane
            walk /= wn
            step = 0.25 * scale
            w = None
            for hw in (0.2 * scale, 0.45 * scale):
                try:
                    w = cp.refine_witness(oracle, x + step * walk, normal,
                                          bracket_halfwidth=hw)
                    break
                except (cp.LostBreakpointError, cp.IntervalDegenerateError):
                    continue
            if w is None:
                break
            x = w.x_star
            active = prefix.hidden(x) > 0
            if bool((active & ~cluster.covered[:-1]).any()):
                return w
    return None


def _confirm_layer1_row(oracle, row, bias, witness, rng):
    """Cross-check a candidate first-layer row away from its witness.

    A first-layer hyperplane is globally flat, so the row must reproduce
    when re-derived at distant points of its own plane.  A deeper layer's
    boundary piece can pass one such check when its region happens to
    stretch that far, so two independent re-derivations at different
    distances are required.  Returns the re-derived partials on success,
    else None.
    """
    if not cp.confirm_global_plane(oracle, row, bias, witness.x_star, rng):
        return None
    extras = []
    for dist in (4.0, 10.0):
        w2 = cp.distant_plane_witness(oracle, row, bias, witness.x_star, rng,
                                      distance=dist, attempts=3)
        if w2 is None:
            return None
        try:
            row2, bias2, _ = sig.layer1_signature(oracle, w2)
        except sig.NullRowError:
            return None
        if float(row @ row2) < 0:
            row2 = -row2
        if np.abs(row - row2).max() > sig.CLUSTER_EPSILON:
            return None
        extras.append(sig.make_partial(row2, np.ones(row.shape[0], bool),
                                       bias2, w2, residual=1e-9))
    return extras


def _harvest_boundary_equations(oracle, prefix: ExtractedPrefix,
                                cluster: sig.ClusterState, need: int, rng,
                                phase=CRITPOINT):
    """True-boundary points near a cluster's anchors, for the joint refit.

    Steps a small random distance inside the local boundary plane from a
    known witness and re-refines against the victim along the plane
    normal.  Each point costs a handful of queries and adds one exact
    equation row . h + b = 0.
    """
    anchors = [w for w in cluster.witnesses() if w is not None]
    if not anchors or cluster.frozen_row is None:
        return
    row = cluster.frozen_row[:-1]
    bias = float(cluster.frozen_bias if cluster.frozen_bias is not None
                 else cluster.frozen_row[-1])
    attempts = 0
    while len(cluster.extra_witnesses) < need and attempts < 4 * need:
        attempts += 1
        a = anchors[attempts % len(anchors)]
        x0 = a.x_star
        scale = 1.0 + float(np.linalg.norm(x0))
        if prefix.depth:
            M, _ = prefix.local_map(x0)
            normal = M.T @ row
        else:
            normal = row
        nn = float(np.linalg.norm(normal))
        if nn < 1e-12:
            return
        normal = normal / nn
        t = rng.standard_normal(x0.shape[0])
        t -= float(t @ normal) * normal
        tn = float(np.linalg.norm(t))
        if tn < 1e-12:
            continue
        x_try = x0 + (0.1 + 0.4 * rng.random()) * scale * t / tn
        try:
            w = cp.refine_witness(oracle, x_try, normal, phase=phase,
                                  bracket_halfwidth=0.1 * scale)
        except (cp.LostBreakpointError, cp.IntervalDegenerateError):
            continue
        h = prefix.hidden(w.x_star) if prefix.depth else w.x_star
        if abs(float(row @ h + bias)) <= 1e-6 * (1.0 + float(np.linalg.norm(h))):
            cluster.extra_witnesses.append(w)


def _joint_row_refit(cluster: sig.ClusterState, prefix: ExtractedPrefix) -> bool:
    """Refit a frozen row through every witness seen for its neuron.

    Each witness (members and deduplicated repeats alike) satisfies
    row . h(x_w) + b = 0 with the full hidden vector, so the ray is the
    null direction of [h | 1].  Solving them jointly removes the noise
    accumulated by chaining pairwise scale ratios.  No queries; keeps the
    old row when the system is too thin or disagrees with it.
    """
    if cluster.frozen_row is None:
        return False
    wits = [w for w in cluster.witnesses() if w is not None]
    wits += list(cluster.extra_witnesses)
    d_prev = cluster.frozen_row.shape[0] - 1
    if len(wits) < d_prev + 2:
        return False
    H = np.stack([prefix.hidden(w.x_star) if prefix.depth else w.x_star
                  for w in wits])
    design = np.concatenate([H, np.ones((len(wits), 1))], axis=1)
    # weight each boundary equation by its witness's positional precision:
    # weak-kink witnesses carry orders of magnitude more noise
    prec = np.array([max(w.boundary_residual, 1e-14) for w in wits])
    weights = (1.0 / prec)
    weights /= weights.max()
    wdesign = design * weights[:, None]
    _, S, Vt = np.linalg.svd(wdesign, full_matrices=False)
    if S.size < d_prev + 1 or S[-2] <= 1e-9 * S[0]:
        return False
    vec = Vt[-1]
    # one robustness pass: drop equations that stand far out of the fit
    # (foreign boundary points that slipped past the membership test)
    res = np.abs(wdesign @ vec)
    cut = 10.0 * max(float(np.median(res)), 1e-15)
    keep = res <= cut
    if keep.sum() >= d_prev + 2 and not keep.all():
        _, S2, Vt2 = np.linalg.svd(wdesign[keep], full_matrices=False)
        if S2.size >= d_prev + 1 and S2[-2] > 1e-9 * S2[0]:
            vec = Vt2[-1]
    if float(vec[:-1] @ cluster.frozen_row[:-1]) < 0:
        vec = -vec
    from .extracted import canonicalize_row
    r2, b2, _ = canonicalize_row(vec[:-1], float(vec[-1]))
    if np.abs(r2 - cluster.frozen_row[:-1]).max() > 1e-3:
        return False
    new_vec = np.concatenate([r2, [b2]])
    res_old = np.abs(design @ (cluster.frozen_row
                               / max(np.linalg.norm(cluster.frozen_row), 1e-300))).max()
    res_new = np.abs(design @ (new_vec / max(np.linalg.norm(new_vec), 1e-300))).max()
    if res_new <= res_old:
        cluster.frozen_row = new_vec
        cluster.frozen_bias = b2
        cluster.fit_quality = float(res_new)
        return True
    cluster.fit_quality = float(res_old)
    return False


def _repair_row(oracle, prefix: ExtractedPrefix, cluster: sig.ClusterState,
                d0: int, rng):
    """Targeted precision repair for one row that refit left imprecise.

    Noisy partials (weak slope jumps at far witnesses) occasionally leave a
    row around 1e-3 relative error.  Re-deriving true witnesses by bounded
    binary searches and refitting through them is exactly the precision
    machinery, applied to a single neuron on demand.
    """
    from .precision import refine_neuron
    row = cluster.frozen_row[:-1].copy()
    bias = float(cluster.frozen_bias)
    ctx = SignContext(prefix, row[None, :], np.array([bias]), mode=B64,
                      input_dim=d0)
    anchors = [w.x_star for w in cluster.witnesses() if w is not None][:6]
    ctx.anchors = [anchors]
    try:
        refine_neuron(oracle, ctx, 0, rng, prefix=prefix, max_rounds=3)
    except Exception:
        return
    new_row, new_bias = ctx.rows[0], float(ctx.biases[0])
    if np.abs(new_row - row).max() > 0.05:
        return  # wandered off: likely converted to a foreign boundary
    cluster.frozen_row = np.concatenate([new_row, [new_bias]])
    cluster.frozen_bias = new_bias
    cluster.fit_quality = 0.0


def _neuron_precision_estimate(cluster: sig.ClusterState) -> float:
    res = [m.residual for m in cluster.members] or [0.0]
    e = cluster.scale_errors
    scatter = 0.0
    if e is not None and np.isfinite(e).any():
        scatter = float(np.nanmax(np.where(np.isfinite(e), e, np.nan)))
    return max(float(np.max(res)), scatter, 1e-10)


def extract_layer(oracle, prefix: ExtractedPrefix, layer_index: int, dims,
                  cfg: ExtractionConfig, source: WitnessSource, seed,
                  in_branch: bool = False):
    """Extract one hidden layer's signatures, biases, and signs.

    Returns (ExtractedLayer, hard_neuron_indices, stats).  Raises
    SignatureSuspectError when the layer's evidence says the prefix it was
    given is wrong (the branch-pruning signal), and ExtractionError when a
    healthy extraction cannot complete within budget.
    """
    width = dims[layer_index]
    d_prev = dims[layer_index - 1]
    d0 = dims[0]
    is_layer1 = layer_index == 1
    last_hidden = layer_index == len(dims) - 2
    rng_sig = _rng(seed, 1, layer_index)
    rng_plane = _rng(seed, 5, layer_index)
    pool = sig.SignaturePool(width, d_prev + 1, d0)
    meter = _Meter(oracle, source.oracle)
    stats = {"witnesses": 0, "dedup_skips": 0, "rejected_partials": 0,
             "partials": 0, "lines": 0, "forced_merges": 0}
    t0 = time.perf_counter()

    def suspect_check():
        """Rejected-partial fraction: fires only where no deeper layer can
        pollute the stream (the last hidden layer)."""
        attempts = stats["partials"] + stats["rejected_partials"]
        if last_hidden and attempts >= cfg.reject_min_count:
            frac = stats["rejected_partials"] / attempts
            if frac > cfg.reject_fraction_limit:
                raise SignatureSuspectError(
                    f"layer {layer_index}: {frac:.0%} of partial signatures "
                    "rejected; prefix inconsistent with victim")

    def handle_witness(w, probe_fn=None) -> bool:
        """Returns True if the pool changed (progress).

        `probe_fn` lazily supplies shared slope-jump measurements for
        general-search witnesses; targeted witnesses probe through this
        extraction's own oracle.
        """
        if cp.classify_prefix_layer(prefix, w.x_star) is not None:
            return False
        h_star = prefix.hidden(w.x_star) if not is_layer1 else w.x_star
        if cfg.dedup:
            for idx, vec, bias in pool.completed_rows():
                if bias is not None and cp.plane_membership(vec[:-1], bias, h_star):
                    cluster = pool.clusters[idx]
                    cluster.discarded += 1
                    # A repeat costs nothing extra and its boundary
                    # equation still sharpens the final row fit.
                    if len(cluster.extra_witnesses) < 3 * d_prev + 10:
                        cluster.extra_witnesses.append(w)
                    stats["dedup_skips"] += 1
                    return False
        if is_layer1:
            return handle_layer1_witness(w)
        probes = probe_fn() if probe_fn is not None else None
        if probe_fn is not None and probes is None:
            return False  # no measurable jump at this point
        try:
            partial = sig.hidden_partial_signature(
                oracle, w, prefix, residual_gate=cfg.residual_gate,
                rng=rng_sig, probes=probes)
        except sig.RejectedPartialError as e:
            # only order-of-magnitude failures indict the prefix; a noisy
            # witness in the gray zone is just dropped
            if getattr(e, "residual", 1.0) > 10.0 * cfg.residual_gate:
                stats["rejected_partials"] += 1
                suspect_check()
            return False
        except (sig.RankDeficientError, sig.NullRowError):
            return False
        stats["partials"] += 1
        status, cidx, frozen = pool.insert(partial)
        if frozen is not None:
            _freeze_bias(pool, cidx, prefix)
        return status == "accept"

    def handle_layer1_witness(w) -> bool:
        """First-layer path: one witness carries the full row.

        The identity design gives no residual to gate on, so a brand-new
        candidate row is cross-checked by re-deriving it at a distant point
        of its own hyperplane: first-layer boundaries are globally flat and
        reproduce exactly; pollution from a nearby foreign kink does not.
        """
        try:
            row, bias, _ = sig.layer1_signature(oracle, w)
        except sig.NullRowError:
            return False
        partial = sig.make_partial(row, np.ones(d0, bool), bias, w,
                                   residual=1e-9)
        stats["partials"] += 1
        midx = pool.match_cluster(partial)
        if midx is not None and not pool.clusters[midx].non_target:
            status, cidx, frozen = pool.insert(partial)
            if frozen is not None:
                _freeze_bias(pool, cidx, prefix)
            return status == "accept"
        if midx is not None:
            # Matched a junked cluster.  One unlucky cross-check must not
            # bury a real neuron forever, so retry confirmation with this
            # fresh witness (a few times at most).
            cluster = pool.clusters[midx]
            if getattr(cluster, "confirm_attempts", 0) >= 5:
                cluster.discarded += 1
                return False
            cluster.confirm_attempts = getattr(cluster, "confirm_attempts", 0) + 1

        confirmed = _confirm_layer1_row(oracle, row, bias, w, rng_plane)
        if confirmed is None:
            if midx is None:
                _, cidx, _ = pool.insert(partial, freeze=False)
                if cidx >= 0:
                    pool.clusters[cidx].non_target = True
            else:
                pool.clusters[midx].discarded += 1
            return False
        if midx is not None:
            pool.clusters[midx].non_target = False
        _, cidx, _ = pool.insert(partial, freeze=False)
        if cidx < 0:
            return False
        for extra in confirmed:
            pool.force_insert(extra, cidx)
        if pool.freeze(cidx) is not None:
            _freeze_bias(pool, cidx, prefix)
        return True

    # -- general search ----------------------------------------------------
    cursor = 0
    stall = 0
    stall_limit = max(400, 40 * width)
    while not pool.all_complete():
        w = source.get(cursor)
        if w is None:
            break
        cursor += 1
        stats["witnesses"] += 1
        idx_now = cursor - 1
        pf = (None if is_layer1 else
              (lambda i=idx_now: source.probes(i, d_prev + 4)))
        if handle_witness(w, probe_fn=pf):
            stall = 0
        else:
            stall += 1
            if stall > stall_limit:
                break

    def _equations_thin():
        return any(len(c.members) + len(c.extra_witnesses) < d_prev + 3
                   for c in pool.clusters if c.complete and not c.non_target)

    # Completed rows refit best over many boundary equations; deduplicated
    # repeats provide them for only the cost of the shared line scans.
    extra_budget = 10 * width
    while pool.all_complete() and _equations_thin() and extra_budget > 0:
        w = source.get(cursor)
        if w is None:
            break
        cursor += 1
        extra_budget -= 1
        stats["witnesses"] += 1
        idx_now = cursor - 1
        handle_witness(w, probe_fn=None if is_layer1 else
                       (lambda i=idx_now: source.probes(i, d_prev + 4)))

    # -- targeted search ----------------------------------------------------
    def _force_merge_pass():
        def _validate(cidx):
            ok, bias = _bias_consistency(pool, cidx, prefix)
            if ok:
                pool.clusters[cidx].frozen_bias = bias
            return ok

        n = 0
        for cidx, u in pool.force_completion(validate=_validate):
            stats["forced_merges"] += 1
            n += 1
        return n

    rng_tgt = _rng(seed, 2, layer_index)
    if not pool.all_complete():
        _force_merge_pass()
    if not pool.all_complete():
        # most-covered clusters first: they are the true fragments
        order = sorted(pool.incomplete_indices(),
                       key=lambda c: -int(pool.clusters[c].covered.sum()))
        for cidx in order:
            if pool.all_complete():
                break
            cluster = pool.clusters[cidx]
            # Anchored scans: rare boundary pieces live near their known
            # witnesses, so probe short lines through them.  These queries
            # are branch-local by design (they depend on this extraction's
            # state, unlike the shared general stream).
            anchor_wits = [m.witness for m in cluster.members
                           if m.witness is not None]
            for li in range(min(24, 4 * len(anchor_wits) or 0)):
                if cluster.complete or not anchor_wits:
                    break
                aw = anchor_wits[li % len(anchor_wits)]
                d = rng_tgt.standard_normal(d0)
                probe = cp.LineProbe(aw.x_star, d / np.linalg.norm(d), -4.0, 4.0)
                for bracket in cp.scan_line(oracle, probe):
                    if cluster.complete:
                        break
                    try:
                        wb = cp.bracket_witness(oracle, probe, bracket)
                    except (cp.LostBreakpointError, cp.IntervalDegenerateError):
                        continue
                    handle_witness(wb)
            attempts = [0]
            while not pool.clusters[cidx].complete:
                w = _targeted_witness(oracle, prefix, pool, cidx, rng_tgt, cfg,
                                      attempts)
                if w is None:
                    break  # TARGETED_EXHAUSTED: fall back to forced merges
                if handle_witness(w):
                    _force_merge_pass()

    # -- forced completion (single-index overlaps) --------------------------
    if not pool.all_complete():
        _force_merge_pass()

    stats["lines"] = source.lines_scanned
    if not pool.all_complete():
        msg = (f"layer {layer_index}: {pool.n_complete()}/{width} signatures "
               f"complete after {stats['witnesses']} witnesses")
        if in_branch:
            raise SignatureSuspectError(msg)
        raise ExtractionError(msg, layer_index)

    completed = [(i, c) for i, c in enumerate(pool.clusters)
                 if c.complete and not c.non_target]
    if len(completed) > width:
        # phantom rows: keep the best-supported ones
        completed.sort(key=lambda ic: -len(ic[1].members))
        for i, c in completed[width:]:
            c.non_target = True
        completed = completed[:width]
    rng_harvest = _rng(seed, 12, layer_index)
    for idx, c in completed:
        need = d_prev + 3 - len(c.members)
        if len(c.extra_witnesses) < need:
            _harvest_boundary_equations(oracle, prefix, c, need, rng_harvest)
        _joint_row_refit(c, prefix)
    if not is_layer1:
        for k, (idx, c) in enumerate(completed):
            if getattr(c, "fit_quality", 1.0) > 1e-7:
                _repair_row(oracle, prefix, c, d0,
                            _rng(seed, 14, layer_index, k))
    pool.touch()
    rows = np.stack([c.frozen_row[:-1] for _, c in completed])
    biases = np.array([c.frozen_bias for _, c in completed])
    precisions = np.array([_neuron_precision_estimate(c) for _, c in completed])
    t_signature = time.perf_counter() - t0

    # -- sign recovery -------------------------------------------------------
    t1 = time.perf_counter()
    anchors = [[w.x_star for w in c.witnesses() if w is not None][:6]
               for _, c in completed]
    layer = ExtractedLayer(
        layer_index=layer_index,
        signatures=rows,
        signs=np.zeros(width, dtype=int),
        bias_multiples=biases,
        confidence=np.full(width, 0.5),
        status=[STATUS_HARD] * width,
        achieved_precision=precisions,
        witness_anchors=anchors,
    )
    q_layer, q_flags = quantize_params(layer, cfg.quantization)
    ctx = SignContext(_quantized_prefix(prefix, cfg.quantization),
                      q_layer.signatures, q_layer.bias_multiples,
                      mode=cfg.quantization, input_dim=d0, anchors=anchors)
    hard = []
    for k in range(width):
        rng_sign = _rng(seed, 3, layer_index, k)
        try:
            dec = recover_sign(oracle, ctx, k, cfg.s, rng_sign,
                               retry_limit=cfg.retry_limit,
                               total_invalid_limit=cfg.total_invalid_limit,
                               hard_threshold=cfg.hard_threshold,
                               rerun_threshold=cfg.rerun_threshold)
        except SignatureSuspectError as e:
            if in_branch:
                raise
            # one repair attempt: rebuild this neuron's signature fresh
            dec = _reextract_neuron(oracle, prefix, pool, completed[k][0], ctx,
                                    layer, k, cfg, source, cursor, seed)
            if dec is None:
                raise ExtractionError(
                    f"layer {layer_index} neuron {k}: signature suspect after "
                    f"re-extraction ({e})", layer_index)
        layer.signs[k] = dec.sign
        layer.confidence[k] = dec.confidence
        layer.status[k] = STATUS_HARD if dec.classification == "hard" else STATUS_EASY
        if dec.classification == "hard":
            hard.append(k)
    t_sign = time.perf_counter() - t1

    stats["time_signature"] = t_signature
    stats["time_sign"] = t_sign
    stats["time_precision"] = 0.0
    stats["final_check_queries"] = 0
    stats["polish_flips"] = []
    if last_hidden:
        # The next layer is affine: verify (and repair) every sign against
        # it right away, covering the hard set and any confidently wrong
        # neuron in one shot.
        nq, residual, flipped = polish_last_hidden_signs(
            oracle, prefix, layer, hard, cfg, seed)
        stats["final_check_queries"] = nq
        stats["polish_flips"] = flipped
        stats["polish_residual"] = residual
        if residual > cfg.final_residual_limit:
            msg = (f"layer {layer_index}: sign verification residual "
                   f"{residual:.2e} above limit")
            if in_branch:
                raise SignatureSuspectError(msg)
            raise ExtractionError(msg, layer_index)
        hard = []
    stats["queries"] = meter.delta()
    stats["quant_overflow"] = [int(i) for i in np.flatnonzero(q_flags)]
    return layer, hard, stats


def _quantized_prefix(prefix: ExtractedPrefix, mode: str) -> ExtractedPrefix:
    from .oracle import quantize_array
    Ws = [quantize_array(W, mode)[0] for W in prefix.weights]
    bs = [quantize_array(b, mode)[0] for b in prefix.biases]
    return ExtractedPrefix(Ws, bs)


def _reextract_neuron(oracle, prefix, pool, cluster_idx, ctx, layer, k, cfg,
                      source, cursor, seed):
    """Rebuild one suspect neuron's signature from fresh witnesses."""
    cluster = pool.clusters[cluster_idx]
    cluster.members = []
    cluster.covered[:] = False
    cluster.frozen_row = None
    pool.touch()
    budget = 400
    rng_sig = _rng(seed, 7, layer.layer_index, k)
    rng_plane = _rng(seed, 11, layer.layer_index, k)
    while budget and not cluster.complete:
        w = source.get(cursor)
        if w is None:
            return None
        cursor += 1
        budget -= 1
        if cp.classify_prefix_layer(prefix, w.x_star) is not None:
            continue
        try:
            if layer.layer_index == 1:
                row, bias, _ = sig.layer1_signature(oracle, w)
                partial = sig.make_partial(row, np.ones(len(row), bool), bias,
                                           w, residual=1e-9)
                midx = pool.match_cluster(partial)
                if midx is None:
                    # same cross-check as the main path: never re-admit a
                    # polluted row
                    if _confirm_layer1_row(oracle, row, bias, w, rng_plane) is None:
                        continue
            else:
                partial = sig.hidden_partial_signature(
                    oracle, w, prefix, residual_gate=cfg.residual_gate, rng=rng_sig)
        except (sig.RejectedPartialError, sig.RankDeficientError, sig.NullRowError):
            continue
        status, cidx, frozen = pool.insert(partial)
        if frozen is not None and cidx == cluster_idx:
            _freeze_bias(pool, cluster_idx, prefix)
    if not cluster.complete:
        return None
    layer.signatures[k] = cluster.frozen_row[:-1]
    layer.bias_multiples[k] = cluster.frozen_bias
    q_layer, _ = quantize_params(layer, cfg.quantization)
    ctx.rows[k] = q_layer.signatures[k]
    ctx.biases[k] = q_layer.bias_multiples[k]
    try:
        return recover_sign(oracle, ctx, k, cfg.s, _rng(seed, 8, layer.layer_index, k),
                            retry_limit=cfg.retry_limit,
                            total_invalid_limit=cfg.total_invalid_limit,
                            hard_threshold=cfg.hard_threshold,
                            rerun_threshold=cfg.rerun_threshold)
    except SignatureSuspectError:
        return None


def polish_last_hidden_signs(oracle, prefix: ExtractedPrefix,
                             layer: ExtractedLayer, hard, cfg: ExtractionConfig,
                             seed):
    """Verify and repair the last hidden layer's signs against the output.

    The layer after the last hidden one is affine, so sign verification is
    a linear solve: under the correct assignment the logits are an exact
    affine function of the layer's hidden vector, and any flipped neuron
    leaves a large residual.  The hard set is enumerated exactly; the
    remaining neurons get a greedy pass (single flips, then pairs if
    needed).  This is the degenerate case of branch-and-verify where each
    "branch extraction" costs one least-squares solve on shared queries.

    Returns (n_queries, residual, flipped_indices).
    """
    width = layer.width
    rng = _rng(seed, 9, layer.layer_index)
    d0 = prefix.weights[0].shape[1] if prefix.depth else layer.signatures.shape[1]
    n = max(100, 2 * (width + 1))
    X = rng.standard_normal((n, d0))
    Hpre = prefix.hidden_batch(X) if prefix.depth else X
    G = Hpre @ layer.signatures.T + layer.bias_multiples
    # neurons whose pre-activation rarely (or never) crosses zero on the
    # sample are weakly decided there; pull in points near their boundary
    pos = (G > 0).sum(axis=0)
    inactive = np.flatnonzero((pos < 10) | (pos > G.shape[0] - 10))
    if layer.witness_anchors and inactive.size:
        full = prefix.extend(layer.signed_rows(), layer.signed_biases())
        extra = []
        for j in inactive:
            if j < len(layer.witness_anchors):
                extra.extend(_active_points_near_anchors(
                    full, int(j), layer.witness_anchors[int(j)], count=4))
        if extra:
            X = np.concatenate([X, np.stack(extra)], axis=0)
            Hpre = prefix.hidden_batch(X) if prefix.depth else X
            G = Hpre @ layer.signatures.T + layer.bias_multiples
    n = X.shape[0]
    y = oracle.query_batch(X, FINAL_LAYER)
    ones = np.ones((n, 1))

    def residual_for(signs: np.ndarray) -> float:
        H = np.maximum(G * signs, 0.0)
        design = np.concatenate([H, ones], axis=1)
        sol, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
        r = float(np.linalg.norm(design @ sol - y))
        return r / max(float(np.linalg.norm(y)), 1e-300)

    signs = np.where(layer.signs == 0, 1, layer.signs).astype(float)
    best = residual_for(signs)
    # Flips are accepted only on decisive improvement: a wrong sign shows
    # up as an orders-of-magnitude residual drop, while noise-level
    # "improvements" on weakly observed neurons would overturn correct
    # majority votes.
    decisive = 0.35
    if hard:
        base = signs.copy()
        cand, cand_r = signs, best
        for assign in itertools.product((1.0, -1.0), repeat=len(hard)):
            trial = base.copy()
            trial[list(hard)] = assign
            r = residual_for(trial)
            if r < cand_r:
                cand_r, cand = r, trial
        same_hard = np.array_equal(cand[list(hard)], base[list(hard)])
        if same_hard or cand_r < decisive * best:
            best, signs = cand_r, cand
        else:
            log.warning("layer %d: hard-set flip not decisive "
                        "(%.1e vs %.1e); keeping majority votes",
                        layer.layer_index, cand_r, best)
    improved = True
    while improved:
        improved = False
        for k in range(width):
            trial = signs.copy()
            trial[k] = -trial[k]
            r = residual_for(trial)
            if r < decisive * best:
                best, signs, improved = r, trial, True
    log.debug("polish greedy done: best %.3e probe0 %.3e", best,
              residual_for(np.concatenate([[-signs[0]], signs[1:]])))
    if best > cfg.final_residual_limit:
        for a in range(width):
            for b in range(a + 1, width):
                trial = signs.copy()
                trial[a] = -trial[a]
                trial[b] = -trial[b]
                r = residual_for(trial)
                if r < decisive * best:
                    best, signs = r, trial
        improved = True
        while improved and best > cfg.final_residual_limit:
            improved = False
            for k in range(width):
                trial = signs.copy()
                trial[k] = -trial[k]
                r = residual_for(trial)
                if r < decisive * best:
                    best, signs, improved = r, trial, True
    flipped = [k for k in range(width) if int(signs[k]) != int(layer.signs[k])
               and layer.signs[k] != 0]
    for k in range(width):
        new_sign = int(signs[k])
        if k in hard or k in flipped:
            layer.status[k] = STATUS_BRANCH_RESOLVED
        layer.signs[k] = new_sign
    return n, best, flipped


# ---------------------------------------------------------------------------
# Final layer
# ---------------------------------------------------------------------------

def _active_points_near_anchors(prefix: ExtractedPrefix, neuron: int, anchors,
                                count: int = 8):
    """Input points just inside a last-prefix-layer neuron's active side.

    Anchors sit on the neuron's boundary; stepping along its pre-activation
    gradient lands strictly inside the active region, where rare neurons
    become observable for the final linear solve.
    """
    pts = []
    for a in anchors[:count]:
        g = prefix.preact_gradient(a, neuron)
        gn = float(np.linalg.norm(g))
        if gn < 1e-12:
            continue
        step = 0.05 * (1.0 + float(np.linalg.norm(a))) / gn
        for t in (step, 4.0 * step):
            x = a + t * g
            if prefix.preacts(x)[-1][neuron] > 0:
                pts.append(x)
                break
    return pts


def solve_final_layer(oracle, prefix: ExtractedPrefix, cfg: ExtractionConfig,
                      seed, anchors=None):
    """Exact affine map of the output layer by least squares.

    Samples random inputs, evaluates the extracted prefix's hidden vectors,
    and solves [h | 1] [w; b] = logits.  Neurons that never activate on the
    random sample get anchor-derived active points added (their boundary
    witnesses are known), so only genuinely unreachable neurons stay
    unrecovered: those keep weight zero and are flagged, and they never
    contribute to the function on the query distribution either.
    """
    rng = _rng(seed, 4)
    d0 = prefix.weights[0].shape[1]
    d = prefix.out_dim
    n = max(100, 2 * (d + 1))
    for attempt in range(3):
        X = rng.standard_normal((n, d0))
        H = prefix.hidden_batch(X)
        weak = (H > 0).sum(axis=0) < 15
        if anchors is not None and weak.any():
            extra = []
            for j in np.flatnonzero(weak):
                if j < len(anchors):
                    extra.extend(_active_points_near_anchors(prefix, int(j),
                                                             anchors[int(j)],
                                                             count=12))
            if extra:
                X = np.concatenate([X, np.stack(extra)], axis=0)
                H = prefix.hidden_batch(X)
        alive = H.max(axis=0) > 0
        y = oracle.query_batch(X, FINAL_LAYER)
        design = np.concatenate([H[:, alive], np.ones((X.shape[0], 1))], axis=1)
        if np.linalg.matrix_rank(design, tol=1e-10) < design.shape[1]:
            n *= 3
            continue
        sol, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
        w = np.zeros(d)
        w[alive] = sol[:-1]
        b = float(sol[-1])
        res = float(np.linalg.norm(design @ sol - y))
        rel = res / max(float(np.linalg.norm(y)), 1e-300)
        dead = [int(i) for i in np.flatnonzero(~alive)]
        return w, b, rel, dead
    raise ExtractionError("final layer design matrix stayed rank-deficient",
                          len(prefix.weights) + 1)


# ---------------------------------------------------------------------------
# Branch-and-verify for hard neurons
# ---------------------------------------------------------------------------

def resolve_hard_neurons(oracle, dims, prefix: ExtractedPrefix,
                         layer: ExtractedLayer, hard, cfg: ExtractionConfig,
                         seed, escalation_pool=None):
    """Fix hard-neuron signs by extracting the next layer per assignment.

    Spawns 2^|hard| branches; wrong assignments produce witnesses that fail
    the sample-distance check in the next layer's sign phase (or stall its
    signature search) and get pruned via SignatureSuspectError.  When the
    next "layer" is the output, the final linear solve's residual is the
    verdict instead.  The surviving branch fixes the signs and donates its
    already-extracted next layer.
    """
    L = len(dims) - 1
    i = layer.layer_index
    if len(hard) > cfg.max_hard:
        raise ExtractionError(
            f"layer {i}: {len(hard)} hard neurons exceed max_hard={cfg.max_hard}", i)
    assignments = list(itertools.product((1, -1), repeat=len(hard)))
    next_source = None
    if i + 1 <= L - 1:
        next_source = WitnessSource(oracle, seed, i + 1, cfg.line_range,
                                    cfg.max_lines_per_layer)
    records = []
    survivors = []
    for bidx, assign in enumerate(assignments):
        child = oracle.child()
        trial = layer.copy()
        for n_idx, s_val in zip(hard, assign):
            trial.signs[n_idx] = s_val
        trial_prefix = prefix.extend(trial.signed_rows(), trial.signed_biases())
        record = {"id": f"L{i}b{bidx}",
                  "assignment": {str(n): int(s) for n, s in zip(hard, assign)},
                  "status": "running", "evidence": ""}
        try:
            if i + 1 <= L - 1:
                nl, nh, st = extract_layer(child, trial_prefix, i + 1, dims, cfg,
                                           next_source, (seed, 100 + bidx),
                                           in_branch=True)
                res = None
                if i + 1 == L - 1:
                    fprefix = trial_prefix.extend(nl.signed_rows(),
                                                  nl.signed_biases())
                    _, _, res, _ = solve_final_layer(child, fprefix, cfg,
                                                     (seed, 200 + bidx),
                                                     anchors=nl.witness_anchors)
                    if res > cfg.final_residual_limit:
                        record["status"] = "pruned"
                        record["evidence"] = f"final residual {res:.2e}"
                        continue
                survivors.append((bidx, assign, (nl, nh, st), res))
                record["status"] = "survivor"
            else:
                _, _, res, _ = solve_final_layer(child, trial_prefix, cfg,
                                                 (seed, 200 + bidx),
                                                 anchors=trial.witness_anchors)
                if res <= cfg.final_residual_limit:
                    survivors.append((bidx, assign, None, res))
                    record["status"] = "survivor"
                else:
                    record["status"] = "pruned"
                    record["evidence"] = f"final residual {res:.2e}"
        except SignatureSuspectError as e:
            record["status"] = "pruned"
            record["evidence"] = str(e)
        finally:
            record["queries"] = child.snapshot()
            oracle.merge_child(child)
            records.append(record)
            log.debug("branch %s: %s %s", record["id"], record["status"],
                      record["evidence"])

    if not survivors:
        # Escalate: the wrong neuron may sit just above the hard threshold.
        if escalation_pool:
            extra = escalation_pool[0]
            log.warning("layer %d: no survivor; escalating with neuron %d",
                        i, extra)
            return resolve_hard_neurons(oracle, dims, prefix, layer,
                                        sorted(hard + [extra]), cfg, (seed, 999),
                                        escalation_pool[1:])
        raise HardSetIncompleteError(
            f"layer {i}: no sign assignment for {hard} survived", i)
    if len(survivors) > 1:
        with_res = [s for s in survivors if s[3] is not None]
        if with_res:
            survivors = [min(with_res, key=lambda s: s[3])]
            log.warning("layer %d: multiple survivors; kept lowest residual", i)
        else:
            log.warning("layer %d: AMBIGUOUS (multiple survivors); kept first", i)
            survivors = [survivors[0]]
    bidx, assign, bundle, res = survivors[0]
    for n_idx, s_val in zip(hard, assign):
        layer.signs[n_idx] = s_val
        layer.status[n_idx] = STATUS_BRANCH_RESOLVED
    return layer, bundle, records


# ---------------------------------------------------------------------------
# Whole-model extraction
# ---------------------------------------------------------------------------

def _sign_repair_candidates(oracle, prefix: ExtractedPrefix,
                            layer: ExtractedLayer, cfg: ExtractionConfig, seed):
    """Order a layer's neurons by how suspicious their fixed signs look.

    Reruns one s-round per neuron: neurons whose majority flips against
    the recorded sign go first, then everything else by ascending
    confidence.  Branch-resolved neurons were already verified downstream
    and are excluded.
    """
    q_layer, _ = quantize_params(layer, cfg.quantization)
    ctx = SignContext(_quantized_prefix(prefix, cfg.quantization),
                      q_layer.signatures, q_layer.bias_multiples,
                      mode=cfg.quantization, input_dim=prefix.weights[0].shape[1]
                      if prefix.depth else layer.signatures.shape[1])
    flips, rest = [], []
    for k in range(layer.width):
        if layer.status[k] == STATUS_BRANCH_RESOLVED:
            continue
        try:
            dec = recover_sign(oracle, ctx, k, cfg.s,
                               _rng(seed, 10, layer.layer_index, k),
                               allow_rerun=False)
            if dec.sign != layer.signs[k]:
                flips.append(k)
            else:
                rest.append(k)
        except SignatureSuspectError:
            flips.append(k)
    rest.sort(key=lambda k: layer.confidence[k])
    return flips + rest


def extract_model(oracle, cfg: ExtractionConfig, extraction_seed: int,
                  victim_seed: int = 0):
    """Extract every layer, resolve hard signs, and solve the output layer.

    Returns (ExtractedModel, report dict following the documented schema).
    """
    dims = oracle.layer_dims
    L = len(dims) - 1
    prefix = ExtractedPrefix()
    layers = []
    layer_reports = []
    layer_stats = []
    pending = None   # (layer, hard, stats) donated by a surviving branch
    repairs = {}     # layer index -> sign-repair attempts of its predecessor
    retries = {}     # layer index -> fresh re-extraction attempts
    i = 1
    while i <= L - 1:
        layer_seed = (extraction_seed, retries.get(i, 0) * 1009 + i)
        if pending is not None:
            layer, hard, stats = pending
            pending = None
        else:
            source = WitnessSource(oracle, layer_seed, i, cfg.line_range,
                                   cfg.max_lines_per_layer)
            try:
                layer, hard, stats = extract_layer(oracle, prefix, i, dims, cfg,
                                                   source, layer_seed)
            except SignatureSuspectError as e:
                # This layer cannot extract under the current prefix: the
                # previous layer carries a confidently wrong sign that the
                # hard set missed, or one of its rows is a phantom.  First
                # re-resolve the previous signs by branching; if no
                # assignment survives, re-extract the previous layer
                # entirely with a fresh witness stream.
                if i == 1 or repairs.get(i, 0) >= 2:
                    raise ExtractionError(
                        f"layer {i}: {e} (no prior layer left to repair)", i)
                repairs[i] = repairs.get(i, 0) + 1
                prev = layers.pop()
                layer_stats.pop()
                layer_reports.pop()
                prefix = ExtractedPrefix.from_layers(layers)
                log.warning("layer %d suspect: re-resolving layer %d signs",
                            i, prev.layer_index)
                try:
                    candidates = _sign_repair_candidates(oracle, prefix, prev,
                                                         cfg, extraction_seed)
                    if not candidates:
                        raise HardSetIncompleteError("no candidates", i - 1)
                    prev, bundle, records = resolve_hard_neurons(
                        oracle, dims, prefix, prev, candidates[:1], cfg,
                        (extraction_seed, 7000 + i),
                        escalation_pool=candidates[1:cfg.max_hard])
                except HardSetIncompleteError:
                    log.warning("sign repair failed: re-extracting layer %d",
                                i - 1)
                    retries[i - 1] = retries.get(i - 1, 0) + 1
                    if retries[i - 1] > 2:
                        raise ExtractionError(
                            f"layer {i - 1}: re-extraction attempts exhausted",
                            i - 1)
                    i -= 1
                    continue
                layers.append(prev)
                layer_stats.append({"queries": {p: 0 for p in PHASES}})
                layer_reports.append(_layer_report(prev, layer_stats[-1], records))
                prefix = prefix.extend(prev.signed_rows(), prev.signed_biases())
                pending = bundle
                continue
        branch_records = []
        if hard:
            ordered = sorted((k for k in range(layer.width) if k not in hard),
                             key=lambda k: layer.confidence[k])
            try:
                layer, bundle, branch_records = resolve_hard_neurons(
                    oracle, dims, prefix, layer, hard, cfg, layer_seed,
                    escalation_pool=ordered[:4])
            except HardSetIncompleteError:
                retries[i] = retries.get(i, 0) + 1
                if retries[i] > 2:
                    raise
                log.warning("layer %d: no branch survived; re-extracting "
                            "with a fresh stream", i)
                continue
            if bundle is not None:
                pending = bundle
        if cfg.precision_improve:
            t0 = time.perf_counter()
            pctx = SignContext(prefix, layer.signed_rows(), layer.signed_biases(),
                               mode=B64, input_dim=dims[0])
            for k in range(layer.width):
                st = refine_neuron(oracle, pctx, k, _rng(extraction_seed, 6, i, k),
                                   prefix=prefix)
                layer.achieved_precision[k] = st.residual_after / max(
                    len(st.witness_set), 1)
            s = np.where(layer.signs == 0, 1, layer.signs).astype(float)
            layer.signatures = pctx.rows * s[:, None]
            layer.bias_multiples = pctx.biases * s
            layer.signatures, layer.bias_multiples = _recanonicalize(layer)
            stats["time_precision"] = time.perf_counter() - t0
        layers.append(layer)
        layer_stats.append(stats)
        layer_reports.append(_layer_report(layer, stats, branch_records))
        prefix = prefix.extend(layer.signed_rows(), layer.signed_biases())
        i += 1

    m = _Meter(oracle)
    w, b, residual, dead = solve_final_layer(oracle, prefix, cfg, extraction_seed,
                                             anchors=layers[-1].witness_anchors)
    q_final = m.delta()[FINAL_LAYER]
    model = ExtractedModel(layers=layers, final_weights=w, final_bias=b,
                           alignment=[[1.0] * layer.width for layer in layers])
    report = {
        "architecture": [int(d) for d in dims],
        "victim_seed": int(victim_seed),
        "extraction_seed": int(extraction_seed),
        "quantization": cfg.quantization,
        "layers": layer_reports,
        "final_layer": {"queries": int(q_final), "residual": float(residual),
                        "dead_neurons": dead},
        "oracle_totals": oracle.snapshot(),
        "verification": None,
    }
    return model, report


def run_benchmark(model_paths, extraction_seeds, cfg: ExtractionConfig | None = None,
                  s_high: int = 200):
    """Layer-2 extraction benchmark over models and extraction seeds.

    For every model and seed: extract layer 1 (prep), then time layer 2's
    signature phase and sign phase at s=cfg.s, then re-run the sign phase
    alone at s=s_high over the same signatures.  Missing model files are
    skipped with a note.  Returns (rows, skipped).
    """
    from .nnxio import load_model, NnxFormatError
    from .oracle import Oracle

    cfg = cfg or ExtractionConfig()
    rows, skipped = [], []
    for path in model_paths:
        name = os.path.splitext(os.path.basename(path))[0]
        try:
            victim = load_model(path)
        except (OSError, NnxFormatError) as e:
            skipped.append({"model": name, "note": str(e)})
            continue
        dims = victim.layer_dims
        width = dims[1]
        for seed in extraction_seeds:
            oracle = Oracle(victim)
            source1 = WitnessSource(oracle, (seed, 1), 1, cfg.line_range,
                                    cfg.max_lines_per_layer)
            layer1, hard1, _ = extract_layer(oracle, ExtractedPrefix(), 1, dims,
                                             cfg, source1, (seed, 1))
            if hard1:
                layer1, bundle, _ = resolve_hard_neurons(
                    oracle, dims, ExtractedPrefix(), layer1, hard1, cfg,
                    (seed, 1))
            prefix = ExtractedPrefix.from_layers([layer1])
            source2 = WitnessSource(oracle, (seed, 2), 2, cfg.line_range,
                                    cfg.max_lines_per_layer)
            before = oracle.snapshot()
            layer2, hard2, stats = extract_layer(oracle, prefix, 2, dims, cfg,
                                                 source2, (seed, 2))
            q = stats["queries"]

            # sign phase alone at the high iteration count, same signatures
            q_layer, _ = quantize_params(layer2, cfg.quantization)
            ctx = SignContext(_quantized_prefix(prefix, cfg.quantization),
                              q_layer.signatures, q_layer.bias_multiples,
                              mode=cfg.quantization, input_dim=dims[0],
                              anchors=layer2.witness_anchors)
            m_high = _Meter(oracle)
            t0 = time.perf_counter()
            for k in range(layer2.width):
                try:
                    recover_sign(oracle, ctx, k, s_high,
                                 _rng((seed, 2), 13, k), allow_rerun=False)
                except SignatureSuspectError:
                    pass
            t_high = time.perf_counter() - t0
            q_high = m_high.delta()[SIGN]

            t_sig = stats["time_signature"]
            t_s15 = stats["time_sign"]
            rows.append({
                "model": name,
                "width": int(width),
                "params_layer2": int(dims[2] * (dims[1] + 1)),
                "extraction_seed": int(seed),
                "t_signature_s": round(t_sig, 6),
                "t_sign_s15_s": round(t_s15, 6),
                "t_sign_s200_s": round(t_high, 6),
                "q_critpoint": int(q["critpoint"]),
                "q_signature": int(q["signature"]),
                "q_sign_s15": int(q["sign"]),
                "q_sign_s200": int(q_high),
                "sign_ratio_s200_over_s15": round(t_high / t_s15, 3)
                if t_s15 > 0 else 0.0,
                "sign_share_of_signature_time": round(t_s15 / t_sig, 5)
                if t_sig > 0 else 0.0,
            })
    return rows, skipped


def _recanonicalize(layer: ExtractedLayer):
    from .extracted import canonicalize_row
    rows = np.empty_like(layer.signatures)
    biases = np.empty_like(layer.bias_multiples)
    for k in range(layer.width):
        r, b, _ = canonicalize_row(layer.signatures[k], layer.bias_multiples[k])
        rows[k], biases[k] = r, b
    s = np.where(layer.signs == 0, 1, layer.signs).astype(float)
    return rows * s[:, None], biases * s


def _layer_report(layer: ExtractedLayer, stats: dict, branch_records) -> dict:
    q = stats.get("queries", {p: 0 for p in PHASES})
    return {
        "index": layer.layer_index,
        "time_s": {"signature": round(stats.get("time_signature", 0.0), 6),
                   "sign": round(stats.get("time_sign", 0.0), 6),
                   "precision": round(stats.get("time_precision", 0.0), 6)},
        "queries": {"critpoint": int(q.get("critpoint", 0)),
                    "signature": int(q.get("signature", 0)),
                    "sign": int(q.get("sign", 0)),
                    "precision": int(q.get("precision", 0))},
        "neurons": [{"confidence": float(layer.confidence[k]),
                     "status": layer.status[k],
                     "sign": int(layer.signs[k])}
                    for k in range(layer.width)],
        "branches": branch_records,
        "final_check_queries": int(stats.get("final_check_queries", 0)),
        "search": {k: stats.get(k, 0) for k in
                   ("witnesses", "dedup_skips", "rejected_partials",
                    "partials", "lines", "forced_merges")},
    }
