"""Scale-free weight-row recovery from second differences at witnesses.

Layer 1 probes the standard basis around a witness; hidden layers probe
random directions and regress against the extracted prefix's hidden
vectors.  Each probe direction contributes the magnitude of one weight
multiple; relative signs come from paired probes against the strongest
coordinate.  Witnesses of deeper layers only ever see part of a row (the
previously-active coordinates), so partial signatures are clustered by
graph connectivity and unified with median-of-ratios scale constants.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np

from .critpoints import Witness
from .extracted import canonicalize_row
from .oracle import SIGNATURE

FD_EPS = 1e-6                 # finite-difference step, relative to (1 + |x*|)
CLUSTER_EPSILON = 1e-5        # clustering match tolerance, reused for overlap checks
OVERLAP_MIN = 2               # shared indices required to merge (1 only when forced)
RESIDUAL_GATE = 1e-3          # relative LS residual above which a partial is rejected
RANK_RETRIES = 5
_E_FLOOR = 1e-12
_RATIO_FLOOR = 1e-7           # skip ratio entries where either value is this small


class NullRowError(RuntimeError):
    """All finite differences sat below the noise floor (degenerate neuron)."""


class RankDeficientError(RuntimeError):
    """The hidden design matrix stayed rank-deficient after resampling."""


class RejectedPartialError(RuntimeError):
    """Least-squares residual too large: witness inconsistent with the prefix."""


@dataclasses.dataclass
class PartialSignature:
    """A weight-ratio vector defined only on previously-active indices.

    The last entry is the bias multiple, recovered at the same unknown
    scale as the weights and always present.  It matters more than it
    looks: a neuron whose boundary only shows up in disconnected regions
    yields fragments with disjoint weight-index sets, and the shared bias
    coefficient is the one ratio that still chains their scales together.
    """

    values: np.ndarray        # length d_prev + 1; zero outside the index set
    mask: np.ndarray          # bool, True on the index set (bias always True)
    witness: Witness
    residual: float = 0.0

    @property
    def index_set(self):
        return np.flatnonzero(self.mask[:-1])

    def normalized_on(self, mask: np.ndarray) -> np.ndarray:
        v = self.values[mask]
        m = np.abs(v).max()
        return v / m if m > 0 else v


def make_partial(row_values: np.ndarray, row_mask: np.ndarray, bias: float,
                 witness: Witness, residual: float = 0.0) -> PartialSignature:
    values = np.concatenate([row_values, [bias]])
    mask = np.concatenate([row_mask, [True]])
    return PartialSignature(values=values, mask=mask, witness=witness,
                            residual=residual)


def _second_differences(oracle, x_star, directions, phase):
    """c * |J d_k| for each probe direction, via midpoint second differences.

    The logit is exactly piecewise linear, so
    f(x* + d) + f(x* - d) - 2 f(x*) picks out the slope jump across the
    target boundary and nothing else (for |d| small enough to cross no
    other boundary).
    """
    n = directions.shape[0]
    pts = np.empty((2 * n + 1, x_star.shape[0]))
    pts[0] = x_star
    pts[1:n + 1] = x_star[None, :] + directions
    pts[n + 1:] = x_star[None, :] - directions
    f = oracle.query_batch(pts, phase)
    return f[1:n + 1] + f[n + 1:] - 2.0 * f[0], f[0]


def _signed_row(oracle, x_star, directions, phase, noise_floor_scale):
    """Recover c * (J d_k), signed consistently across directions.

    Midpoint second differences give magnitudes |J d_k|; the relative sign
    of each coordinate against the strongest one falls out of one more
    probe along the paired direction (|J d_ref + J d_k| equals the sum of
    magnitudes when signs agree and their difference when they disagree).
    Total cost: 4 queries per direction plus one shared point.
    """
    y_abs, f0 = _second_differences(oracle, x_star, directions, phase)
    noise = noise_floor_scale * (abs(f0) + 1.0)
    mags = np.abs(y_abs)
    if mags.max(initial=0.0) <= noise:
        raise NullRowError("all directional differences below noise floor")
    ref = int(np.argmax(mags))
    paired = directions + directions[ref][None, :]
    y_pair, _ = _second_differences(oracle, x_star, paired, phase)
    same = np.abs(np.abs(y_pair) - (mags + mags[ref]))
    diff = np.abs(np.abs(y_pair) - np.abs(mags - mags[ref]))
    signs = np.where(same <= diff, 1.0, -1.0)
    signs[ref] = 1.0
    return signs * mags


def layer1_signature(oracle, witness: Witness, fd_eps: float = FD_EPS,
                     phase: str = SIGNATURE):
    """Full first-layer signature and bias multiple from a single witness.

    Probes every standard basis direction: the input is directly
    controllable, so one witness sees the whole row.  Returns the
    canonical row, its bias multiple, and the probe scale used.
    """
    x = witness.x_star
    d0 = x.shape[0]
    lam = fd_eps * (1.0 + float(np.linalg.norm(x)))
    dirs = np.eye(d0) * lam
    y = _signed_row(oracle, x, dirs, phase, noise_floor_scale=1e-10)
    row, _, _ = canonicalize_row(y)
    bias = -float(row @ x)
    return row, bias, lam


def probe_witness(oracle, witness: Witness, n_dirs: int, rng,
                  fd_eps: float = FD_EPS, phase: str = SIGNATURE):
    """Measure the signed slope jumps along random directions at a witness.

    The result depends only on the victim and the witness, never on any
    extraction state, so it can be computed once and shared across branch
    extractions.  Returns (directions, y).
    """
    x = witness.x_star
    lam = fd_eps * (1.0 + float(np.linalg.norm(x)))
    dirs = rng.standard_normal((n_dirs, x.shape[0]))
    dirs *= lam / np.linalg.norm(dirs, axis=1, keepdims=True)
    y = _signed_row(oracle, x, dirs, phase, noise_floor_scale=1e-11)
    return dirs, y


def hidden_partial_signature(oracle, witness: Witness, prefix,
                             fd_eps: float = FD_EPS, phase: str = SIGNATURE,
                             residual_gate: float = RESIDUAL_GATE,
                             rng=None, probes=None) -> PartialSignature:
    """Partial signature of a hidden-layer neuron at one witness.

    Measures the signed slope jumps along random input directions (or
    reuses `probes` measured earlier) and least-squares-solves against the
    extracted prefix's hidden vectors plus an intercept (the witness sits
    on the boundary, so the bias multiple rides at the same scale).
    Previous-layer neurons inactive at the witness produce zero columns:
    their coordinates stay unknown (the complement of the index set).

    Raises RankDeficientError when the active design stays singular after
    resampling, and RejectedPartialError when the residual exceeds the
    gate (the witness does not belong to this layer, or the prefix is
    wrong).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    x = witness.x_star
    d_prev = prefix.out_dim
    lam = fd_eps * (1.0 + float(np.linalg.norm(x)))
    h_star = prefix.hidden(x)
    active = h_star > 0
    n_active = int(active.sum())
    if n_active == 0:
        raise RejectedPartialError("no active previous-layer neurons at witness")

    last_err = None
    for attempt in range(RANK_RETRIES):
        if probes is not None and attempt == 0:
            dirs, y = probes
            if dirs.shape[0] < n_active + 3:
                probes = None
        if probes is None or attempt > 0:
            dirs, y = probe_witness(oracle, witness,
                                    max(d_prev + 4, n_active + 3), rng,
                                    fd_eps, phase)
        H = prefix.hidden_batch(x[None, :] + dirs)
        col_active = H.max(axis=0) > 0
        design = np.concatenate([H[:, col_active],
                                 np.ones((dirs.shape[0], 1))], axis=1)
        if np.linalg.matrix_rank(design, tol=1e-10 * lam) < design.shape[1]:
            last_err = RankDeficientError(
                f"design rank below {design.shape[1]} at witness")
            continue
        sol, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
        res = float(np.linalg.norm(design @ sol - y))
        rel = res / max(float(np.linalg.norm(y)), 1e-300)
        if rel > residual_gate:
            err = RejectedPartialError(f"relative residual {rel:.2e}")
            err.residual = rel
            raise err
        values = np.zeros(d_prev)
        values[col_active] = sol[:-1]
        return make_partial(values, col_active, float(sol[-1]),
                            witness, residual=rel)
    raise last_err


def recover_bias(signature: np.ndarray, witness: Witness, prefix) -> float:
    """Bias multiple from the boundary equation: pre-activation zero at x*."""
    h = prefix.hidden(witness.x_star) if prefix.depth else witness.x_star
    return -float(np.asarray(signature) @ h)


# ---------------------------------------------------------------------------
# Clustering and unification of partial signatures.
# ---------------------------------------------------------------------------

def _match_count(a: PartialSignature, b: PartialSignature, epsilon: float):
    """Matching-coordinate count on the shared index set, orientation-blind.

    Both vectors are pre-normalized to canonical scale on the shared
    indices; partials of one neuron can carry opposite overall signs
    (the output coefficient at the witness sets the orientation), so the
    better of the two orientations counts.

    The normalizing scale comes from the shared *weight* coordinates when
    any exist: the trailing bias multiple can dwarf canonical weights (it
    grows with the witness's distance from the origin), and scaling by it
    would push every weight difference under the tolerance.
    """
    shared = a.mask & b.mask
    n_shared = int(shared.sum())
    if n_shared == 0:
        return 0, 0
    va = a.values[shared]
    vb = b.values[shared]
    # the bias entry is always shared and always last; weights come first
    if n_shared >= 2:
        sa = np.abs(va[:-1]).max()
        sb = np.abs(vb[:-1]).max()
    else:
        sa = abs(va[0])
        sb = abs(vb[0])
    if sa > 0:
        va = va / sa
    if sb > 0:
        vb = vb / sb
    # Tolerance: absolute for canonical-size weights, relative for large
    # entries (the bias multiple), widened when either side's regression
    # residual says its coordinates are noisy.
    eps_eff = max(epsilon, 5.0 * (a.residual + b.residual))
    tol = eps_eff * (1.0 + np.maximum(np.abs(va), np.abs(vb)))
    same = int((np.abs(va - vb) < tol).sum())
    if same == n_shared:
        return same, n_shared
    opp = int((np.abs(va + vb) < tol).sum())
    return max(same, opp), n_shared


def partials_linked(a: PartialSignature, b: PartialSignature, epsilon: float,
                    d0: int, overlap_min: int = OVERLAP_MIN) -> bool:
    matches, n_shared = _match_count(a, b, epsilon)
    if n_shared < overlap_min:
        return False
    # Wide overlaps follow the log d0 rule; small overlaps must agree on
    # every shared coordinate to keep the false-match rate down.
    threshold = min(math.log(max(d0, 3)), n_shared - 0.5)
    return matches > threshold


def cluster_partials(partials, epsilon: float = CLUSTER_EPSILON, d0: int = 2,
                     overlap_min: int = OVERLAP_MIN):
    """Connected components of the partial-signature match graph."""
    n = len(partials)
    adj = [[] for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if partials_linked(partials[i], partials[j], epsilon, d0, overlap_min):
                adj[i].append(j)
                adj[j].append(i)
    seen = [False] * n
    clusters = []
    for start in range(n):
        if seen[start]:
            continue
        comp, queue = [], [start]
        seen[start] = True
        while queue:
            u = queue.pop()
            comp.append(u)
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    queue.append(v)
        clusters.append(sorted(comp))
    return clusters


class ClusterState:
    """One neuron candidate: members, coverage, and the frozen row."""

    def __init__(self, d_prev: int):
        self.members = []
        self.covered = np.zeros(d_prev, dtype=bool)
        self.frozen_row = None
        self.frozen_bias = None
        self.non_target = False       # confirmed to belong to another layer
        self.discarded = 0            # dedupe counter
        self.confirm_attempts = 0     # layer-1 cross-check retries
        self.scale_errors = None
        self.extra_witnesses = []     # deduped repeats: free boundary equations

    @property
    def complete(self) -> bool:
        return self.frozen_row is not None

    def witnesses(self):
        return [m.witness for m in self.members]


def _overlap_components(members, overlap_min: int = OVERLAP_MIN):
    """Connected components of the member graph under the overlap rule."""
    n = len(members)
    parent = list(range(n))

    def find(u):
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    for i in range(n):
        for j in range(i + 1, n):
            if int((members[i].mask & members[j].mask).sum()) >= overlap_min:
                parent[find(i)] = find(j)
    return len({find(u) for u in range(n)})


def dedupe_decision(cluster: ClusterState, partial: PartialSignature) -> str:
    """Accept or discard an incoming partial already attributed to a cluster.

    Discards when the cluster's full signature is already frozen, or when
    the index set repeats existing coverage without improving how the
    members chain together for unification.
    """
    if cluster.complete or cluster.non_target:
        return "discard-complete"
    if bool((partial.mask & ~cluster.covered).any()):
        return "accept"
    if len(cluster.members) >= 40:
        return "discard-redundant"
    # No new coverage: only worth keeping if it chains together member
    # groups that could not previously be unified against each other.
    before = _overlap_components(cluster.members)
    after = _overlap_components(cluster.members + [partial])
    return "accept" if after < before else "discard-redundant"


class SignaturePool:
    """Single-writer merge point for partial signatures of one layer.

    Matching is representative-first: a frozen row acts as a full-coverage
    pseudo-partial, so repeats of finished neurons match cheaply.  The
    accept/discard policy is identical with deduplication on or off (the
    flag only controls whether the caller pays for queries before asking),
    which keeps extracted parameters bit-identical between the two modes.
    """

    def __init__(self, width: int, d_prev: int, d0: int,
                 epsilon: float = CLUSTER_EPSILON, max_clusters: int = 0):
        self.width = width
        self.d_prev = d_prev
        self.d0 = d0
        self.epsilon = epsilon
        self.max_clusters = max_clusters or max(80, 14 * width)
        self.overflow = 0
        self.clusters: list[ClusterState] = []
        self.split_events = 0
        self._version = 0
        self._cache_version = -1
        self._cache = None

    def touch(self) -> None:
        """Invalidate the vectorised matching cache after any mutation."""
        self._version += 1

    def _member_matrix(self):
        if self._cache_version == self._version and self._cache is not None:
            return self._cache
        vals, masks, owner, res = [], [], [], []
        for i, c in enumerate(self.clusters):
            if c.complete:
                vals.append(c.frozen_row)
                masks.append(np.ones(self.d_prev, dtype=bool))
                owner.append(i)
                res.append(max((m.residual for m in c.members), default=0.0))
            for m in c.members:
                vals.append(m.values)
                masks.append(m.mask)
                owner.append(i)
                res.append(m.residual)
        if vals:
            self._cache = (np.stack(vals), np.stack(masks),
                           np.array(owner, dtype=int),
                           np.array(res, dtype=float))
        else:
            self._cache = (np.zeros((0, self.d_prev)),
                           np.zeros((0, self.d_prev), dtype=bool),
                           np.zeros(0, dtype=int), np.zeros(0))
        self._cache_version = self._version
        return self._cache

    # -- queries ---------------------------------------------------------

    def n_complete(self) -> int:
        return sum(1 for c in self.clusters if c.complete and not c.non_target)

    def all_complete(self) -> bool:
        return self.n_complete() >= self.width

    def incomplete_indices(self):
        return [i for i, c in enumerate(self.clusters)
                if not c.complete and not c.non_target]

    def completed_rows(self):
        return [(i, c.frozen_row, c.frozen_bias) for i, c in enumerate(self.clusters)
                if c.complete]

    def _representative(self, cluster: ClusterState):
        if cluster.complete:
            return PartialSignature(values=cluster.frozen_row,
                                    mask=np.ones(self.d_prev, bool),
                                    witness=None)
        return max(cluster.members, key=lambda m: int(m.mask.sum()))

    def match_cluster(self, partial: PartialSignature, overlap_min: int = OVERLAP_MIN):
        """First cluster (in creation order) with a member linking the partial.

        One vectorised pass over every stored member and frozen row; exact
        same link rule as `partials_linked`.
        """
        V, Msk, owner, res = self._member_matrix()
        if V.shape[0] == 0:
            return None
        shared = Msk & partial.mask[None, :]
        n_shared = shared.sum(axis=1)
        w_count = shared[:, :-1].sum(axis=1)
        Vs = np.where(shared, V, 0.0)
        Ps = np.where(shared, partial.values[None, :], 0.0)
        wmax_v = np.abs(Vs[:, :-1]).max(axis=1)
        wmax_p = np.abs(Ps[:, :-1]).max(axis=1)
        sa = np.where(w_count > 0, wmax_v, np.abs(Vs[:, -1]))
        sb = np.where(w_count > 0, wmax_p, np.abs(Ps[:, -1]))
        sa = np.where(sa > 0, sa, 1.0)
        sb = np.where(sb > 0, sb, 1.0)
        va = Vs / sa[:, None]
        vb = Ps / sb[:, None]
        eps_eff = np.maximum(self.epsilon, 5.0 * (res + partial.residual))
        tol = eps_eff[:, None] * (1.0 + np.maximum(np.abs(va), np.abs(vb)))
        same = ((np.abs(va - vb) < tol) & shared).sum(axis=1)
        opp = ((np.abs(va + vb) < tol) & shared).sum(axis=1)
        matches = np.maximum(same, opp)
        threshold = np.minimum(math.log(max(self.d0, 3)), n_shared - 0.5)
        linked = (n_shared >= overlap_min) & (matches > threshold)
        if not linked.any():
            return None
        return int(owner[linked].min())

    # -- updates ---------------------------------------------------------

    def insert(self, partial: PartialSignature, overlap_min: int = OVERLAP_MIN,
               freeze: bool = True):
        """Returns (status, cluster_index, newly_frozen: UnifiedSignature|None)."""
        idx = self.match_cluster(partial, overlap_min)
        if idx is None:
            if len(self.clusters) >= self.max_clusters:
                # runaway fragmentation (typical of a wrong prefix): stop
                # minting clusters so the search stalls out honestly
                self.overflow += 1
                return "discard-overflow", -1, None
            cluster = ClusterState(self.d_prev)
            self.clusters.append(cluster)
            idx = len(self.clusters) - 1
        else:
            cluster = self.clusters[idx]
            decision = dedupe_decision(cluster, partial)
            if decision != "accept":
                cluster.discarded += 1
                return decision, idx, None
        cluster.members.append(partial)
        cluster.covered |= partial.mask
        self.touch()
        frozen = None
        if freeze and cluster.covered.all() and not cluster.non_target:
            frozen = self._try_freeze(idx)
        return "accept", idx, frozen

    def force_insert(self, partial: PartialSignature, idx: int) -> None:
        """Append a member bypassing the dedupe rule (verified repeats)."""
        cluster = self.clusters[idx]
        cluster.members.append(partial)
        cluster.covered |= partial.mask
        self.touch()

    def freeze(self, idx: int):
        cluster = self.clusters[idx]
        if cluster.covered.all() and not cluster.non_target:
            return self._try_freeze(idx)
        return None

    def _try_freeze(self, idx: int):
        cluster = self.clusters[idx]
        self.touch()
        u = unify_cluster(cluster.members, self.d_prev, self.epsilon)
        if u.evicted:
            # SPLIT_CLUSTER: inconsistent members go back as their own clusters
            self.split_events += len(u.evicted)
            kept = [m for m in cluster.members if all(m is not e for e in u.evicted)]
            cluster.members = kept
            cluster.covered = np.zeros(self.d_prev, bool)
            for m in kept:
                cluster.covered |= m.mask
            for e in u.evicted:
                nc = ClusterState(self.d_prev)
                nc.members.append(e)
                nc.covered |= e.mask
                self.clusters.append(nc)
        if u.complete:
            cluster.frozen_row = u.row
            cluster.scale_errors = u.scale_errors
            return u
        return None

    def force_completion(self, validate=None):
        """Last-resort merge with single-index overlaps allowed.

        Only used when the normal rule stalls just short of full coverage;
        merges incomplete clusters pairwise when they link under
        overlap_min = 1 and re-attempts unification.  Single-coordinate
        links carry little evidence, so a completed merge must pass the
        caller's `validate(cluster_index)` check (witness consistency
        against the merged hyperplane); failing merges are rolled back and
        not retried.
        """
        if getattr(self, "_force_version", None) == self._version:
            return []        # nothing changed since the last pass
        frozen = []
        failed = set()
        changed = True
        budget = 1500        # pair evaluations; keeps degenerate pools bounded
        unify_budget = 200
        while changed and budget > 0 and unify_budget > 0:
            changed = False
            idxs = self.incomplete_indices()
            # prefer extending well-covered clusters with coverage-gaining partners
            idxs.sort(key=lambda c: -int(self.clusters[c].covered.sum()))
            idxs = idxs[:60]
            reps = {i: self._representative(self.clusters[i]) for i in idxs
                    if self.clusters[i].members}
            for a in idxs:
                ca = self.clusters[a]
                if ca.complete or not ca.members:
                    continue
                for b in idxs:
                    cb = self.clusters[b]
                    if b == a or cb.complete or not cb.members:
                        continue
                    if not bool((cb.covered & ~ca.covered).any()):
                        continue  # no coverage gain: skip to avoid junk mixing
                    key = (a, b, len(ca.members), len(cb.members))
                    if key in failed:
                        continue
                    budget -= 1
                    if budget <= 0:
                        break
                    ra = reps.get(a)
                    rb = reps.get(b)
                    if ra is None or rb is None:
                        continue
                    if not partials_linked(ra, rb, self.epsilon, self.d0,
                                           overlap_min=1):
                        continue
                    if len(ca.members) + len(cb.members) > 60:
                        failed.add(key)
                        continue
                    unify_budget -= 1
                    snap = (list(ca.members), ca.covered.copy(),
                            list(cb.members), cb.covered.copy(),
                            len(self.clusters))
                    ca.members.extend(cb.members)
                    ca.covered |= cb.covered
                    cb.members = []
                    cb.covered[:] = False
                    cb.non_target = True
                    self.touch()
                    # dry-run unification: a chain that mixes neurons shows
                    # up as overlap inconsistency (evictions)
                    u = unify_cluster(ca.members, self.d_prev, self.epsilon)
                    ok = not u.evicted
                    if ok and ca.covered.all():
                        uf = self._try_freeze(a)
                        if uf is None or uf.evicted:
                            ok = False
                        elif validate is not None and not validate(a):
                            ok = False
                        else:
                            frozen.append((a, uf))
                    if not ok:
                        ca.members, ca.covered = snap[0], snap[1]
                        cb.members, cb.covered = snap[2], snap[3]
                        cb.non_target = False
                        ca.frozen_row = None
                        ca.scale_errors = None
                        del self.clusters[snap[4]:]
                        failed.add(key)
                        self.touch()
                        continue
                    changed = True
                    break
                if changed:
                    break
        self._force_version = self._version
        return frozen


@dataclasses.dataclass
class UnifiedSignature:
    row: np.ndarray | None       # canonical full row, or None if incomplete
    covered: np.ndarray          # bool mask of covered indices
    merged: np.ndarray           # merged values on covered indices (canonical)
    scale_errors: np.ndarray     # pairwise ratio stdev matrix e_ab
    member_scales: np.ndarray    # scale applied to each member
    evicted: list                # member indices evicted as inconsistent

    @property
    def complete(self) -> bool:
        return bool(self.covered.all())


def _ratio_stats(members):
    """Median and stdev of coordinate ratios for every member pair."""
    n = len(members)
    C = np.full((n, n), np.nan)
    E = np.full((n, n), np.inf)
    np.fill_diagonal(C, 1.0)
    np.fill_diagonal(E, 0.0)
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            shared = members[a].mask & members[b].mask
            if not shared.any():
                continue
            va, vb = members[a].values[shared], members[b].values[shared]
            floor_a = _RATIO_FLOOR * np.abs(va).max(initial=0.0)
            floor_b = _RATIO_FLOOR * np.abs(vb).max(initial=0.0)
            ok = (np.abs(vb) > floor_b) & (np.abs(va) > floor_a)
            if ok.sum() == 0:
                continue
            ratios = va[ok] / vb[ok]
            C[a, b] = float(np.median(ratios))
            E[a, b] = float(np.std(ratios))
    return C, E


def _improve_scales(C, E):
    """Route scale factors through lower-error intermediate members.

    Ideally C_ax * C_xb = C_ab; wherever the combined error e_ax + e_xb
    beats e_ab the composite replaces the direct estimate.  Iterates to a
    fixed point (Floyd-Warshall style on the error "lengths").
    """
    n = C.shape[0]
    improved = True
    while improved:
        improved = False
        for x in range(n):
            comb = E[:, x][:, None] + E[x, :][None, :]
            better = comb < E
            np.fill_diagonal(better, False)
            if better.any():
                idx = np.where(better)
                C[idx] = C[idx[0], x] * C[x, idx[1]]
                E[idx] = comb[idx]
                improved = True
    return C, E


def unify_cluster(members, d_prev: int, epsilon: float = CLUSTER_EPSILON):
    """Merge one cluster's partial signatures into a full row if possible.

    Members are rescaled to the anchor member minimising the total ratio
    error, then coordinates covered by several members are averaged with
    1/error weights.  A member whose shared values disagree with the
    merged row beyond `epsilon` (after scaling) is evicted: unification
    doubles as the check that its witness really belongs to this neuron.
    """
    members = list(members)
    evicted = []
    while True:
        n = len(members)
        if n == 0:
            return UnifiedSignature(None, np.zeros(d_prev, bool), np.zeros(d_prev),
                                    np.zeros((0, 0)), np.zeros(0), evicted)
        C, E = _ratio_stats(members)
        C, E = _improve_scales(C, E)
        anchor = int(np.argmin(np.where(np.isfinite(E), E, 1e18).sum(axis=1)))
        scales = C[anchor, :]
        weights = 1.0 / np.maximum(E[anchor, :], _E_FLOOR)
        bad = ~np.isfinite(scales)
        if bad.any() and n > 1:
            # No ratio path to the anchor: split those members off.
            for idx in sorted(np.flatnonzero(bad), reverse=True):
                evicted.append(members.pop(idx))
            continue

        num = np.zeros(d_prev)
        den = np.zeros(d_prev)
        for m, s, w in zip(members, scales, weights):
            if not np.isfinite(s):
                continue
            num[m.mask] += w * s * m.values[m.mask]
            den[m.mask] += w
        covered = den > 0
        merged = np.zeros(d_prev)
        merged[covered] = num[covered] / den[covered]

        # Overlap consistency: evict the worst offender and retry.  The
        # reference scale is the weight part's; the bias entry is larger
        # and gets a proportionally larger allowance below.
        scale_ref = np.abs(merged[:-1]).max(initial=0.0)
        worst_i, worst_dev = -1, 0.0
        for i, (m, s) in enumerate(zip(members, scales)):
            diff = np.abs(s * m.values[m.mask] - merged[m.mask])
            rel = diff / (1.0 + np.abs(merged[m.mask]))
            slack = max(epsilon, 6.0 * m.residual)
            dev = rel.max(initial=0.0) * (epsilon / slack)
            if dev > worst_dev:
                worst_dev, worst_i = dev, i
        if n > 1 and worst_dev > epsilon * max(scale_ref, 1e-300):
            evicted.append(members.pop(worst_i))
            continue

        row = None
        if covered.all():
            # canonical scale comes from the weight part; the trailing bias
            # coefficient rides along at the same scale
            r, b, _ = canonicalize_row(merged[:-1], float(merged[-1]))
            row = np.concatenate([r, [b]])
            merged = row
        else:
            ref = np.abs(merged[:-1]).max(initial=0.0)
            if ref > 0:
                merged = merged / ref
        return UnifiedSignature(row, covered, merged, E, scales, evicted)
