"""Critical-point search: find inputs lying on activation boundaries.

The victim logit restricted to a line is piecewise linear; every slope
change is a point where some neuron's pre-activation crosses zero.  The
scan isolates slope changes by recursive interval splitting, and the
refiner pins each one down with two-line intersection inside a shrinking
bracket (exact for an isolated kink, with bisection as fallback).
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .oracle import CRITPOINT

LINEARITY_TOLERANCE = 1e-9
REFINE_TOLERANCE = 1e-12
SLOPE_TOLERANCE = 1e-9
MAX_SCAN_DEPTH = 60
# Brackets narrower than range / 2^ISOLATE_DEPTH go to the refiner;
# the refiner's consistency check sends multi-kink brackets back here.
ISOLATE_DEPTH = 9

UNATTRIBUTED = -1


class IntervalDegenerateError(RuntimeError):
    """Recursion depth exhausted without isolating a slope change."""


class LostBreakpointError(RuntimeError):
    """The bracket no longer contains a slope change."""


class TargetedExhaustedError(RuntimeError):
    """Targeted witness search ran out of attempts."""


@dataclasses.dataclass
class Witness:
    """An input on a neuron's activation boundary.

    `layer` / `neuron` hold the attribution once known (UNATTRIBUTED
    otherwise).  `active_mask` is the extracted-prefix activation pattern
    of the preceding layers, evaluated at x_star; the victim itself stays
    opaque.  `direction` is a unit vector known to cross the boundary
    transversally at x_star.
    """

    x_star: np.ndarray
    direction: np.ndarray
    layer: int = UNATTRIBUTED
    neuron: int = UNATTRIBUTED
    active_mask: tuple = ()
    boundary_residual: float = float("inf")


@dataclasses.dataclass
class LineProbe:
    origin: np.ndarray
    direction: np.ndarray
    t_lo: float = -10.0
    t_hi: float = 10.0

    def point(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction

    def points(self, ts) -> np.ndarray:
        return self.origin[None, :] + np.asarray(ts)[:, None] * self.direction[None, :]


def _is_linear(fa: float, fm: float, fb: float, tol: float) -> bool:
    return abs(fm - 0.5 * (fa + fb)) <= tol * (abs(fa) + abs(fb) + 1.0)


def scan_line(oracle, probe: LineProbe, phase: str = CRITPOINT,
              linearity_tolerance: float = LINEARITY_TOLERANCE):
    """Isolate slope changes of f along the probe into narrow brackets.

    Returns a list of (t_lo, f_lo, t_hi, f_hi) brackets, each believed to
    contain one slope change.  Intervals whose midpoint matches the chord
    are declared linear and dropped; nonlinear intervals recurse until
    narrow enough to hand to the refiner.  Intervals still unresolved at
    depth MAX_SCAN_DEPTH are skipped.
    """
    a, b = float(probe.t_lo), float(probe.t_hi)
    fa = oracle.query(probe.point(a), phase)
    fb = oracle.query(probe.point(b), phase)
    emit_width = (b - a) / (1 << ISOLATE_DEPTH)
    out = []
    stack = [(a, fa, b, fb, 0)]
    while stack:
        ta, va, tb, vb, depth = stack.pop()
        tm = 0.5 * (ta + tb)
        vm = oracle.query(probe.point(tm), phase)
        if _is_linear(va, vm, vb, linearity_tolerance):
            continue
        if tb - ta <= emit_width:
            out.append((ta, va, tb, vb))
            continue
        if depth >= MAX_SCAN_DEPTH:
            continue  # INTERVAL_DEGENERATE: skip, callers rely on other probes
        stack.append((ta, va, tm, vm, depth + 1))
        stack.append((tm, vm, tb, vb, depth + 1))
    out.sort(key=lambda br: br[0])
    return out


def _slope(oracle, probe, t0, f0, h, phase):
    return (oracle.query(probe.point(t0 + h), phase) - f0) / h


def refine_breakpoint(oracle, probe: LineProbe, bracket, phase: str = CRITPOINT,
                      refine_tolerance: float = REFINE_TOLERANCE,
                      slope_tolerance: float = SLOPE_TOLERANCE,
                      max_rounds: int = MAX_SCAN_DEPTH):
    """Pin down one slope change inside a bracket; returns (t_star, jump).

    Fits the boundary lines from both ends and intersects them.  For a
    bracket holding exactly one kink the intersection IS the kink up to
    float64 noise, so this converges in one or two rounds; the f(t_star)
    consistency check detects extra structure and falls back to bisection.
    The bracket shrinks until its width (in input space) is below
    refine_tolerance * (1 + |x|).

    Raises LostBreakpointError if the end slopes agree (no kink), and
    IntervalDegenerateError if the rounds budget runs out.
    """
    ta, va, tb, vb = bracket
    dnorm = max(float(np.linalg.norm(probe.direction)), 1e-300)
    jump = 0.0
    eps = np.finfo(np.float64).eps
    for _ in range(max_rounds):
        width = tb - ta
        x_mid = probe.point(0.5 * (ta + tb))
        tol_t = refine_tolerance * (1.0 + float(np.linalg.norm(x_mid))) / dnorm
        if width <= tol_t:
            return 0.5 * (ta + tb), jump, abs(va) + abs(vb) + 1.0
        # Slopes over the outer tenths: large steps keep the estimates
        # accurate; a kink inside the step makes the checks below fail and
        # routes us to bisection.
        h = 0.1 * width
        sa = _slope(oracle, probe, ta, va, h, phase)
        sb = _slope(oracle, probe, tb, vb, -h, phase)
        fscale = abs(va) + abs(vb) + 1.0
        jump = abs(sa - sb)
        slope_noise = 60.0 * eps * fscale / h
        if jump <= max(slope_tolerance * (abs(sa) + abs(sb) + 1.0), slope_noise):
            raise LostBreakpointError("end slopes agree inside bracket")
        t_star = (vb - va + sa * ta - sb * tb) / (sa - sb)
        bisect = not (ta + h < t_star < tb - h)
        if not bisect:
            f_star = oracle.query(probe.point(t_star), phase)
            pred_a = va + sa * (t_star - ta)
            pred_b = vb + sb * (t_star - tb)
            tol_f = 1e-7 * fscale
            on_a = abs(f_star - pred_a) <= tol_f
            on_b = abs(f_star - pred_b) <= tol_f
            if on_a and on_b:
                # f(t_star) matches both boundary lines at their meeting
                # point.  Confirm a slope change really sits here with a
                # second difference at a scale where its signal beats the
                # chord noise; a false meeting point (several kinks) fails.
                x_here = probe.point(t_star)
                h2 = max(1e-6 * (1.0 + float(np.linalg.norm(x_here))) / dnorm,
                         4.0 * tol_t)
                dev = abs(oracle.query(probe.point(t_star - h2), phase)
                          + oracle.query(probe.point(t_star + h2), phase)
                          - 2.0 * f_star)
                if dev > max(0.2 * jump * h2, 100.0 * eps * fscale):
                    return t_star, jump, fscale
                bisect = True
            elif on_a:
                ta, va = t_star, f_star  # still on the left piece: kink is right
            elif on_b:
                tb, vb = t_star, f_star
            else:
                bisect = True  # neither piece: more than one kink inside
        if bisect:
            tm = 0.5 * (ta + tb)
            fm = oracle.query(probe.point(tm), phase)
            tq = 0.5 * (ta + tm)
            fq = oracle.query(probe.point(tq), phase)
            if not _is_linear(va, fq, fm, LINEARITY_TOLERANCE):
                tb, vb = tm, fm      # left half is nonlinear
            else:
                t3 = 0.5 * (tm + tb)
                f3 = oracle.query(probe.point(t3), phase)
                if not _is_linear(fm, f3, vb, LINEARITY_TOLERANCE):
                    ta, va = tm, fm  # right half is nonlinear
                else:
                    # Kink straddles the midpoint: close in around it.
                    ta, va, tb, vb = tq, fq, t3, f3
    raise IntervalDegenerateError("refinement rounds exhausted")


def _positional_precision(t_jump_scale, probe, x_star,
                          refine_tolerance: float) -> float:
    """Input-space positional uncertainty of a refined breakpoint.

    Two-line intersection accuracy degrades inversely with the slope jump:
    weak kinks give weak signal against float64 noise in the logits.
    """
    _, jump, fscale = t_jump_scale
    eps = np.finfo(np.float64).eps
    dnorm = float(np.linalg.norm(probe.direction))
    noise = 60.0 * eps * fscale / max(jump, 1e-300) * dnorm
    return max(refine_tolerance * (1.0 + float(np.linalg.norm(x_star))), noise)


def bracket_witness(oracle, probe: LineProbe, bracket, phase: str = CRITPOINT,
                    refine_tolerance: float = REFINE_TOLERANCE) -> Witness:
    """Turn one scan bracket into a refined Witness."""
    out = refine_breakpoint(oracle, probe, bracket, phase,
                            refine_tolerance=refine_tolerance)
    x_star = probe.point(out[0])
    d = probe.direction / np.linalg.norm(probe.direction)
    return Witness(x_star=x_star, direction=d,
                   boundary_residual=_positional_precision(out, probe, x_star,
                                                           refine_tolerance))


def refine_witness(oracle, x_approx: np.ndarray, direction: np.ndarray,
                   phase: str = CRITPOINT, bracket_halfwidth: float = 1e-2,
                   refine_tolerance: float = REFINE_TOLERANCE) -> Witness:
    """Refine an approximate boundary point to a Witness along `direction`.

    A slope change must lie within `bracket_halfwidth` (in line parameter)
    of x_approx along the direction; scans a small bracket if the immediate
    one holds several kinks.
    """
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    probe = LineProbe(np.asarray(x_approx, dtype=np.float64), d,
                      -bracket_halfwidth, bracket_halfwidth)
    fa = oracle.query(probe.point(probe.t_lo), phase)
    fb = oracle.query(probe.point(probe.t_hi), phase)
    bracket = (probe.t_lo, fa, probe.t_hi, fb)
    try:
        out = refine_breakpoint(oracle, probe, bracket, phase,
                                refine_tolerance=refine_tolerance)
    except (IntervalDegenerateError, LostBreakpointError):
        # Several kinks, or the seed sat exactly on the kink so the end
        # slopes matched: isolate first, take the kink nearest the seed.
        brackets = scan_line(oracle, probe, phase)
        if not brackets:
            raise LostBreakpointError("no slope change near seed point")
        best = min(brackets, key=lambda br: abs(0.5 * (br[0] + br[2])))
        out = refine_breakpoint(oracle, probe, best, phase,
                                refine_tolerance=refine_tolerance)
    x_star = probe.point(out[0])
    return Witness(x_star=x_star, direction=d,
                   boundary_residual=_positional_precision(out, probe, x_star,
                                                           refine_tolerance))


def classify_prefix_layer(prefix, x: np.ndarray, tol: float = 1e-4):
    """Index (0-based) of the extracted prefix layer whose boundary holds x.

    Returns None if no already-extracted neuron's pre-activation is within
    tolerance of zero, i.e. the witness belongs to the target layer or
    deeper.  Rows are canonical (max-abs 1) so an absolute scale works.
    """
    h = np.asarray(x, dtype=np.float64)
    for li, (W, b) in enumerate(zip(prefix.weights, prefix.biases)):
        g = W @ h + b
        scale = tol * (1.0 + float(np.linalg.norm(h)))
        if np.any(np.abs(g) < scale):
            return li
        h = np.maximum(g, 0.0)
    return None


def plane_membership(row: np.ndarray, bias: float, h: np.ndarray,
                     tol: float = 1e-6) -> bool:
    """Whether a (prefix-space) point sits on the hyperplane row.h + bias = 0."""
    g = float(row @ h + bias)
    return abs(g) <= tol * (1.0 + float(np.linalg.norm(h)))


def confirm_global_plane(oracle, row: np.ndarray, bias: float, x_wit: np.ndarray,
                         rng, phase: str = CRITPOINT, distances=(3.0, 8.0, 15.0),
                         kink_tolerance: float = 1e-7) -> bool:
    """Check that a candidate layer-1 hyperplane is globally straight.

    A first-layer boundary is one flat hyperplane across all of input
    space, so the victim must have a kink at distant points of the plane.
    Deeper layers' boundaries bend at every earlier-layer crossing and fail
    this at distance.  Costs 3 queries per tested point.
    """
    n = row / np.linalg.norm(row)
    for dist in distances:
        z = x_wit + rng.standard_normal(x_wit.shape[0]) * dist
        z = z - (float(row @ z + bias) / float(row @ row)) * row
        v = rng.standard_normal(x_wit.shape[0])
        v = v - (v @ n) * n  # keep some tangential part
        v = v / np.linalg.norm(v) + n  # cross the plane at an angle
        eta = 1e-3 * (1.0 + float(np.linalg.norm(z)))
        f0 = oracle.query(z - eta * v, phase)
        f1 = oracle.query(z, phase)
        f2 = oracle.query(z + eta * v, phase)
        if abs(f2 + f0 - 2.0 * f1) <= kink_tolerance * (abs(f0) + abs(f2) + 1.0):
            return False
    return True


def distant_plane_witness(oracle, row: np.ndarray, bias: float,
                          x_wit: np.ndarray, rng, phase: str = CRITPOINT,
                          distance: float = 3.0, attempts: int = 2):
    """A refined witness near a distant point of a candidate hyperplane.

    Projects a random distant point onto the plane and re-refines against
    the victim along the plane normal, inside a bracket tight enough that
    only a boundary hugging the candidate plane can be found.  Used to
    cross-check a first-layer row: a clean global hyperplane reproduces at
    any distance; a derivation polluted by a nearby foreign kink does not.
    Returns None when no such boundary exists there.
    """
    normal = row / np.linalg.norm(row)
    for _ in range(attempts):
        z = x_wit + rng.standard_normal(x_wit.shape[0]) * distance
        z = z - (float(row @ z + bias) / float(row @ row)) * row
        scale = 1.0 + float(np.linalg.norm(z))
        try:
            w = refine_witness(oracle, z, normal, phase,
                               bracket_halfwidth=2e-3 * scale)
        except (LostBreakpointError, IntervalDegenerateError):
            continue
        if abs(float(row @ w.x_star + bias)) <= 1e-3 * scale * float(np.linalg.norm(row)):
            return w
    return None
