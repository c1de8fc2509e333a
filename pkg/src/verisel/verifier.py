"""Complete branch-and-bound verification of distance queries over boxes.

decide() answers "is there an input x in the domain with distance(x) >= alpha"
exactly: SAT comes with a concrete witness whose re-evaluated distance clears
alpha, UNSAT with a certified upper bound on the distance over the whole box.

The bounding is plain interval propagation plus one exactness device: on a
subbox where every ReLU's phase is fixed (stable), the pair collapses to an
affine map that is composed explicitly and maximized at a box vertex. Boxes
are split on their widest dimension (width normalized by the domain's width)
until they prune, witness, or hit the tie rule near alpha.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .boxes import Box
from .distance import DistanceSpec
from .nets import Network, forward_many

_BATCH = 256
_SAFETY = 1e-9  # relative slack absorbing float drift between bound arithmetic and forward()


class VerifierError(ValueError):
    """Malformed query."""


class BudgetExhausted(RuntimeError):
    """Resource limit hit before the query resolved; distinct from UNSAT."""

    def __init__(self, message: str, subproblems: int):
        super().__init__(message)
        self.subproblems = subproblems


@dataclass(frozen=True)
class BabConfig:
    min_box_width: float = 1e-4  # fraction of the domain width, per dimension
    tie_tolerance: float = 1e-6
    max_subproblems: int = 1_000_000

    def __post_init__(self) -> None:
        if not (0.0 < self.min_box_width < 1.0):
            raise ValueError("min_box_width must be in (0, 1)")
        if self.tie_tolerance <= 0.0:
            raise ValueError("tie_tolerance must be positive")
        if self.max_subproblems < 1:
            raise ValueError("max_subproblems must be positive")


class VerdictKind(Enum):
    SAT = "SAT"
    UNSAT = "UNSAT"


@dataclass(frozen=True)
class Verdict:
    kind: VerdictKind
    witness: np.ndarray | None  # present iff SAT
    certified_bound: float | None  # present iff UNSAT
    subproblems: int = 0


@dataclass(frozen=True)
class Bracket:
    """Certified enclosure of a maximum: lower <= true max <= upper."""

    lower: float
    upper: float
    witness: np.ndarray | None
    empty: bool = False
    subproblems: int = 0


@dataclass(frozen=True)
class Query:
    pair: Network
    distance: DistanceSpec
    domain: Box
    alpha: float

    def __post_init__(self) -> None:
        if self.pair.input_dim != self.domain.dim:
            raise VerifierError(
                f"domain has {self.domain.dim} dims, pair expects {self.pair.input_dim}"
            )
        if self.pair.output_dim % 2 != 0:
            raise VerifierError("pair network must have an even output dimension")
        if self.distance.kind == "cdist" and self.pair.output_dim != 2:
            raise VerifierError("cdist queries need scalar-output pairs")
        if not np.isfinite(self.alpha) or self.alpha < 0.0:
            raise VerifierError("alpha must be a nonnegative real")


def propagate_bounds(net: Network, box: Box) -> list[tuple[np.ndarray, np.ndarray]]:
    """Interval pre-activation bounds, one (lo, hi) pair per layer."""
    if net.input_dim != box.dim:
        raise VerifierError(f"box has {box.dim} dims, net expects {net.input_dim}")
    lo = box.lower[None, :]
    hi = box.upper[None, :]
    per_layer, _, _ = _interval_sweep(_compile(net), lo, hi)
    return [(plo[0], phi[0]) for plo, phi in per_layer]


def _compile(net: Network):
    """Split each weight matrix by sign once; every sweep reuses it."""
    layers = []
    for layer in net.layers:
        w = layer.weights
        layers.append((w, np.maximum(w, 0.0), np.minimum(w, 0.0), layer.bias, layer.activation))
    return layers


def _interval_sweep(compiled, lo: np.ndarray, hi: np.ndarray):
    """Propagate (B, d) input boxes; returns per-layer pre-activation bounds,
    output bounds, and per-box ReLU stability (True = every phase fixed)."""
    per_layer = []
    stable = np.ones(lo.shape[0], dtype=bool)
    masks = []  # active-phase indicator per hidden layer, (B, n)
    for w, wp, wn, b, act in compiled:
        pre_lo = lo @ wp.T + hi @ wn.T + b
        pre_hi = hi @ wp.T + lo @ wn.T + b
        per_layer.append((pre_lo, pre_hi))
        if act == "relu":
            active = pre_lo >= 0.0
            inactive = pre_hi <= 0.0
            stable &= np.all(active | inactive, axis=1)
            masks.append(active.astype(np.float64))
            lo = np.maximum(pre_lo, 0.0)
            hi = np.maximum(pre_hi, 0.0)
        else:
            lo, hi = pre_lo, pre_hi
    return per_layer, (lo, hi), (stable, masks)


def _stable_affine(compiled, masks_sel: list[np.ndarray], n_sel: int):
    """Exact affine output map (A, c) for boxes whose ReLU phases are fixed."""
    w0 = compiled[0][0]
    a = np.broadcast_to(w0, (n_sel,) + w0.shape).copy()
    c = np.broadcast_to(compiled[0][3], (n_sel, w0.shape[0])).copy()
    for idx in range(1, len(compiled)):
        m = masks_sel[idx - 1]
        a *= m[:, :, None]
        c *= m
        w = compiled[idx][0]
        a = np.einsum("oh,bhd->bod", w, a)
        c = c @ w.T + compiled[idx][3]
    return a, c


def _inflate(v: np.ndarray) -> np.ndarray:
    return v + _SAFETY * (1.0 + np.abs(v))


class _PairBounds:
    """Per-batch box analysis shared by decide() and maximize()."""

    def __init__(self, pair: Network, spec: DistanceSpec):
        self.net = pair
        self.compiled = _compile(pair)
        self.spec = spec
        self.k = pair.output_dim // 2

    def analyze(self, lo: np.ndarray, hi: np.ndarray):
        """Returns (ub, infeasible, clear, stable, vertices) for a (B, d) batch.

        ub: sound upper bound on |y1-y2| (summed over coords) per box;
        infeasible: every category provably violated on the box;
        clear: some category provably satisfied on the whole box;
        vertices: (indices, points) realizing stable boxes' exact maxima.
        """
        _, (out_lo, out_hi), (stable, masks) = _interval_sweep(self.compiled, lo, hi)
        k = self.k
        d_lo = out_lo[:, :k] - out_hi[:, k:]
        d_hi = out_hi[:, :k] - out_lo[:, k:]
        abs_ub = np.maximum(np.abs(d_lo), np.abs(d_hi))
        ub = np.sum(abs_ub, axis=1)

        infeasible = np.zeros(lo.shape[0], dtype=bool)
        clear = np.ones(lo.shape[0], dtype=bool)
        if self.spec.kind == "cdist":
            possible = []
            satisfied = []
            for cat in self.spec.categories:
                s1, s2 = cat.signs
                lo1, hi1 = out_lo[:, 0], out_hi[:, 0]
                lo2, hi2 = out_lo[:, 1], out_hi[:, 1]
                p1 = hi1 >= 0.0 if s1 > 0 else lo1 <= 0.0
                p2 = hi2 >= 0.0 if s2 > 0 else lo2 <= 0.0
                possible.append(p1 & p2)
                f1 = lo1 >= 0.0 if s1 > 0 else hi1 <= 0.0
                f2 = lo2 >= 0.0 if s2 > 0 else hi2 <= 0.0
                satisfied.append(f1 & f2)
            infeasible = ~np.logical_or.reduce(possible)
            clear = np.logical_or.reduce(satisfied)

        vertices = None
        sel = np.flatnonzero(stable)
        if sel.size:
            a, c = _stable_affine(self.compiled, [m[sel] for m in masks], sel.size)
            g = a[:, :k, :] - a[:, k:, :]
            h = c[:, :k] - c[:, k:]
            lo_s = lo[sel][:, None, :]
            hi_s = hi[sel][:, None, :]
            vmax = h + np.sum(np.where(g >= 0.0, g * hi_s, g * lo_s), axis=2)
            vmin = h + np.sum(np.where(g >= 0.0, g * lo_s, g * hi_s), axis=2)
            exact = np.sum(np.maximum(np.abs(vmax), np.abs(vmin)), axis=1)
            ub[sel] = np.minimum(ub[sel], exact)
            if k == 1:
                take_max = np.abs(vmax[:, 0]) >= np.abs(vmin[:, 0])
                g0 = g[:, 0, :]
                v_plus = np.where(g0 >= 0.0, hi[sel], lo[sel])
                v_minus = np.where(g0 >= 0.0, lo[sel], hi[sel])
                vertices = (sel, np.where(take_max[:, None], v_plus, v_minus))
        return ub, infeasible, clear, stable, vertices

    def evaluate(self, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Concrete distances and feasibility flags for candidate points."""
        if xs.size == 0:
            return np.zeros(0), np.zeros(0, dtype=bool)
        y = forward_many(self.net, xs)
        k = self.k
        diff = y[:, :k] - y[:, k:]
        vals = np.sum(np.abs(diff), axis=1)
        if self.spec.kind == "l1":
            return vals, np.ones(xs.shape[0], dtype=bool)
        feas = np.zeros(xs.shape[0], dtype=bool)
        for cat in self.spec.categories:
            s1, s2 = cat.signs
            feas |= (s1 * y[:, 0] >= 0.0) & (s2 * y[:, 1] >= 0.0)
        return vals, feas


def _split_rows(lo_row: np.ndarray, hi_row: np.ndarray, dim: int):
    """Bisect one box row; returns None when the float midpoint cannot move."""
    mid = 0.5 * (lo_row[dim] + hi_row[dim])
    if not (lo_row[dim] < mid < hi_row[dim]):
        return None
    left_hi = hi_row.copy()
    left_hi[dim] = mid
    right_lo = lo_row.copy()
    right_lo[dim] = mid
    return (lo_row, left_hi), (right_lo, hi_row)


def decide(query: Query, config: BabConfig | None = None) -> Verdict:
    """Complete SAT/UNSAT answer to "exists x in domain: distance(x) >= alpha"."""
    cfg = config or BabConfig()
    pb = _PairBounds(query.pair, query.distance)
    domain = query.domain
    alpha = float(query.alpha)
    norm = np.where(domain.width > 0.0, domain.width, 1.0)

    pend_lo = [domain.lower.copy()]
    pend_hi = [domain.upper.copy()]
    best_bound = 0.0  # pointwise distance is 0 wherever no category holds
    processed = 0

    while pend_lo:
        take = min(_BATCH, len(pend_lo))
        lo = np.array(pend_lo[-take:])
        hi = np.array(pend_hi[-take:])
        del pend_lo[-take:], pend_hi[-take:]
        processed += take
        if processed > cfg.max_subproblems:
            raise BudgetExhausted(
                f"subproblem budget {cfg.max_subproblems} exhausted at alpha={alpha}", processed
            )

        ub, infeasible, _, _, vertices = pb.analyze(lo, hi)
        ub_rec = _inflate(ub)

        # Witness candidates: box centers, plus exact-max vertices of stable boxes.
        xs = 0.5 * (lo + hi)
        if vertices is not None:
            xs = np.vstack([xs, vertices[1]])
        vals, feas = pb.evaluate(xs)
        hit = feas & (vals >= alpha)
        if np.any(hit):
            i = int(np.argmax(hit))
            return Verdict(VerdictKind.SAT, xs[i], None, processed)

        drop = infeasible.copy()
        # Value pruning allows tie_tolerance slack, so a box whose bound sits
        # within the slack of alpha resolves as UNSAT instead of splitting
        # forever. At alpha=0 the question is pure feasibility; never
        # value-prune there (every |distance| bound is >= 0).
        slack = cfg.tie_tolerance if alpha > 0.0 else 0.0
        prune = (~drop) & (ub_rec < alpha + slack)
        if np.any(prune):
            best_bound = max(best_bound, float(np.max(ub_rec[prune])))
        drop |= prune

        keep = np.flatnonzero(~drop)
        if keep.size == 0:
            continue
        widths = (hi[keep] - lo[keep]) / norm
        widest = np.argmax(widths, axis=1)
        for j, box_i in enumerate(keep):
            parts = _split_rows(lo[box_i], hi[box_i], int(widest[j]))
            if parts is None:
                raise BudgetExhausted(
                    f"box at float resolution still undecided at alpha={alpha}", processed
                )
            for part_lo, part_hi in parts:
                pend_lo.append(part_lo)
                pend_hi.append(part_hi)

    return Verdict(VerdictKind.UNSAT, None, best_bound, processed)


def maximize(
    pair: Network,
    distance: DistanceSpec,
    domain: Box,
    gap: float,
    config: BabConfig | None = None,
) -> Bracket:
    """Certified bracket of the max distance over the domain, upper - lower <= gap.

    For category-constrained distances the max ranges over feasible points; a
    domain with no feasible point at all comes back with empty=True.
    """
    if gap <= 0.0:
        raise VerifierError("gap must be positive")
    cfg = config or BabConfig()
    Query(pair, distance, domain, 0.0)  # reuse validation
    pb = _PairBounds(pair, distance)
    norm = np.where(domain.width > 0.0, domain.width, 1.0)

    best = -np.inf
    best_x = None
    dropped_ub = 0.0 if distance.kind == "cdist" else -np.inf
    processed = 0
    heap: list[tuple[float, int, np.ndarray, np.ndarray]] = []
    serial = 0

    def push(neg_ub: float, lo_row: np.ndarray, hi_row: np.ndarray) -> None:
        nonlocal serial
        heapq.heappush(heap, (neg_ub, serial, lo_row, hi_row))
        serial += 1

    push(-np.inf, domain.lower.copy(), domain.upper.copy())

    while heap:
        open_ub = -heap[0][0]
        if best > -np.inf and max(open_ub, dropped_ub, best) - best <= gap:
            break
        take = min(64, len(heap))
        popped = [heapq.heappop(heap) for _ in range(take)]
        lo = np.array([p[2] for p in popped])
        hi = np.array([p[3] for p in popped])
        processed += take
        if processed > cfg.max_subproblems:
            raise BudgetExhausted(f"subproblem budget {cfg.max_subproblems} exhausted", processed)

        ub, infeasible, clear, stable, vertices = pb.analyze(lo, hi)
        ub_rec = _inflate(ub)

        xs = 0.5 * (lo + hi)
        if vertices is not None:
            xs = np.vstack([xs, vertices[1]])
        vals, feas = pb.evaluate(xs)
        if np.any(feas):
            i = int(np.argmax(np.where(feas, vals, -np.inf)))
            if vals[i] > best:
                best = float(vals[i])
                best_x = xs[i]

        scalar = pb.k == 1
        for j in range(lo.shape[0]):
            if infeasible[j]:
                dropped_ub = max(dropped_ub, 0.0)
                continue
            # Stable, whole box inside a category, scalar output: the vertex
            # candidate above realized this box's exact max; bound is final.
            if stable[j] and clear[j] and scalar:
                dropped_ub = max(dropped_ub, float(ub_rec[j]))
                continue
            if ub_rec[j] <= best:
                dropped_ub = max(dropped_ub, float(ub_rec[j]))
                continue
            widths = (hi[j] - lo[j]) / norm
            dim = int(np.argmax(widths))
            parts = _split_rows(lo[j], hi[j], dim)
            if parts is None:
                # Box is a float-resolution point; its center eval was exact.
                dropped_ub = max(dropped_ub, float(ub_rec[j]))
                continue
            for part_lo, part_hi in parts:
                push(-float(ub_rec[j]), part_lo.copy(), part_hi.copy())

    if best == -np.inf:
        if heap:
            raise BudgetExhausted("no feasible point found before the budget ran out", processed)
        return Bracket(0.0, 0.0, None, empty=True, subproblems=processed)
    upper = max(best, dropped_ub)
    if heap:
        upper = max(upper, -heap[0][0])
    return Bracket(float(best), float(upper), best_x, empty=False, subproblems=processed)
