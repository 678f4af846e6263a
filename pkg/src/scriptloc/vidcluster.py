"""Video clustering: localize script steps in feature streams.

The clustering cost is the ridge-regression residual
``h(Z) = min_W 1/(2T) ||Z - XW||^2 + lambda/2 ||W||^2 = 1/(2T) Tr(Z^T B Z)``
minimized by Frank-Wolfe over ordered one-interval-per-step assignments,
optionally restricted to windows around the narration of each step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConsistencyError, InfeasibleError, JoinError
from .textalign import StepAssignment, TokenSequence

logger = logging.getLogger(__name__)

DEFAULT_DELTA_BEFORE = 0.0
DEFAULT_DELTA_AFTER = 10.0
DENSE_KERNEL_CAP = 5000


@dataclass(frozen=True)
class FeatureStream:
    item_id: str
    X: np.ndarray
    interval_duration_s: float = 1.0

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ConsistencyError(f"item {self.item_id}: features must be a non-empty T x d matrix")
        if not np.all(np.isfinite(X)):
            raise ConsistencyError(f"item {self.item_id}: non-finite feature values")
        if self.interval_duration_s <= 0:
            raise ConsistencyError(f"item {self.item_id}: interval duration must be positive")
        object.__setattr__(self, "X", X)

    @property
    def num_intervals(self) -> int:
        return self.X.shape[0]

    def interval_bounds(self, t: int) -> tuple[float, float]:
        return t * self.interval_duration_s, (t + 1) * self.interval_duration_s


@dataclass(frozen=True)
class ConstraintWindows:
    """Per item, ``A[s, t]`` is True when interval ``t`` overlaps token ``s``'s widened caption."""

    item_ids: tuple[str, ...]
    windows: tuple[np.ndarray, ...]
    delta_before: float = DEFAULT_DELTA_BEFORE
    delta_after: float = DEFAULT_DELTA_AFTER

    def for_item(self, item_id: str) -> np.ndarray:
        try:
            return self.windows[self.item_ids.index(item_id)]
        except ValueError:
            raise JoinError(f"no constraint windows for item {item_id}") from None


@dataclass
class StepLocalization:
    """One chosen interval per step per item, plus the shared classifier."""

    item_ids: tuple[str, ...]
    intervals: list[np.ndarray]
    W: np.ndarray | None
    lam: float
    interval_durations: tuple[float, ...] = ()
    objective: float = float("nan")

    @property
    def num_steps(self) -> int:
        return int(self.intervals[0].size) if self.intervals else 0

    def assignment(self, n: int, T_n: int) -> np.ndarray:
        return intervals_to_z(self.intervals[n], T_n)


@dataclass
class LocalizeHistory:
    """Per-iteration trace of :func:`fw_localize`."""

    relaxed: list = field(default_factory=list)
    gap: list = field(default_factory=list)
    rounded: list = field(default_factory=list)
    best: list = field(default_factory=list)
    rounded_intervals: list = field(default_factory=list)
    best_index: int = 0
    dropped: list = field(default_factory=list)

    def after_best(self):
        """Rounded solutions visited from the best one onwards (error-bar window)."""
        return self.rounded_intervals[self.best_index:]


def intervals_to_z(intervals: np.ndarray, T_n: int) -> np.ndarray:
    Z = np.zeros((T_n, len(intervals)))
    Z[np.asarray(intervals, dtype=int), np.arange(len(intervals))] = 1.0
    return Z


def z_to_intervals(Z: np.ndarray) -> np.ndarray:
    return np.argmax(Z, axis=0).astype(int)


def _overlaps(a: float, b: float, T: int, dur: float) -> np.ndarray:
    lo = np.arange(T) * dur
    hi = lo + dur
    if a == b:
        return (lo <= a) & (a < hi)
    return (np.maximum(lo, a) < np.minimum(hi, b))


def build_constraint_windows(
    sequences: Sequence[TokenSequence],
    streams: Sequence[FeatureStream],
    delta_before: float = DEFAULT_DELTA_BEFORE,
    delta_after: float = DEFAULT_DELTA_AFTER,
) -> ConstraintWindows:
    """Mark the intervals overlapping ``[start - delta_before, end + delta_after]`` per token.

    Overlap means a shared stretch of positive length; a zero-length window
    marks the interval that contains it.
    """
    by_id = {s.item_id: s for s in streams}
    windows = []
    for seq in sequences:
        stream = by_id.get(seq.item_id)
        if stream is None:
            raise JoinError(f"no feature stream for item {seq.item_id}")
        T, dur = stream.num_intervals, stream.interval_duration_s
        A = np.zeros((len(seq), T), dtype=bool)
        for s, (start, end) in enumerate(seq.spans):
            A[s] = _overlaps(start - delta_before, end + delta_after, T, dur)
        windows.append(A)
    return ConstraintWindows(
        tuple(seq.item_id for seq in sequences), tuple(windows), delta_before, delta_after
    )


class ResidualKernel:
    """``B = I - X (X^T X + T lambda I)^{-1} X^T`` for the stacked design matrix.

    The d x d system is Cholesky-factored once; ``B`` itself is only
    materialized when ``T <= dense_cap``, otherwise products are applied
    through the factorization.
    """

    def __init__(self, X: np.ndarray, lam: float, dense_cap: int = DENSE_KERNEL_CAP):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ConsistencyError("design matrix must be 2-D")
        if not np.all(np.isfinite(X)):
            raise ConsistencyError("design matrix has non-finite entries")
        if not lam > 0:
            raise ValueError(f"lambda must be positive, got {lam}")
        self.X = X
        self.lam = float(lam)
        self.T, self.d = X.shape
        self._chol = cho_factor(X.T @ X + self.T * self.lam * np.eye(self.d))
        self.B = None
        if self.T <= dense_cap:
            self.B = np.eye(self.T) - X @ cho_solve(self._chol, X.T)
            self.B = 0.5 * (self.B + self.B.T)

    def classifier(self, Z: np.ndarray) -> np.ndarray:
        """Ridge weights ``W*(Z) = (X^T X + T lambda I)^{-1} X^T Z``."""
        return cho_solve(self._chol, self.X.T @ Z)

    def apply(self, Z: np.ndarray) -> np.ndarray:
        # the factored form costs O(T d) per column against O(T^2) for dense B
        if self.B is not None and self.T <= 4 * self.d:
            return self.B @ Z
        return Z - self.X @ self.classifier(Z)

    def apply_block(self, Zb: np.ndarray, start: int) -> np.ndarray:
        """``B[:, rows] @ Zb`` for the rows ``start:start + len(Zb)``, without forming ``B``."""
        stop = start + Zb.shape[0]
        out = -self.X @ cho_solve(self._chol, self.X[start:stop].T @ Zb)
        out[start:stop] += Zb
        return out

    def diagonal(self) -> np.ndarray:
        if self.B is not None:
            return np.diag(self.B).copy()
        return 1.0 - np.sum(self.X * cho_solve(self._chol, self.X.T).T, axis=1)

    def dense(self) -> np.ndarray:
        if self.B is not None:
            return self.B
        return np.eye(self.T) - self.X @ cho_solve(self._chol, self.X.T)


def build_residual_kernel(X: np.ndarray, lam: float, dense_cap: int = DENSE_KERNEL_CAP) -> ResidualKernel:
    return ResidualKernel(X, lam, dense_cap)


def clustering_cost(Z: np.ndarray, kernel: ResidualKernel) -> float:
    """``h(Z) = Tr(Z^T B Z) / (2T)``."""
    Z = np.asarray(Z, dtype=float)
    if Z.shape[0] != kernel.T:
        raise ConsistencyError(f"Z has {Z.shape[0]} rows, kernel has T = {kernel.T}")
    return float(np.sum(Z * kernel.apply(Z))) / (2.0 * kernel.T)


def clustering_gradient(Z: np.ndarray, kernel: ResidualKernel) -> np.ndarray:
    return kernel.apply(np.asarray(Z, dtype=float)) / kernel.T


def step_masks(windows: np.ndarray | None, assignments: np.ndarray | None, T: int, K: int) -> np.ndarray:
    """Allowed (interval, step) cells implied by the textual constraints.

    Step ``k`` may sit in any interval marked by a token assigned to it; a
    step with no assigned token is unconstrained.
    """
    allowed = np.ones((T, K), dtype=bool)
    if windows is None or assignments is None:
        return allowed
    A = np.asarray(windows, dtype=bool)
    R = np.asarray(assignments, dtype=bool)
    if A.shape[1] != T or R.shape != (A.shape[0], K):
        raise ConsistencyError(f"windows {A.shape} / assignments {R.shape} disagree with T={T}, K={K}")
    for k in range(K):
        tokens = np.flatnonzero(R[:, k])
        if tokens.size:
            allowed[:, k] = A[tokens].any(axis=0)
    return allowed


def _running_min(v):
    """Running minimum of ``v`` and the first index attaining it."""
    running = np.minimum.accumulate(v)
    fresh = np.ones(v.size, dtype=bool)
    fresh[1:] = v[1:] < running[:-1]
    arg = np.maximum.accumulate(np.where(fresh, np.arange(v.size), 0))
    return running, arg


def ordered_oracle(
    costs: np.ndarray,
    windows: np.ndarray | None = None,
    assignments: np.ndarray | None = None,
    allowed: np.ndarray | None = None,
) -> np.ndarray:
    """Minimize ``<costs, Z>`` over ordered assignments, one interval per step.

    This is the shortest path through the cost matrix padded with zero
    columns around every step column: the path may linger in a zero column
    but leaves a step column after one row, so each step gets exactly one
    interval and intervals strictly increase. Collapsing the zero columns
    gives the recursion ``v_k[t] = C[t, k] + min_{t' < t} v_{k-1}[t']``,
    one running minimum per step. Forbidden cells cost infinity; ties go to
    the earliest interval.

    Returns the chosen interval of each step.
    """
    C = np.asarray(costs, dtype=float)
    T, K = C.shape
    if allowed is None:
        allowed = step_masks(windows, assignments, T, K)
    if K == 0:
        return np.zeros(0, dtype=int)
    if T < K:
        raise InfeasibleError(f"{K} steps cannot be ordered in {T} intervals", step=T)
    C = np.where(allowed, C, np.inf)
    back = np.zeros((K, T), dtype=int)
    value = C[:, 0]
    for k in range(1, K):
        if not np.isfinite(value).any():
            raise InfeasibleError(f"no ordered placement satisfies the windows of step {k - 1}", step=k - 1)
        running, arg = _running_min(value)
        prev = np.empty(T)
        prev[0] = np.inf
        prev[1:] = running[:-1]
        back[k, 1:] = arg[:-1]
        value = C[:, k] + prev
    t = int(np.argmin(value))
    if not np.isfinite(value[t]):
        raise InfeasibleError(f"no ordered placement satisfies the windows of step {K - 1}", step=K - 1)
    out = np.empty(K, dtype=int)
    out[-1] = t
    for k in range(K - 1, 0, -1):
        out[k - 1] = back[k, out[k]]
    return out


def uniform_baseline(T_n: int, K: int) -> np.ndarray:
    """Spread ``K`` steps evenly: step ``j`` at ``floor((j + 0.5) T_n / K)``."""
    if T_n < K:
        raise InfeasibleError(f"{K} steps cannot be placed in {T_n} intervals")
    out = np.floor((np.arange(K) + 0.5) * T_n / K).astype(int)
    for j in range(1, K):
        out[j] = max(out[j], out[j - 1] + 1)
    for j in range(K - 1, -1, -1):
        out[j] = min(out[j], T_n - K + j)
        if j < K - 1:
            out[j] = min(out[j], out[j + 1] - 1)
    return out


def default_lambda(num_items: int, num_steps: int) -> float:
    return 1.0 / (num_items * num_steps)


def resolve_masks(allowed: np.ndarray, support: np.ndarray | None, item_id: str = ""):
    """Relax constraints until the item admits an ordered placement.

    Constraints are dropped one step at a time, least text support first.
    Returns the feasible mask and the list of dropped steps.
    """
    T, K = allowed.shape
    if T < K:
        raise InfeasibleError(f"item {item_id}: {K} steps cannot fit in {T} intervals", item_id=item_id)
    support = np.zeros(K) if support is None else np.asarray(support, dtype=float)
    allowed = allowed.copy()
    dropped = []
    while True:
        try:
            ordered_oracle(np.zeros((T, K)), allowed=allowed)
            return allowed, dropped
        except InfeasibleError:
            constrained = [k for k in range(K) if not allowed[:, k].all()]
            k = min(constrained, key=lambda j: (support[j], j))
            allowed[:, k] = True
            dropped.append(k)
            logger.warning("item %s: dropped window constraint of step %d (no ordered placement fits)", item_id, k)


class _Corpus:
    """Stacked view over the streams of one localization problem."""

    def __init__(self, streams, lam, dense_cap=DENSE_KERNEL_CAP):
        self.streams = list(streams)
        self.lengths = [s.num_intervals for s in self.streams]
        self.off = np.concatenate([[0], np.cumsum(self.lengths)]).astype(int)
        dims = {s.X.shape[1] for s in self.streams}
        if len(dims) != 1:
            raise ConsistencyError(f"feature dimension differs across items: {sorted(dims)}")
        self.kernel = build_residual_kernel(np.vstack([s.X for s in self.streams]), lam, dense_cap)

    def block(self, M, n):
        return M[self.off[n]:self.off[n + 1]]

    def stack(self, intervals, K):
        Z = np.zeros((self.off[-1], K))
        for n, iv in enumerate(intervals):
            Z[self.off[n] + np.asarray(iv, dtype=int), np.arange(K)] = 1.0
        return Z


def round_solution(Z_relaxed: np.ndarray, corpus_or_streams, lam: float | None = None, masks=None):
    """Round a fractional ``Z`` through the classifier it induces.

    ``W* = W*(Z_relaxed)``; each item then takes the ordered assignment
    closest to ``X_n W*``, i.e. the oracle with cost ``-2 X_n W*``.
    Returns per-item interval arrays.
    """
    corpus = corpus_or_streams
    if not isinstance(corpus, _Corpus):
        streams = list(corpus_or_streams)
        K = Z_relaxed.shape[1]
        corpus = _Corpus(streams, default_lambda(len(streams), K) if lam is None else lam)
    W = corpus.kernel.classifier(Z_relaxed)
    K = Z_relaxed.shape[1]
    out = []
    for n, stream in enumerate(corpus.streams):
        allowed = None if masks is None else masks[n]
        out.append(ordered_oracle(-2.0 * stream.X @ W, allowed=allowed))
    return out


def _best_response_descent(corpus, intervals, feasible, K):
    """Re-place one item at a time against the others until no item moves.

    ``Tr(Z^T B Z)`` only pairs entries of the same step column and each
    column of ``Z_n`` holds a single interval, so with the other items fixed
    the cost of item ``n`` is linear: step ``k`` at interval ``t`` costs
    ``B[t, t] + 2 (B Z_rest)[t, k]``, and the ordered oracle solves it exactly.
    """
    kernel = corpus.kernel
    intervals = [iv.copy() for iv in intervals]
    Z = corpus.stack(intervals, K)
    BZ = kernel.apply(Z)
    diag = kernel.diagonal()
    value = float(np.sum(Z * BZ)) / (2.0 * kernel.T)
    improved = True
    while improved:
        improved = False
        for n in range(len(intervals)):
            lo, hi = corpus.off[n], corpus.off[n + 1]
            Zn = Z[lo:hi]
            own = kernel.apply_block(Zn, lo)[lo:hi]
            C = diag[lo:hi, None] + 2.0 * (BZ[lo:hi] - own)
            new = ordered_oracle(C, allowed=feasible[n])
            if np.array_equal(new, intervals[n]):
                continue
            D = intervals_to_z(new, hi - lo) - Zn
            BD = kernel.apply_block(D, lo)
            v = value + (2.0 * float(np.sum(D * BZ[lo:hi])) + float(np.sum(D * BD[lo:hi]))) / (2.0 * kernel.T)
            if v < value - 1e-12 * max(1.0, abs(value)):
                Z[lo:hi] += D
                BZ += BD
                intervals[n] = new
                value = v
                improved = True
    return intervals


def fw_localize(
    streams: Sequence[FeatureStream],
    windows: ConstraintWindows | None = None,
    assignments: StepAssignment | None = None,
    lam: float | None = None,
    max_iters: int = 300,
    seed: int = 0,
    num_steps: int | None = None,
    masks: Sequence[np.ndarray] | None = None,
    line_search: bool = False,
    tol: float = 1e-7,
    dense_cap: int = DENSE_KERNEL_CAP,
    polish: bool = True,
    polish_starts: int = 8,
) -> tuple[StepLocalization, LocalizeHistory]:
    """Frank-Wolfe on the hull of ordered assignments, rounding every iterate.

    Constraints come from ``windows`` + ``assignments`` (textual), from
    explicit per-item ``masks``, or are absent (ordering only, needs
    ``num_steps``). The rounded assignment with the lowest ``h`` is returned;
    with ``polish`` the ``polish_starts`` cheapest distinct assignments
    among rounded iterates and oracle corners are each improved by exact
    per-item best responses first.
    ``seed`` is accepted for interface symmetry; the solver is deterministic.
    """
    del seed
    streams = list(streams)
    if not streams:
        raise ConsistencyError("no feature streams")
    if assignments is not None:
        K = assignments.num_steps
    elif masks is not None:
        K = masks[0].shape[1]
    else:
        K = num_steps
    if not K or K < 1:
        raise ValueError("need at least one step to localize")
    if lam is None:
        lam = default_lambda(len(streams), K)
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    corpus = _Corpus(streams, lam, dense_cap)
    kernel = corpus.kernel
    hist = LocalizeHistory()

    support = None if assignments is None else assignments.step_support()
    feasible = []
    for n, stream in enumerate(streams):
        T_n = stream.num_intervals
        if masks is not None:
            allowed = np.asarray(masks[n], dtype=bool)
        elif windows is not None and assignments is not None:
            try:
                row = assignments.item_ids.index(stream.item_id)
            except ValueError:
                raise JoinError(f"no step assignment for item {stream.item_id}") from None
            allowed = step_masks(windows.for_item(stream.item_id), assignments.assignments[row], T_n, K)
        else:
            allowed = np.ones((T_n, K), dtype=bool)
        allowed, dropped = resolve_masks(allowed, support, stream.item_id)
        hist.dropped.extend((stream.item_id, k) for k in dropped)
        feasible.append(allowed)

    # start from the feasible corner nearest to the uniform placement
    start = []
    for stream, allowed in zip(streams, feasible):
        u = uniform_baseline(stream.num_intervals, K)
        dist = np.abs(np.arange(stream.num_intervals)[:, None] - u[None, :]).astype(float)
        start.append(ordered_oracle(dist, allowed=allowed))
    Z = corpus.stack(start, K)

    def record(intervals):
        h = clustering_cost(corpus.stack(intervals, K), kernel)
        hist.rounded.append(h)
        hist.rounded_intervals.append([iv.copy() for iv in intervals])
        if not hist.best or h < hist.best[-1]:
            hist.best_index = len(hist.rounded) - 1
            hist.best.append(h)
        else:
            hist.best.append(hist.best[-1])

    record(round_solution(Z, corpus, masks=feasible))
    BZ = kernel.apply(Z)
    prev_obj = float(np.sum(Z * BZ)) / (2.0 * kernel.T)
    candidates = {}  # distinct oracle corners, later used as polishing starts
    for t in range(max_iters):
        grad = BZ / kernel.T
        corner = [ordered_oracle(corpus.block(grad, n), allowed=feasible[n]) for n in range(len(streams))]
        V = corpus.stack(corner, K)
        BV = kernel.apply(V)
        if polish:
            h_corner = float(np.sum(V * BV)) / (2.0 * kernel.T)
            candidates.setdefault(tuple(np.concatenate(corner).tolist()), (h_corner, corner))
        D = V - Z
        lin = float(np.sum(grad * D))
        hist.gap.append(-lin)
        if line_search:
            curv = float(np.sum(D * (BV - BZ))) / kernel.T
            gamma = 1.0 if curv <= 0 else min(max(-lin / curv, 0.0), 1.0)
        else:
            gamma = 2.0 / (t + 2.0)
        Z = Z + gamma * D
        BZ = BZ + gamma * (BV - BZ)
        obj = float(np.sum(Z * BZ)) / (2.0 * kernel.T)
        hist.relaxed.append(obj)
        record(round_solution(Z, corpus, masks=feasible))
        if -lin <= tol * max(1.0, abs(obj)):
            break
        if t > 0 and abs(prev_obj - obj) <= tol * max(1.0, abs(prev_obj)):
            break
        prev_obj = obj

    if polish:
        for h, iv in zip(hist.rounded, hist.rounded_intervals):
            candidates.setdefault(tuple(np.concatenate(iv).tolist()), (h, iv))
        ranked = sorted(candidates.items(), key=lambda kv: (kv[1][0], kv[0]))
        for _, (_, start_iv) in ranked[:polish_starts]:
            record(_best_response_descent(corpus, start_iv, feasible, K))
    best = hist.rounded_intervals[hist.best_index]
    W = kernel.classifier(corpus.stack(best, K))
    loc = StepLocalization(
        item_ids=tuple(s.item_id for s in streams),
        intervals=[iv.copy() for iv in best],
        W=W,
        lam=float(lam),
        interval_durations=tuple(s.interval_duration_s for s in streams),
        objective=hist.best[-1],
    )
    return loc, hist


def predict_ordered(W: np.ndarray, stream: FeatureStream) -> np.ndarray:
    """Least-squares ordered prediction: ``argmin ||Z - X W||^2`` over ordered ``Z``."""
    W = np.asarray(W, dtype=float)
    if W.shape[0] != stream.X.shape[1]:
        raise ConsistencyError(f"classifier expects d = {W.shape[0]}, stream has {stream.X.shape[1]}")
    return ordered_oracle(-2.0 * stream.X @ W)


def midpoint_in(stream_duration: float, t: int, start: float, end: float) -> bool:
    mid = (t + 0.5) * stream_duration
    return start <= mid <= end


def annotation_masks(streams: Sequence[FeatureStream], annotation) -> list[np.ndarray]:
    """Per-item allowed cells from ground-truth events.

    An interval is allowed for a step when its midpoint lies inside one of
    that step's annotated events; steps absent from an item are unconstrained.
    """
    K = annotation.num_gt_steps
    by_id = annotation.by_id()
    masks = []
    for stream in streams:
        item = by_id.get(stream.item_id)
        if item is None:
            raise JoinError(f"no annotation for item {stream.item_id}")
        T = stream.num_intervals
        mids = (np.arange(T) + 0.5) * stream.interval_duration_s
        allowed = np.zeros((T, K), dtype=bool)
        present = np.zeros(K, dtype=bool)
        for ev in item.events:
            allowed[:, ev.step] |= (mids >= ev.start_s) & (mids <= ev.end_s)
            present[ev.step] = True
        allowed[:, ~present] = True
        allowed[:, present & ~allowed.any(axis=0)] = True
        masks.append(allowed)
    return masks


def train_supervised(
    streams: Sequence[FeatureStream],
    annotation,
    lam: float | None = None,
    max_iters: int = 300,
) -> np.ndarray:
    """Fit step classifiers with ground-truth windows in place of text windows."""
    streams = sorted(streams, key=lambda s: s.item_id)
    masks = annotation_masks(streams, annotation)
    loc, _ = fw_localize(streams, masks=masks, lam=lam, max_iters=max_iters)
    return loc.W
