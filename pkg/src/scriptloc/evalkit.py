"""Scoring: localization F1 under a global step matching, script recovery, corpus statistics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConsistencyError, JoinError, SchemaError


@dataclass(frozen=True)
class Event:
    step: int
    start_s: float
    end_s: float


@dataclass(frozen=True)
class ItemAnnotation:
    item_id: str
    events: tuple[Event, ...]

    def step_sequence(self) -> list[int]:
        return [ev.step for ev in self.events]


@dataclass(frozen=True)
class CorpusAnnotation:
    num_gt_steps: int
    items: tuple[ItemAnnotation, ...]

    def __post_init__(self):
        if self.num_gt_steps < 1:
            raise SchemaError("num_gt_steps must be >= 1")
        for item in self.items:
            for ev in item.events:
                if not 0 <= ev.step < self.num_gt_steps:
                    raise SchemaError(
                        f"item {item.item_id}: step {ev.step} outside [0, {self.num_gt_steps})"
                    )
                if ev.start_s > ev.end_s:
                    raise SchemaError(f"item {item.item_id}: event ends before it starts")

    def by_id(self) -> dict[str, ItemAnnotation]:
        return {item.item_id: item for item in self.items}

    def subset(self, item_ids) -> "CorpusAnnotation":
        keep = set(item_ids)
        return CorpusAnnotation(self.num_gt_steps, tuple(i for i in self.items if i.item_id in keep))


@dataclass
class CorpusStats:
    order_error: float | None
    missing: float
    repetition: float | None
    lcs_lengths: list[int] = field(default_factory=list)
    unique_counts: list[int] = field(default_factory=list)
    event_counts: list[int] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "order_error": self.order_error,
            "missing": self.missing,
            "repetition": self.repetition,
            "per_item": [
                {"l": l, "u": u, "g": g}
                for l, u, g in zip(self.lcs_lengths, self.unique_counts, self.event_counts)
            ],
        }


@dataclass
class ScoreReport:
    precision: float
    recall: float
    f1: float
    matching: list[tuple[int, int]]
    correct: int
    num_predictions: int
    num_gt_occurrences: int
    per_item: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "matching": [list(p) for p in self.matching],
            "correct": self.correct,
            "num_predictions": self.num_predictions,
            "num_gt_occurrences": self.num_gt_occurrences,
            "per_item": self.per_item,
        }


def f1_score(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def lcs_length(a: Sequence, b: Sequence) -> int:
    """Length of the longest common subsequence; ``None`` never matches."""
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            if x is not None and x == y:
                cur.append(prev[j] + 1)
            else:
                cur.append(max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def lcs(a: Sequence, b: Sequence) -> list:
    """One longest common subsequence of ``a`` and ``b``."""
    n, m = len(a), len(b)
    table = np.zeros((n + 1, m + 1), dtype=int)
    for i in range(n):
        for j in range(m):
            if a[i] is not None and a[i] == b[j]:
                table[i + 1, j + 1] = table[i, j] + 1
            else:
                table[i + 1, j + 1] = max(table[i, j + 1], table[i + 1, j])
    out = []
    i, j = n, m
    while i > 0 and j > 0:
        if a[i - 1] is not None and a[i - 1] == b[j - 1]:
            out.append(a[i - 1])
            i, j = i - 1, j - 1
        elif table[i - 1, j] >= table[i, j - 1]:
            i -= 1
        else:
            j -= 1
    return out[::-1]


def _first_occurrences(seq):
    seen = set()
    out = []
    for x in seq:
        if x not in seen:
            seen.add(x)
            out.append(x)
    return out


def corpus_stats(annotation: CorpusAnnotation) -> CorpusStats:
    """Order error, missing-step and repetition fractions of an annotated corpus.

    Repeated steps are reduced to their first occurrence before the longest
    common subsequence with the canonical order ``0..K-1`` is taken.
    """
    K = annotation.num_gt_steps
    script = list(range(K))
    ls, us, gs = [], [], []
    for item in annotation.items:
        seq = item.step_sequence()
        unique = _first_occurrences(seq)
        ls.append(lcs_length(unique, script))
        us.append(len(unique))
        gs.append(len(seq))
    N = len(annotation.items)
    su, sg = sum(us), sum(gs)
    order = None if su == 0 else 1.0 - sum(ls) / su
    missing = 1.0 - su / (K * N) if N else 0.0
    repetition = None if su == 0 else 1.0 - su / sg
    return CorpusStats(order, missing, repetition, ls, us, gs)


def hungarian_match(score_matrix: np.ndarray) -> list[tuple[int, int]]:
    """One-to-one matching of predicted steps (rows) to ground-truth steps (cols) maximizing total score."""
    S = np.asarray(score_matrix, dtype=float)
    if S.size == 0:
        return []
    if not np.all(np.isfinite(S)):
        raise ConsistencyError("score matrix must be finite")
    rows, cols = linear_sum_assignment(S, maximize=True)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


def hit_matrix(localization, annotation: CorpusAnnotation):
    """Count, per (predicted step, ground-truth step), the items where the prediction is a hit.

    A prediction is a hit when its interval midpoint falls inside one of the
    item's events for that ground-truth step.
    """
    K_pred = localization.num_steps
    K_gt = annotation.num_gt_steps
    by_id = annotation.by_id()
    hits = np.zeros((len(localization.item_ids), K_pred, K_gt), dtype=int)
    present = np.zeros((len(localization.item_ids), K_gt), dtype=bool)
    for n, item_id in enumerate(localization.item_ids):
        item = by_id.get(item_id)
        if item is None:
            raise JoinError(f"no annotation for localized item {item_id}")
        dur = localization.interval_durations[n] if localization.interval_durations else 1.0
        mids = (np.asarray(localization.intervals[n], dtype=float) + 0.5) * dur
        for ev in item.events:
            present[n, ev.step] = True
            inside = (mids >= ev.start_s) & (mids <= ev.end_s)
            hits[n, inside, ev.step] = 1
    return hits, present


def localization_f1(
    localization,
    annotation: CorpusAnnotation,
    matching_mode: str = "hungarian",
    mapping: Mapping[int, int] | None = None,
) -> ScoreReport:
    """Precision, recall and F1 of one-interval-per-step predictions.

    Recall divides correct predictions by the ground-truth steps present
    across items; precision divides by ``N * K_pred``.
    """
    hits, present = hit_matrix(localization, annotation)
    N, K_pred, K_gt = hits.shape
    counts = hits.sum(axis=0)
    if matching_mode == "hungarian":
        matching = hungarian_match(counts)
    elif matching_mode == "given-mapping":
        if mapping is None:
            raise ConsistencyError("given-mapping mode needs a mapping")
        matching = []
        for k, g in sorted(mapping.items()):
            if not (0 <= k < K_pred and 0 <= g < K_gt):
                raise ConsistencyError(f"mapping {k} -> {g} references an unknown step")
            matching.append((int(k), int(g)))
    else:
        raise ValueError(f"unknown matching mode {matching_mode!r}")
    correct = int(sum(counts[k, g] for k, g in matching))
    occurrences = int(present.sum())
    predictions = N * K_pred
    precision = correct / predictions if predictions else 0.0
    recall = correct / occurrences if occurrences else 0.0
    per_item = {
        item_id: int(sum(hits[n, k, g] for k, g in matching))
        for n, item_id in enumerate(localization.item_ids)
    }
    return ScoreReport(
        precision, recall, f1_score(precision, recall), matching, correct, predictions, occurrences, per_item
    )


def script_precision_recall(
    recovered: Sequence, gt_script: Sequence, equivalence: Mapping | None = None
) -> tuple[float, float]:
    """Precision and recall of a recovered ordered script.

    ``equivalence`` maps recovered labels to ground-truth labels (missing
    keys map to nothing); by default labels are compared directly.
    """
    if equivalence is None:
        mapped = list(recovered)
    else:
        mapped = [equivalence.get(label) for label in recovered]
    common = lcs(mapped, list(gt_script))
    precision = len(common) / len(recovered) if len(recovered) else 0.0
    recall = len(set(common)) / len(gt_script) if len(gt_script) else 0.0
    return precision, recall
