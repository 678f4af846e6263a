"""End-to-end orchestration shared by the command line and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, JoinError
from .evalkit import CorpusAnnotation, ScoreReport, localization_f1
from .textalign import (
    GlobalAlignment,
    StepAssignment,
    TokenCostMatrix,
    build_token_cost,
    extract_main_steps,
    fw_msa,
    progressive_align,
    sum_of_pairs_cost,
)
from .vidcluster import (
    DEFAULT_DELTA_AFTER,
    DEFAULT_DELTA_BEFORE,
    LocalizeHistory,
    StepLocalization,
    build_constraint_windows,
    default_lambda,
    fw_localize,
    ordered_oracle,
    predict_ordered,
    resolve_masks,
    step_masks,
    train_supervised,
    uniform_baseline,
)

logger = logging.getLogger(__name__)

METHODS = ("full", "text-only", "video-only", "uniform", "supervised")


@dataclass
class AlignResult:
    alignment: GlobalAlignment
    steps: StepAssignment
    cost: TokenCostMatrix
    objective: float


def align_corpus(sequences, K, cost=None, max_iters=300, seed=0, solver="fw", restarts=4):
    cost = cost or build_token_cost(sequences)
    if solver == "fw":
        alignment, _ = fw_msa(sequences, cost, max_iters=max_iters, seed=seed, restarts=restarts)
    elif solver == "progressive":
        alignment = progressive_align(sequences, cost)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    steps = extract_main_steps(alignment, K, sequences)
    return AlignResult(alignment, steps, cost, sum_of_pairs_cost(alignment, sequences, cost))


def _order_like(streams, item_ids):
    by_id = {s.item_id: s for s in streams}
    missing = [i for i in item_ids if i not in by_id]
    if missing:
        raise JoinError(f"no feature stream for items {missing}")
    return [by_id[i] for i in item_ids]


def localize_full(
    sequences,
    streams,
    steps: StepAssignment,
    delta_before=DEFAULT_DELTA_BEFORE,
    delta_after=DEFAULT_DELTA_AFTER,
    lam=None,
    max_iters=300,
    seed=0,
) -> tuple[StepLocalization, LocalizeHistory]:
    streams = _order_like(streams, [s.item_id for s in sequences])
    windows = build_constraint_windows(sequences, streams, delta_before, delta_after)
    return fw_localize(streams, windows, steps, lam=lam, max_iters=max_iters, seed=seed)


def localize_video_only(streams, K, lam=None, max_iters=300, seed=0):
    return fw_localize(list(streams), num_steps=K, lam=lam, max_iters=max_iters, seed=seed)


def localize_text_only(
    sequences,
    streams,
    steps: StepAssignment,
    delta_before=DEFAULT_DELTA_BEFORE,
    delta_after=DEFAULT_DELTA_AFTER,
) -> StepLocalization:
    """Place each step at the centre of its narration window, keeping the global order.

    Steps never narrated in an item fall back to their uniform position.
    """
    streams = _order_like(streams, [s.item_id for s in sequences])
    windows = build_constraint_windows(sequences, streams, delta_before, delta_after)
    K = steps.num_steps
    support = steps.step_support()
    intervals = []
    for row, stream in enumerate(streams):
        T = stream.num_intervals
        allowed = step_masks(windows.for_item(stream.item_id), steps.assignments[row], T, K)
        allowed, _ = resolve_masks(allowed, support, stream.item_id)
        target = uniform_baseline(T, K).astype(float)
        for k in range(K):
            if not allowed[:, k].all():
                target[k] = np.flatnonzero(allowed[:, k]).mean()
        cost = np.abs(np.arange(T)[:, None] - target[None, :])
        intervals.append(ordered_oracle(cost, allowed=allowed))
    return StepLocalization(
        item_ids=tuple(s.item_id for s in streams),
        intervals=intervals,
        W=None,
        lam=float("nan"),
        interval_durations=tuple(s.interval_duration_s for s in streams),
    )


def localize_uniform(streams, K) -> StepLocalization:
    streams = list(streams)
    return StepLocalization(
        item_ids=tuple(s.item_id for s in streams),
        intervals=[uniform_baseline(s.num_intervals, K) for s in streams],
        W=None,
        lam=float("nan"),
        interval_durations=tuple(s.interval_duration_s for s in streams),
    )


def error_bar(history: LocalizeHistory, localization: StepLocalization, annotation) -> tuple[float, float]:
    """Min and max F1 over the rounded solutions visited from the best one on."""
    scores = []
    for intervals in history.after_best():
        loc = StepLocalization(
            localization.item_ids, intervals, None, localization.lam, localization.interval_durations
        )
        scores.append(localization_f1(loc, annotation).f1)
    return min(scores), max(scores)


def predict_corpus(W, streams) -> StepLocalization:
    streams = list(streams)
    return StepLocalization(
        item_ids=tuple(s.item_id for s in streams),
        intervals=[predict_ordered(W, s) for s in streams],
        W=W,
        lam=float("nan"),
        interval_durations=tuple(s.interval_duration_s for s in streams),
    )


def fold_assignment(item_ids, folds: int, seed: int) -> dict[str, int]:
    """Deterministic balanced split of items into folds."""
    ids = sorted(item_ids)
    if len(ids) < folds:
        raise ConsistencyError(f"{len(ids)} items cannot be split into {folds} folds")
    perm = np.random.default_rng(seed).permutation(len(ids))
    return {ids[i]: int(rank % folds) for rank, i in enumerate(perm)}


def _fit_and_score(train, test, annotation, lam, max_iters):
    W = train_supervised(train, annotation.subset(s.item_id for s in train), lam=lam, max_iters=max_iters)
    return localization_f1(predict_corpus(W, test), annotation.subset(s.item_id for s in test))


def supervised_cv(
    streams,
    annotation: CorpusAnnotation,
    lambdas=None,
    folds: int = 5,
    seed: int = 0,
    max_iters: int = 300,
):
    """Outer k-fold evaluation with an inner (k-1)-fold search for lambda.

    Returns per-fold dicts with the chosen lambda and the test report.
    """
    streams = sorted(streams, key=lambda s: s.item_id)
    if lambdas is None:
        lambdas = [default_lambda(len(streams), annotation.num_gt_steps)]
    lambdas = list(lambdas)
    fold_of = fold_assignment([s.item_id for s in streams], folds, seed)
    results = []
    for f in range(folds):
        test = [s for s in streams if fold_of[s.item_id] == f]
        train = [s for s in streams if fold_of[s.item_id] != f]
        if len(lambdas) == 1:
            lam = lambdas[0]
        else:
            inner_folds = sorted({fold_of[s.item_id] for s in train})
            means = []
            for lam_c in lambdas:
                scores = []
                for g in inner_folds:
                    inner_test = [s for s in train if fold_of[s.item_id] == g]
                    inner_train = [s for s in train if fold_of[s.item_id] != g]
                    scores.append(_fit_and_score(inner_train, inner_test, annotation, lam_c, max_iters).f1)
                means.append(float(np.mean(scores)))
            lam = lambdas[int(np.argmax(means))]
        report: ScoreReport = _fit_and_score(train, test, annotation, lam, max_iters)
        results.append({"fold": f, "lambda": lam, "items": [s.item_id for s in test], "report": report})
    return results
