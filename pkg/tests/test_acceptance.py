"""Acceptance suite: one test per criterion, each printing a single pass/fail line."""

from __future__ import annotations

import itertools
import json
import time

import numpy as np
import pytest

from conftest import random_corpus
from scriptloc.cli import main as cli_main
from scriptloc.evalkit import (
    CorpusAnnotation,
    Event,
    ItemAnnotation,
    corpus_stats,
    hungarian_match,
    localization_f1,
)
from scriptloc.pipeline import align_corpus, localize_full, localize_uniform, localize_video_only
from scriptloc.synthgen import SynthConfig, brute_force_localize, brute_force_msa, generate
from scriptloc.textalign import build_token_cost, fw_msa, msa_linear_oracle, progressive_align, sum_of_pairs_cost
from scriptloc.vidcluster import (
    FeatureStream,
    ResidualKernel,
    clustering_cost,
    clustering_gradient,
    fw_localize,
    ordered_oracle,
)

pytestmark = pytest.mark.acceptance


def test_msa_oracle_equivalence(record_acceptance):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(100):
        S = int(rng.integers(1, 5))
        L = int(rng.integers(S, 7))
        G = rng.standard_normal((S, L))
        got = msa_linear_oracle(G)
        value = G[np.arange(S), got].sum()
        best = min(G[np.arange(S), list(c)].sum() for c in itertools.combinations(range(L), S))
        mismatches += not (value == best and np.all(np.diff(got) > 0))
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10
    record_acceptance(1, "MSA oracle equivalence", ok, f"{mismatches}/100 mismatches, {elapsed:.2f} s")
    assert ok


def test_localization_oracle_equivalence(record_acceptance):
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    mismatches = constrained = 0
    for i in range(200):
        T = int(rng.integers(1, 9))
        K = int(rng.integers(1, min(T, 3) + 1))
        C = rng.standard_normal((T, K))
        allowed = np.ones((T, K), dtype=bool)
        if i % 2:
            # constrained half: redraw until some ordered placement survives
            while True:
                allowed = rng.random((T, K)) < 0.6
                feasible = [c for c in itertools.combinations(range(T), K)
                            if all(allowed[t, k] for k, t in enumerate(c))]
                if feasible:
                    break
            constrained += 1
        else:
            feasible = list(itertools.combinations(range(T), K))
        best = min(C[list(c), np.arange(K)].sum() for c in feasible)
        got = ordered_oracle(C, allowed=allowed)
        ok_item = (C[got, np.arange(K)].sum() == best and np.all(np.diff(got) > 0)
                   and all(allowed[t, k] for k, t in enumerate(got)))
        mismatches += not ok_item
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 30
    record_acceptance(2, "localization oracle equivalence", ok,
                      f"{mismatches}/200 mismatches ({constrained} constrained), {elapsed:.2f} s")
    assert ok


def test_diffrac_identity(record_acceptance):
    rng = np.random.default_rng(303)
    start = time.perf_counter()
    worst_rel = worst_grad = 0.0
    eig_ok = True
    for _ in range(50):
        T = int(rng.integers(5, 60))
        d = int(rng.integers(1, 12))
        K = int(rng.integers(1, 6))
        lam = float(10 ** rng.uniform(-3, 0))
        X = rng.standard_normal((T, d))
        Z = rng.random((T, K))
        kernel = ResidualKernel(X, lam)
        # independent ridge fit: augmented least squares
        A = np.vstack([X, np.sqrt(T * lam) * np.eye(d)])
        b = np.vstack([Z, np.zeros((d, K))])
        W_ref = np.linalg.lstsq(A, b, rcond=None)[0]
        h_ref = np.sum((Z - X @ W_ref) ** 2) / (2 * T) + lam / 2 * np.sum(W_ref ** 2)
        worst_rel = max(worst_rel, abs(clustering_cost(Z, kernel) - h_ref) / abs(h_ref))
        W = kernel.classifier(Z)
        grad_W = -X.T @ (Z - X @ W) / T + lam * W
        worst_grad = max(worst_grad, float(np.linalg.norm(grad_W)))
        ev = np.linalg.eigvalsh(kernel.dense())
        eig_ok &= bool(ev.min() > 0 and ev.max() <= 1 + 1e-12)
    elapsed = time.perf_counter() - start
    ok = worst_rel < 1e-8 and worst_grad < 1e-8 and eig_ok and elapsed < 10
    record_acceptance(3, "DIFFRAC identity", ok,
                      f"max rel err {worst_rel:.1e}, max stationarity norm {worst_grad:.1e}, "
                      f"eigenvalues in (0, 1]: {eig_ok}, {elapsed:.2f} s")
    assert ok


def test_gradient_check(record_acceptance):
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(10):
        T, d, K = 20, 4, 3
        X = rng.standard_normal((T, d))
        Z = rng.random((T, K))
        kernel = ResidualKernel(X, 0.1)
        G = clustering_gradient(Z, kernel)
        num = np.zeros_like(Z)
        eps = 1e-5
        for idx in np.ndindex(*Z.shape):
            E = np.zeros_like(Z)
            E[idx] = eps
            num[idx] = (clustering_cost(Z + E, kernel) - clustering_cost(Z - E, kernel)) / (2 * eps)
        worst = max(worst, float(np.linalg.norm(G - num) / np.linalg.norm(num)))
    ok = worst < 1e-5
    record_acceptance(4, "gradient check", ok, f"max relative error {worst:.1e}")
    assert ok


def test_fw_beats_progressive(record_acceptance):
    rng = np.random.default_rng(505)
    start = time.perf_counter()
    not_worse = strictly = 0
    for i in range(50):
        N = int(rng.integers(3, 11))
        seqs = random_corpus(rng, N, 12, 8, min_len=3)
        cost = build_token_cost(seqs)
        prog = sum_of_pairs_cost(progressive_align(seqs, cost), seqs, cost)
        al, _ = fw_msa(seqs, cost, seed=i)
        fw = sum_of_pairs_cost(al, seqs, cost)
        not_worse += fw <= prog
        strictly += fw < prog
    elapsed = time.perf_counter() - start
    ok = not_worse >= 48 and strictly >= 25 and elapsed < 120
    record_acceptance(5, "FW vs progressive alignment", ok,
                      f"<= in {not_worse}/50, < in {strictly}/50, {elapsed:.1f} s")
    assert ok


def test_small_instance_optimality(record_acceptance):
    rng = np.random.default_rng(606)
    msa_opt = 0
    for i in range(50):
        N = int(rng.integers(2, 4))
        seqs = random_corpus(rng, N, 4, 3)
        cost = build_token_cost(seqs)
        _, best = brute_force_msa(seqs, cost, 6)
        al, _ = fw_msa(seqs, cost, num_slots=6, seed=i)
        msa_opt += sum_of_pairs_cost(al, seqs, cost) == best
    loc_opt = 0
    for i in range(50):
        T = int(rng.integers(4, 8))
        K = int(rng.integers(2, 4))
        streams = [FeatureStream(f"i{n}", rng.standard_normal((T, 3))) for n in range(2)]
        masks = []
        for _ in streams:
            m = np.ones((T, K), dtype=bool)
            if i % 2:
                # window each step around its uniform position
                for k in range(K):
                    c = int((k + 0.5) * T / K)
                    m[:, k] = np.abs(np.arange(T) - c) <= 2
            masks.append(m)
        loc, _ = fw_localize(streams, masks=masks)
        kernel = ResidualKernel(np.vstack([s.X for s in streams]), loc.lam)
        _, best = brute_force_localize(kernel, [T, T], masks)
        loc_opt += loc.objective <= best + 1e-12 * max(1.0, abs(best))
    ok = msa_opt >= 45 and loc_opt >= 45
    record_acceptance(6, "small-instance optimality", ok,
                      f"fw_msa optimal {msa_opt}/50, fw_localize optimal {loc_opt}/50")
    assert ok


def test_end_to_end_zero_noise(record_acceptance):
    start = time.perf_counter()
    cfg = SynthConfig.zero_noise(num_items=15, num_steps=6, min_intervals=60, max_intervals=60, dim=20)
    corpus = generate(cfg)
    res = align_corpus(corpus.sequences, 6)
    loc, _ = localize_full(corpus.sequences, corpus.streams, res.steps)
    f1 = localization_f1(loc, corpus.annotation).f1
    elapsed = time.perf_counter() - start
    script_ok = res.steps.labels == corpus.true_script
    ok = script_ok and f1 == 1.0 and elapsed < 60
    record_acceptance(7, "end-to-end zero-noise recovery", ok,
                      f"script exact: {script_ok}, F1 = {f1:.4f}, {elapsed:.1f} s")
    assert ok


def test_noise_robustness(record_acceptance):
    start = time.perf_counter()
    margins, beats_video = [], 0
    for seed in range(20):
        corpus = generate(SynthConfig.default_noise(seed=seed))
        K = corpus.config.num_steps
        res = align_corpus(corpus.sequences, K, seed=seed)
        full, _ = localize_full(corpus.sequences, corpus.streams, res.steps)
        video, _ = localize_video_only(corpus.streams, res.steps.num_steps)
        f_full = localization_f1(full, corpus.annotation).f1
        f_video = localization_f1(video, corpus.annotation).f1
        f_unif = localization_f1(localize_uniform(corpus.streams, res.steps.num_steps), corpus.annotation).f1
        margins.append(f_full - f_unif)
        beats_video += f_full > f_video
    elapsed = time.perf_counter() - start
    min_margin = min(margins)
    ok = min_margin >= 0.15 and beats_video >= 16 and elapsed < 300
    record_acceptance(8, "noise robustness", ok,
                      f"min margin over uniform {min_margin:.3f} (mean {np.mean(margins):.3f}), "
                      f"beats video-only on {beats_video}/20 seeds, {elapsed:.1f} s")
    assert ok


def _annotation(K, sequences):
    items = tuple(
        ItemAnnotation(f"i{n}", tuple(Event(k, 3.0 * j, 3.0 * j + 2.0) for j, k in enumerate(steps)))
        for n, steps in enumerate(sequences)
    )
    return CorpusAnnotation(K, items)


def test_statistics(record_acceptance):
    fixtures = [
        (_annotation(3, [[0, 2, 1]]), (1 / 3, 0.0, 0.0)),
        (_annotation(4, [[0, 1, 1, 2], [2, 0]]), (1 / 5, 3 / 8, 1 / 6)),
        (_annotation(2, [[1, 0, 1]]), (1 / 2, 0.0, 1 / 3)),
    ]
    exact = 0
    for ann, expected in fixtures:
        s = corpus_stats(ann)
        exact += all(abs(a - b) <= 1e-12 for a, b in zip((s.order_error, s.missing, s.repetition), expected))
    worst = 0.0
    for seed in range(5):
        cfg = SynthConfig(num_items=30, seed=seed)
        s = corpus_stats(generate(cfg).annotation)
        worst = max(worst, abs(s.order_error - cfg.swap_rate), abs(s.missing - cfg.miss_rate),
                    abs(s.repetition - cfg.repeat_rate))
    ok = exact == 3 and worst <= 0.05
    record_acceptance(9, "corpus statistics", ok,
                      f"{exact}/3 fixtures exact, generated corpora max deviation {worst:.3f}")
    assert ok


def test_metric_correctness(record_acceptance):
    rng = np.random.default_rng(1010)
    hung_ok = True
    for _ in range(60):
        r, c = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        S = rng.integers(0, 6, size=(r, c)).astype(float)
        got = sum(S[x, y] for x, y in hungarian_match(S))
        if r <= c:
            best = max(sum(S[i, p] for i, p in enumerate(perm)) for perm in itertools.permutations(range(c), r))
        else:
            best = max(sum(S[p, j] for j, p in enumerate(perm)) for perm in itertools.permutations(range(r), c))
        hung_ok &= got == best

    from scriptloc.vidcluster import StepLocalization

    ann = CorpusAnnotation(2, (
        ItemAnnotation("a", (Event(0, 0.0, 2.0), Event(1, 4.0, 6.0))),
        ItemAnnotation("b", (Event(0, 0.0, 2.0),)),
    ))
    loc = StepLocalization(("a", "b"), [np.array([0, 8]), np.array([1, 8])], None, 1.0, (1.0, 1.0))
    rep = localization_f1(loc, ann)
    example_ok = (rep.correct, rep.num_predictions, rep.num_gt_occurrences) == (2, 4, 3) and \
        abs(rep.f1 - 4 / 7) < 1e-15

    ann2 = _annotation(4, [list(rng.permutation(4)) for _ in range(8)])
    preds = [np.sort(rng.choice(12, size=4, replace=False)) for _ in range(8)]
    ids = tuple(f"i{n}" for n in range(8))
    base = localization_f1(StepLocalization(ids, preds, None, 1.0, (1.0,) * 8), ann2).f1
    relabel_ok = all(
        localization_f1(StepLocalization(ids, [p[list(perm)] for p in preds], None, 1.0, (1.0,) * 8), ann2).f1 == base
        for perm in itertools.permutations(range(4))
    )
    ok = hung_ok and example_ok and relabel_ok
    record_acceptance(10, "metric correctness", ok,
                      f"Hungarian = brute force: {hung_ok}, F1 = 4/7 example: {example_ok}, "
                      f"relabel invariance: {relabel_ok}")
    assert ok


def test_cli_determinism(tmp_path, record_acceptance):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps({"num_items": 8, "num_steps": 4, "min_intervals": 25, "max_intervals": 30}))

    def commands(corpus, out):
        return {
            "synth": ["synth", "--synth-config", cfg, "--seed", 7, "--out", out],
            "align": ["align", "--tokens", corpus / "tokens.json", "--K", 4, 6, "--gt-script",
                      corpus / "script.json", "--out", out],
            "localize": ["localize", "--features", corpus / "features", "--tokens", corpus / "tokens.json",
                         "--steps", tmp_path / "ref_align" / "steps_K4.json", "--annotations",
                         corpus / "annotations.json", "--out", out],
            "localize-video": ["localize", "--method", "video-only", "--K", 4, "--features", corpus / "features",
                               "--annotations", corpus / "annotations.json", "--out", out],
            "localize-uniform": ["localize", "--method", "uniform", "--K", 4, "--features", corpus / "features",
                                 "--annotations", corpus / "annotations.json", "--out", out],
            "supervised": ["supervised", "--features", corpus / "features", "--annotations",
                           corpus / "annotations.json", "--folds", 4, "--lambdas", 0.01, 0.1, "--out", out],
            "stats": ["stats", "--annotations", corpus / "annotations.json", "--out", out / "stats.json"],
            "oracle-check": ["oracle-check", "--trials-msa", 30, "--trials-localize", 30, "--out",
                             out / "oracle.json"],
        }

    corpus = tmp_path / "corpus"
    assert cli_main([str(a) for a in commands(corpus, corpus)["synth"]]) == 0
    assert cli_main([str(a) for a in commands(corpus, tmp_path / "ref_align")["align"]]) == 0
    identical = []
    for name in commands(corpus, tmp_path):
        snaps = []
        for run in ("a", "b"):
            out = tmp_path / name / run
            out.mkdir(parents=True)
            code = cli_main([str(a) for a in commands(corpus, out)[name]])
            snaps.append((code, {p.relative_to(out).as_posix(): p.read_bytes()
                                 for p in sorted(out.rglob("*")) if p.is_file()}))
        if snaps[0][0] == 0 and snaps[0][1] and snaps[0] == snaps[1]:
            identical.append(name)
    ok = len(identical) == len(commands(corpus, tmp_path))
    record_acceptance(11, "CLI determinism", ok,
                      f"{len(identical)}/{len(commands(corpus, tmp_path))} commands byte-identical on rerun")
    assert ok
