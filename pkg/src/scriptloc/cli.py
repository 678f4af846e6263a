"""Command line front end: ``scriptloc {synth,align,localize,supervised,stats,oracle-check}``.

Every option can also be given in a JSON config file passed with
``--config``; keys are the option names with dashes replaced by
underscores, and explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import formats
from .errors import ConsistencyError, SchemaError, ScriptlocError
from .evalkit import corpus_stats, localization_f1, script_precision_recall
from .pipeline import (
    align_corpus,
    error_bar,
    localize_full,
    localize_text_only,
    localize_uniform,
    localize_video_only,
    supervised_cv,
)
from .synthgen import SynthConfig, generate
from .textalign import Token, extract_main_steps

logger = logging.getLogger("scriptloc")

RESULT_FIELDS = ["task", "method", "K", "seed", "precision", "recall", "f1", "f1_min", "f1_max"]

DEFAULTS = {
    "K": [10],
    "seed": 0,
    "max_iters": 300,
    "restarts": 4,
    "solver": "fw",
    "method": "full",
    "delta_before": 0.0,
    "delta_after": 10.0,
    "interval_duration": 1.0,
    "folds": 5,
    "task": "task",
    "feature_format": "saln",
    "trials_msa": 100,
    "trials_localize": 200,
}


def _merge_config(args):
    config = {}
    if getattr(args, "config", None):
        config = formats.load_json(args.config)
        if not isinstance(config, dict):
            raise SchemaError(f"{args.config}: config must be a JSON object")
    for key, value in vars(args).items():
        if value is None:
            if key in config:
                setattr(args, key, config[key])
            elif key in DEFAULTS:
                setattr(args, key, DEFAULTS[key])
    return args


def _require_path(value, what):
    if value is None:
        raise SchemaError(f"missing required input: {what}")
    path = Path(value)
    if not path.exists():
        raise SchemaError(f"{what} not found: {path}")
    return path


def _out_dir(args) -> Path:
    if not args.out:
        raise SchemaError("missing --out directory")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def _write_results(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _read_script(path) -> list[Token]:
    data = formats.load_json(path)
    steps = data["steps"] if isinstance(data, dict) else data
    try:
        return [Token(s["verb"], s["object"]) for s in steps]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: malformed script ({exc})") from None


def _read_mapping(path) -> dict:
    """``{"pairs": [{"recovered": "verb|object", "gt": "verb|object"}]}``; a null gt maps to nothing."""
    data = formats.load_json(path)
    out = {}
    try:
        for pair in data["pairs"]:
            rec = formats._parse_label(pair["recovered"], str(path))
            out[rec] = None if pair["gt"] is None else formats._parse_label(pair["gt"], str(path))
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: malformed mapping ({exc})") from None
    return out


def cmd_synth(args):
    cfg_fields = formats.load_json(args.synth_config) if args.synth_config else {}
    if not isinstance(cfg_fields, dict):
        raise SchemaError("synth config must be a JSON object")
    if args.seed is not None:
        cfg_fields["seed"] = args.seed
    try:
        cfg = SynthConfig(**cfg_fields)
    except TypeError as exc:
        raise SchemaError(f"bad synth config: {exc}") from None
    corpus = generate(cfg)
    out = _out_dir(args)
    formats.write_tokens(corpus.sequences, out / "tokens.json")
    formats.write_feature_dir(corpus.streams, out / "features", args.feature_format)
    formats.dump_json(formats.annotation_to_json(corpus.annotation), out / "annotations.json")
    formats.dump_json(
        {"steps": [{"verb": t.verb, "object": t.object} for t in corpus.true_script]}, out / "script.json"
    )
    formats.dump_json(cfg.as_dict(), out / "synth_config.json")
    return 0


def cmd_align(args):
    sequences = formats.read_tokens(_require_path(args.tokens, "token file"))
    cost = formats.read_cost_csv(_require_path(args.cost, "cost CSV")) if args.cost else None
    out = _out_dir(args)
    Ks = [int(k) for k in _as_list(args.K)]
    if any(k < 1 for k in Ks):
        raise SchemaError("K values must be >= 1")
    gt = _read_script(_require_path(args.gt_script, "ground-truth script")) if args.gt_script else None
    mapping = _read_mapping(_require_path(args.mapping, "label mapping")) if args.mapping else None
    first = None
    for K in Ks:
        if first is None:
            result = align_corpus(
                sequences, K, cost, max_iters=args.max_iters, seed=args.seed, solver=args.solver,
                restarts=args.restarts,
            )
            first = result
            formats.dump_json(
                dict(formats.alignment_to_json(result.alignment), objective=result.objective),
                out / "alignment.json",
            )
        steps = extract_main_steps(first.alignment, K, sequences)
        if steps.status != "ok":
            logger.warning("K=%d: tie rule left no steps", K)
        formats.dump_json(formats.steps_to_json(steps), out / f"steps_K{K}.json")
        if gt is not None:
            p, r = script_precision_recall(list(steps.labels), gt, mapping)
            formats.dump_json({"K": K, "num_steps": steps.num_steps, "precision": p, "recall": r},
                              out / f"script_score_K{K}.json")
    return 0


def cmd_localize(args):
    streams = formats.read_feature_dir(_require_path(args.features, "feature directory"), args.interval_duration)
    out = _out_dir(args)
    method = args.method
    history = None
    if method in ("full", "text-only"):
        sequences = formats.read_tokens(_require_path(args.tokens, "token file"))
        steps = formats.steps_from_json(formats.load_json(_require_path(args.steps, "step file")))
        if steps.num_steps < 1:
            raise ConsistencyError("step file has no steps to localize")
        if method == "full":
            loc, history = localize_full(
                sequences, streams, steps, args.delta_before, args.delta_after, args.lam, args.max_iters, args.seed
            )
        else:
            loc = localize_text_only(sequences, streams, steps, args.delta_before, args.delta_after)
        K = steps.num_steps
    else:
        if args.steps:
            K = formats.steps_from_json(formats.load_json(_require_path(args.steps, "step file"))).num_steps
        else:
            K = int(_as_list(args.K)[0])
        if method == "video-only":
            loc, history = localize_video_only(streams, K, args.lam, args.max_iters, args.seed)
        elif method == "uniform":
            loc = localize_uniform(streams, K)
        else:
            raise SchemaError(f"unknown method {method!r}")
    formats.dump_json(formats.localization_to_json(loc), out / "localization.json")
    if args.annotations:
        annotation = formats.read_annotation(_require_path(args.annotations, "annotation file"))
        report = localization_f1(loc, annotation)
        lo = hi = report.f1
        if history is not None:
            lo, hi = error_bar(history, loc, annotation)
        payload = report.as_dict()
        payload.update(f1_min=lo, f1_max=hi, method=method, K=K)
        if history is not None:
            payload["dropped_constraints"] = [[i, int(k)] for i, k in history.dropped]
        formats.dump_json(payload, out / "score.json")
        _write_results(
            out / "results.csv",
            [dict(task=args.task, method=method, K=K, seed=args.seed, precision=report.precision,
                  recall=report.recall, f1=report.f1, f1_min=lo, f1_max=hi)],
        )
    return 0


def cmd_supervised(args):
    streams = formats.read_feature_dir(_require_path(args.features, "feature directory"), args.interval_duration)
    annotation = formats.read_annotation(_require_path(args.annotations, "annotation file"))
    out = _out_dir(args)
    lambdas = None if args.lambdas is None else [float(x) for x in _as_list(args.lambdas)]
    results = supervised_cv(streams, annotation, lambdas, int(args.folds), args.seed, args.max_iters)
    f1s = [r["report"].f1 for r in results]
    payload = {
        "folds": [
            {"fold": r["fold"], "lambda": r["lambda"], "items": r["items"], "report": r["report"].as_dict()}
            for r in results
        ],
        "mean_f1": float(np.mean(f1s)),
        "min_f1": float(np.min(f1s)),
        "max_f1": float(np.max(f1s)),
    }
    formats.dump_json(payload, out / "cv.json")
    _write_results(
        out / "results.csv",
        [dict(task=args.task, method="supervised", K=annotation.num_gt_steps, seed=args.seed,
              precision=float(np.mean([r["report"].precision for r in results])),
              recall=float(np.mean([r["report"].recall for r in results])),
              f1=payload["mean_f1"], f1_min=payload["min_f1"], f1_max=payload["max_f1"])],
    )
    return 0


def cmd_stats(args):
    annotation = formats.read_annotation(_require_path(args.annotations, "annotation file"))
    stats = corpus_stats(annotation).as_dict()
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        formats.dump_json(stats, out)
    else:
        print(json.dumps(stats, sort_keys=True, indent=1))
    return 0


def run_oracle_checks(trials_msa: int, trials_localize: int, seed: int) -> dict:
    """Compare both dynamic-programming oracles with exhaustive enumeration."""
    from .textalign import msa_linear_oracle
    from .vidcluster import ordered_oracle

    rng = np.random.default_rng(seed)
    msa_bad = 0
    for _ in range(trials_msa):
        S = int(rng.integers(1, 5))
        L = int(rng.integers(S, 7))
        G = rng.standard_normal((S, L))
        got = msa_linear_oracle(G)
        mine = float(G[np.arange(S), got].sum())
        best = min(float(G[np.arange(S), list(c)].sum()) for c in itertools.combinations(range(L), S))
        msa_bad += not (mine == best and np.all(np.diff(got) > 0))
    loc_bad = 0
    for i in range(trials_localize):
        T = int(rng.integers(1, 9))
        K = int(rng.integers(1, min(T, 3) + 1))
        C = rng.standard_normal((T, K))
        allowed = rng.random((T, K)) < 0.6 if i % 2 else np.ones((T, K), dtype=bool)
        feasible = [
            c for c in itertools.combinations(range(T), K) if all(allowed[t, k] for k, t in enumerate(c))
        ]
        if not feasible:
            allowed[:] = True
            feasible = list(itertools.combinations(range(T), K))
        best = min(float(C[list(c), np.arange(K)].sum()) for c in feasible)
        got = ordered_oracle(C, allowed=allowed)
        mine = float(C[got, np.arange(K)].sum())
        loc_bad += not (mine == best and all(allowed[t, k] for k, t in enumerate(got)))
    return {"msa_trials": trials_msa, "msa_mismatches": msa_bad,
            "localize_trials": trials_localize, "localize_mismatches": loc_bad}


def cmd_oracle_check(args):
    summary = run_oracle_checks(int(args.trials_msa), int(args.trials_localize), args.seed)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        formats.dump_json(summary, out)
    print(f"msa oracle: {summary['msa_mismatches']} mismatches in {summary['msa_trials']} trials")
    print(f"localization oracle: {summary['localize_mismatches']} mismatches in {summary['localize_trials']} trials")
    return 0 if summary["msa_mismatches"] == 0 and summary["localize_mismatches"] == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scriptloc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic corpus"))
    p.add_argument("--synth-config", help="JSON object of generator settings")
    p.add_argument("--feature-format", choices=["saln", "csv"])
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("align", help="align narrations and extract main steps"))
    p.add_argument("--tokens")
    p.add_argument("--cost", help="optional token cost CSV")
    p.add_argument("--K", type=int, nargs="+")
    p.add_argument("--solver", choices=["fw", "progressive"])
    p.add_argument("--max-iters", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--gt-script")
    p.add_argument("--mapping")
    p.set_defaults(func=cmd_align)

    p = common(sub.add_parser("localize", help="localize steps in feature streams"))
    p.add_argument("--features")
    p.add_argument("--interval-duration", type=float)
    p.add_argument("--method", choices=["full", "text-only", "video-only", "uniform"])
    p.add_argument("--tokens")
    p.add_argument("--steps")
    p.add_argument("--K", type=int, nargs="+")
    p.add_argument("--delta-before", type=float)
    p.add_argument("--delta-after", type=float)
    p.add_argument("--lambda", dest="lam", type=float, help="default 1/(N K)")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--annotations")
    p.add_argument("--task")
    p.set_defaults(func=cmd_localize)

    p = common(sub.add_parser("supervised", help="cross-validated supervised baseline"))
    p.add_argument("--features")
    p.add_argument("--interval-duration", type=float)
    p.add_argument("--annotations")
    p.add_argument("--folds", type=int)
    p.add_argument("--lambdas", type=float, nargs="+")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--task")
    p.set_defaults(func=cmd_supervised)

    p = common(sub.add_parser("stats", help="order/missing/repetition statistics"))
    p.add_argument("--annotations")
    p.set_defaults(func=cmd_stats)

    p = common(sub.add_parser("oracle-check", help="check DP oracles against enumeration"))
    p.add_argument("--trials-msa", type=int)
    p.add_argument("--trials-localize", type=int)
    p.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args = _merge_config(args)
        started = time.perf_counter()
        code = args.func(args)
        logger.info("%s finished in %.2f s", args.command, time.perf_counter() - started)
        return code
    except ScriptlocError as exc:
        print(f"scriptloc {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"scriptloc {args.command}: invalid input: {exc}", file=sys.stderr)
        return SchemaError.exit_code


if __name__ == "__main__":
    sys.exit(main())
