"""Readers and writers for every on-disk format.

Formats
-------
tokens JSON
    ``[{"item_id": str, "tokens": [{"verb", "object", "start_s", "end_s"}]}]``
cost CSV
    header ``token,<verb|object>,...`` then one row per token: label, costs.
alignment JSON
    ``{"num_slots": L, "items": [{"item_id", "slots": [...]}]}``
steps JSON
    ``{"num_steps", "slots", "support", "labels", "status", "assignments"}``
    with each assignment matrix in sparse triplet form ``[[row, col, 1], ...]``.
features
    CSV (one row per interval, no header) or binary: ``b"SALN"``, ``u32``
    version, ``u64`` T, ``u64`` d, then T*d little-endian float64 row-major.
localization JSON
    ``{"num_steps", "items": [{"item_id", "steps": [{"step", "interval", "start_s", "end_s"}]}]}``
annotation JSON
    ``{"num_gt_steps", "items": [{"item_id", "events": [{"step", "start_s", "end_s"}]}]}``
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import SchemaError
from .evalkit import CorpusAnnotation, Event, ItemAnnotation
from .textalign import GlobalAlignment, StepAssignment, Token, TokenCostMatrix, TokenSequence
from .vidcluster import FeatureStream, StepLocalization

SALN_MAGIC = b"SALN"
SALN_VERSION = 1
_SALN_HEADER = struct.Struct("<4sIQQ")


def dump_json(obj, path) -> None:
    """Write JSON deterministically (sorted keys, fixed separators, trailing newline)."""
    text = json.dumps(obj, sort_keys=True, indent=1, separators=(",", ": "))
    Path(path).write_text(text + "\n")


def load_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    except OSError as exc:
        raise SchemaError(f"{path}: cannot read ({exc.strerror})") from None


def _require(record, key, where):
    if not isinstance(record, dict) or key not in record:
        raise SchemaError(f"{where}: missing field {key!r}")
    return record[key]


# tokens


def tokens_to_json(sequences) -> list:
    return [
        {
            "item_id": seq.item_id,
            "tokens": [
                {"verb": tok.verb, "object": tok.object, "start_s": a, "end_s": b}
                for tok, (a, b) in zip(seq.tokens, seq.spans)
            ],
        }
        for seq in sequences
    ]


def tokens_from_json(data, source="tokens") -> list[TokenSequence]:
    if not isinstance(data, list) or not data:
        raise SchemaError(f"{source}: expected a non-empty list of items")
    out = []
    for i, item in enumerate(data):
        where = f"{source}: item {i}"
        item_id = str(_require(item, "item_id", where))
        raw = _require(item, "tokens", where)
        if not isinstance(raw, list):
            raise SchemaError(f"{where}: 'tokens' must be a list")
        tokens, spans = [], []
        for j, tok in enumerate(raw):
            w = f"{where} token {j}"
            try:
                tokens.append(Token(str(_require(tok, "verb", w)), str(_require(tok, "object", w))))
                spans.append((float(_require(tok, "start_s", w)), float(_require(tok, "end_s", w))))
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{w}: {exc}") from None
        try:
            out.append(TokenSequence(item_id, tuple(tokens), tuple(spans)))
        except ValueError as exc:
            raise SchemaError(f"{where}: {exc}") from None
    if not any(len(s) for s in out):
        raise SchemaError(f"{source}: corpus contains no tokens")
    return out


def read_tokens(path) -> list[TokenSequence]:
    return tokens_from_json(load_json(path), str(path))


def write_tokens(sequences, path) -> None:
    dump_json(tokens_to_json(sequences), path)


# cost matrix


def _token_label(tok: Token) -> str:
    return f"{tok.verb}|{tok.object}"


def _parse_label(label: str, where: str) -> Token:
    verb, sep, obj = label.partition("|")
    if not sep:
        raise SchemaError(f"{where}: token label {label!r} is not 'verb|object'")
    return Token(verb, obj)


def write_cost_csv(cost: TokenCostMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["token"] + [_token_label(t) for t in cost.vocabulary])
        for tok, row in zip(cost.vocabulary, cost.cost):
            w.writerow([_token_label(tok)] + [repr(float(v)) for v in row])


def read_cost_csv(path) -> TokenCostMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise SchemaError(f"{path}: cost CSV needs a header and at least one row")
    vocab = [_parse_label(x, f"{path}:1") for x in rows[0][1:]]
    matrix = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(vocab) + 1:
            raise SchemaError(f"{path}:{i}: expected {len(vocab) + 1} cells, got {len(row)}")
        if _parse_label(row[0], f"{path}:{i}") != vocab[i - 2]:
            raise SchemaError(f"{path}:{i}: row label does not match header order")
        try:
            matrix.append([float(v) for v in row[1:]])
        except ValueError:
            raise SchemaError(f"{path}:{i}: non-numeric cost") from None
    if len(matrix) != len(vocab):
        raise SchemaError(f"{path}: {len(matrix)} rows for {len(vocab)} tokens")
    return TokenCostMatrix(tuple(vocab), np.array(matrix))


# alignment and steps


def _sparse(M):
    rows, cols = np.nonzero(M)
    return [[int(r), int(c), int(M[r, c])] for r, c in zip(rows, cols)]


def alignment_to_json(alignment: GlobalAlignment) -> dict:
    return {
        "num_slots": int(alignment.num_slots),
        "items": [
            {"item_id": item_id, "slots": [int(x) for x in s]}
            for item_id, s in zip(alignment.item_ids, alignment.slots)
        ],
    }


def alignment_from_json(data, source="alignment") -> GlobalAlignment:
    L = int(_require(data, "num_slots", source))
    items = _require(data, "items", source)
    return GlobalAlignment(
        L,
        tuple(np.array(_require(it, "slots", source), dtype=int) for it in items),
        tuple(str(_require(it, "item_id", source)) for it in items),
    )


def steps_to_json(steps: StepAssignment) -> dict:
    return {
        "num_steps": steps.num_steps,
        "slots": list(steps.slots),
        "support": list(steps.support),
        "labels": [{"verb": t.verb, "object": t.object} for t in steps.labels],
        "status": steps.status,
        "assignments": [
            {"item_id": item_id, "shape": [int(R.shape[0]), int(R.shape[1])], "entries": _sparse(R)}
            for item_id, R in zip(steps.item_ids, steps.assignments)
        ],
    }


def steps_from_json(data, source="steps") -> StepAssignment:
    try:
        assignments, ids = [], []
        for rec in data["assignments"]:
            R = np.zeros(tuple(rec["shape"]), dtype=int)
            for r, c, v in rec["entries"]:
                R[r, c] = v
            assignments.append(R)
            ids.append(str(rec["item_id"]))
        return StepAssignment(
            num_steps=int(data["num_steps"]),
            slots=tuple(int(x) for x in data["slots"]),
            labels=tuple(Token(l["verb"], l["object"]) for l in data["labels"]),
            support=tuple(int(x) for x in data["support"]),
            assignments=tuple(assignments),
            item_ids=tuple(ids),
            status=str(data.get("status", "ok")),
        )
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise SchemaError(f"{source}: malformed step file ({exc})") from None


# features


def write_features_binary(X: np.ndarray, path) -> None:
    X = np.ascontiguousarray(X, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_SALN_HEADER.pack(SALN_MAGIC, SALN_VERSION, X.shape[0], X.shape[1]))
        fh.write(X.tobytes(order="C"))


def read_features_binary(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _SALN_HEADER.size:
        raise SchemaError(f"{path}: truncated header")
    magic, version, T, d = _SALN_HEADER.unpack_from(data)
    if magic != SALN_MAGIC:
        raise SchemaError(f"{path}: bad magic {magic!r}")
    if version != SALN_VERSION:
        raise SchemaError(f"{path}: unsupported version {version}")
    body = data[_SALN_HEADER.size:]
    if len(body) != 8 * T * d:
        raise SchemaError(f"{path}: expected {8 * T * d} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f8").reshape(T, d).astype(float)


def write_features_csv(X: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in X:
            w.writerow([repr(float(v)) for v in row])


def read_features_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        X = np.array([[float(v) for v in r] for r in rows])
    except ValueError:
        raise SchemaError(f"{path}: non-numeric feature value") from None
    if X.ndim != 2 or X.size == 0:
        raise SchemaError(f"{path}: features must be a non-empty rectangular table")
    return X


def read_feature_dir(directory, interval_duration_s: float = 1.0) -> list[FeatureStream]:
    """Load ``<item_id>.saln`` / ``<item_id>.csv`` files, sorted by item id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise SchemaError(f"{directory}: feature directory not found")
    streams = {}
    for path in sorted(directory.iterdir()):
        if path.suffix == ".saln":
            X = read_features_binary(path)
        elif path.suffix == ".csv":
            X = read_features_csv(path)
        else:
            continue
        if path.stem in streams:
            raise SchemaError(f"{directory}: two feature files for item {path.stem}")
        streams[path.stem] = FeatureStream(path.stem, X, interval_duration_s)
    if not streams:
        raise SchemaError(f"{directory}: no .saln or .csv feature files")
    return [streams[k] for k in sorted(streams)]


def write_feature_dir(streams, directory, fmt: str = "saln") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in streams:
        if fmt == "saln":
            write_features_binary(s.X, directory / f"{s.item_id}.saln")
        elif fmt == "csv":
            write_features_csv(s.X, directory / f"{s.item_id}.csv")
        else:
            raise ValueError(f"unknown feature format {fmt!r}")


# localization


def localization_to_json(loc: StepLocalization) -> dict:
    items = []
    for n, item_id in enumerate(loc.item_ids):
        dur = loc.interval_durations[n] if loc.interval_durations else 1.0
        items.append(
            {
                "item_id": item_id,
                "steps": [
                    {"step": k, "interval": int(t), "start_s": float(t * dur), "end_s": float((t + 1) * dur)}
                    for k, t in enumerate(loc.intervals[n])
                ],
            }
        )
    return {"num_steps": loc.num_steps, "items": items}


def localization_from_json(data, source="localization") -> StepLocalization:
    try:
        ids, intervals, durs = [], [], []
        for item in data["items"]:
            steps = sorted(item["steps"], key=lambda s: s["step"])
            ids.append(str(item["item_id"]))
            intervals.append(np.array([s["interval"] for s in steps], dtype=int))
            durs.append(float(steps[0]["end_s"] - steps[0]["start_s"]) if steps else 1.0)
        return StepLocalization(tuple(ids), intervals, None, float("nan"), tuple(durs))
    except (KeyError, TypeError, IndexError) as exc:
        raise SchemaError(f"{source}: malformed localization file ({exc})") from None


# annotations


def annotation_to_json(annotation: CorpusAnnotation) -> dict:
    return {
        "num_gt_steps": annotation.num_gt_steps,
        "items": [
            {
                "item_id": item.item_id,
                "events": [{"step": e.step, "start_s": e.start_s, "end_s": e.end_s} for e in item.events],
            }
            for item in annotation.items
        ],
    }


def annotation_from_json(data, source="annotations") -> CorpusAnnotation:
    try:
        items = tuple(
            ItemAnnotation(
                str(item["item_id"]),
                tuple(Event(int(e["step"]), float(e["start_s"]), float(e["end_s"])) for e in item["events"]),
            )
            for item in data["items"]
        )
        return CorpusAnnotation(int(data["num_gt_steps"]), items)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SchemaError):
            raise SchemaError(f"{source}: {exc}") from None
        raise SchemaError(f"{source}: malformed annotation file ({exc})") from None


def read_annotation(path) -> CorpusAnnotation:
    return annotation_from_json(load_json(path), str(path))
