"""Synthetic narrated corpora with known scripts, plus exhaustive oracles for tiny instances."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import CapExceededError, ConsistencyError, InfeasibleError
from .evalkit import CorpusAnnotation, Event, ItemAnnotation
from .textalign import GlobalAlignment, Token, TokenCostMatrix, TokenSequence, sum_of_pairs_cost
from .vidcluster import FeatureStream, ResidualKernel, clustering_cost, intervals_to_z

MSA_CAPS = {"items": 3, "tokens": 4, "slots": 6}
LOCALIZE_CAPS = {"intervals": 8, "steps": 3, "joint": 200_000}


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the generator.

    The three noise rates are corpus-level targets for the order error,
    missing-step and repetition statistics; the generator allocates swaps,
    deletions and repeats so the measured statistics land on them up to
    rounding.
    """

    num_steps: int = 8
    num_items: int = 30
    min_intervals: int = 60
    max_intervals: int = 80
    interval_duration_s: float = 1.0
    dim: int = 20
    swap_rate: float = 0.06
    miss_rate: float = 0.27
    repeat_rate: float = 0.14
    distractor_rate: float = 0.5
    min_lag_s: float = 0.0
    max_lag_s: float = 10.0
    caption_duration_s: float = 2.0
    min_event_intervals: int = 2
    max_event_intervals: int = 4
    feature_noise: float = 0.3
    background_clusters: int = 3
    bias_feature: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("swap_rate", "miss_rate", "repeat_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConsistencyError(f"{name} must lie in [0, 1], got {v}")
        if self.repeat_rate >= 1.0:
            raise ConsistencyError("repeat_rate must be < 1")
        if self.distractor_rate < 0:
            raise ConsistencyError("distractor_rate must be >= 0")
        if self.num_steps < 1 or self.num_items < 1:
            raise ConsistencyError("need at least one step and one item")
        if self.min_intervals < self.num_steps or self.max_intervals < self.min_intervals:
            raise ConsistencyError("interval range must satisfy num_steps <= min <= max")
        if not 1 <= self.min_event_intervals <= self.max_event_intervals:
            raise ConsistencyError("event length range is invalid")
        if self.min_lag_s > self.max_lag_s:
            raise ConsistencyError("lag range is invalid")

    @classmethod
    def zero_noise(cls, **overrides) -> "SynthConfig":
        base = dict(swap_rate=0.0, miss_rate=0.0, repeat_rate=0.0, distractor_rate=0.0, feature_noise=0.05)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def default_noise(cls, **overrides) -> "SynthConfig":
        """Swap 6%, missing 27%, repeat 14%, lags of 0-10 s: the field defaults."""
        return cls(**overrides)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthCorpus:
    config: SynthConfig
    sequences: list[TokenSequence]
    streams: list[FeatureStream]
    annotation: CorpusAnnotation
    true_script: tuple[Token, ...]


def step_token(k: int) -> Token:
    return Token(f"do{k}", f"part{k}")


def distractor_token(j: int) -> Token:
    return Token(f"say{j}", f"thing{j}")


def _allocate_missing(rng, N, K, count):
    keep = [list(range(K)) for _ in range(N)]
    pairs = [(n, k) for n in range(N) for k in range(K)]
    order = rng.permutation(len(pairs))
    removed = 0
    for i in order:
        if removed >= count:
            break
        n, k = pairs[i]
        if len(keep[n]) > 1:
            keep[n].remove(k)
            removed += 1
    return keep


def _allocate_swaps(rng, steps, count):
    """Apply ``count`` disjoint adjacent transpositions across items."""
    slots = [(n, i) for n, seq in enumerate(steps) for i in range(0, len(seq) - 1)]
    used = [set() for _ in steps]
    done = 0
    for j in rng.permutation(len(slots)):
        if done >= count:
            break
        n, i = slots[j]
        if i in used[n] or i + 1 in used[n]:
            continue
        used[n].update((i, i + 1))
        steps[n][i], steps[n][i + 1] = steps[n][i + 1], steps[n][i]
        done += 1
    return steps


def _allocate_repeats(rng, steps, count):
    events = [list(seq) for seq in steps]
    for _ in range(count):
        n = int(rng.integers(len(events)))
        seq = events[n]
        src = int(rng.integers(len(seq)))
        pos = int(rng.integers(src + 1, len(seq) + 1))
        seq.insert(pos, seq[src])
    return events


def _random_composition(rng, total, parts):
    """Split ``total`` into ``parts`` non-negative integers uniformly at random."""
    cuts = np.sort(rng.integers(0, total + 1, size=parts - 1))
    edges = np.concatenate([[0], cuts, [total]])
    return np.diff(edges).astype(int)


def _unit_rows(rng, rows, dim):
    M = rng.standard_normal((rows, dim))
    return M / np.linalg.norm(M, axis=1, keepdims=True)


def generate(config: SynthConfig) -> SynthCorpus:
    """Draw a corpus: step sequences with controlled noise, timed narration, clustered features."""
    cfg = config
    K, N = cfg.num_steps, cfg.num_items
    root = np.random.default_rng(cfg.seed)
    step_centers = _unit_rows(root, K, cfg.dim)
    bg_centers = _unit_rows(root, max(cfg.background_clusters, 1), cfg.dim)

    keep = _allocate_missing(root, N, K, int(round(cfg.miss_rate * N * K)))
    unique_total = sum(len(k) for k in keep)
    keep = _allocate_swaps(root, keep, int(round(cfg.swap_rate * unique_total)))
    repeats = int(round(cfg.repeat_rate * unique_total / (1.0 - cfg.repeat_rate)))
    events_per_item = _allocate_repeats(root, keep, repeats)

    dur = cfg.interval_duration_s
    sequences, streams, items = [], [], []
    for n, steps in enumerate(events_per_item):
        rng = np.random.default_rng([cfg.seed, n + 1])
        item_id = f"item{n:03d}"
        T = int(rng.integers(cfg.min_intervals, cfg.max_intervals + 1))
        lengths = rng.integers(cfg.min_event_intervals, cfg.max_event_intervals + 1, size=len(steps))
        free = T - int(lengths.sum())
        if free < 0:
            raise InfeasibleError(f"item {item_id}: {T} intervals cannot hold {len(steps)} events")
        gaps = _random_composition(rng, free, len(steps) + 1)

        bg_choice = rng.integers(len(bg_centers), size=T)
        X = bg_centers[bg_choice] if cfg.background_clusters > 0 else np.zeros((T, cfg.dim))
        X = X + cfg.feature_noise * rng.standard_normal((T, cfg.dim))
        ann_events, narration = [], []
        t = 0
        last_cap = 0.0
        for k, length, gap in zip(steps, lengths, gaps[:-1]):
            t += int(gap)
            X[t:t + length] = step_centers[k] + cfg.feature_noise * rng.standard_normal((length, cfg.dim))
            start = t * dur
            ann_events.append(Event(int(k), start, (t + length) * dur))
            lag = rng.uniform(cfg.min_lag_s, cfg.max_lag_s)
            # narration follows the performed order even when lags overlap
            cap_start = max(last_cap, start - lag)
            last_cap = cap_start
            narration.append((cap_start, cap_start + cfg.caption_duration_s, step_token(int(k))))
            t += int(length)
        num_distractors = rng.poisson(cfg.distractor_rate * len(steps)) if cfg.distractor_rate > 0 else 0
        for _ in range(num_distractors):
            cap_start = rng.uniform(0.0, T * dur)
            narration.append((cap_start, cap_start + cfg.caption_duration_s, distractor_token(int(rng.integers(40)))))
        narration.sort(key=lambda x: x[0])  # stable: tied step captions keep their order
        if cfg.bias_feature:
            X = np.hstack([X, np.ones((T, 1))])
        sequences.append(
            TokenSequence(item_id, tuple(tok for _, _, tok in narration), tuple((a, b) for a, b, _ in narration))
        )
        streams.append(FeatureStream(item_id, X, dur))
        items.append(ItemAnnotation(item_id, tuple(ann_events)))
    annotation = CorpusAnnotation(K, tuple(items))
    return SynthCorpus(cfg, sequences, streams, annotation, tuple(step_token(k) for k in range(K)))


def with_seed(config: SynthConfig, seed: int) -> SynthConfig:
    return replace(config, seed=seed)


def brute_force_msa(sequences, cost: TokenCostMatrix, num_slots: int) -> tuple[GlobalAlignment, float]:
    """Exhaustive minimum of the sum-of-pairs cost over all joint monotone remappings."""
    lengths = [len(s) for s in sequences]
    if (
        len(sequences) > MSA_CAPS["items"]
        or max(lengths, default=0) > MSA_CAPS["tokens"]
        or num_slots > MSA_CAPS["slots"]
    ):
        raise CapExceededError(
            f"brute-force MSA is capped at {MSA_CAPS['items']} items, {MSA_CAPS['tokens']} tokens, "
            f"{MSA_CAPS['slots']} slots"
        )
    if max(lengths, default=0) > num_slots:
        raise InfeasibleError("a sequence is longer than the template")
    options = [list(itertools.combinations(range(num_slots), n)) for n in lengths]
    best, best_value = None, np.inf
    for combo in itertools.product(*options):
        alignment = GlobalAlignment(num_slots, tuple(np.array(c, dtype=int) for c in combo))
        value = sum_of_pairs_cost(alignment, sequences, cost)
        if value < best_value:
            best, best_value = alignment, value
    return best, best_value


def brute_force_localize(kernel: ResidualKernel, lengths, masks) -> tuple[list[np.ndarray], float]:
    """Exhaustive minimum of ``h`` over ordered assignments allowed by ``masks``.

    ``masks[n]`` is the ``T_n x K`` boolean array of allowed cells of item ``n``.
    """
    K = masks[0].shape[1]
    if max(lengths) > LOCALIZE_CAPS["intervals"] or K > LOCALIZE_CAPS["steps"]:
        raise CapExceededError(
            f"brute-force localization is capped at T_n <= {LOCALIZE_CAPS['intervals']}, "
            f"K <= {LOCALIZE_CAPS['steps']}"
        )
    per_item = []
    for T, allowed in zip(lengths, masks):
        opts = [
            np.array(c, dtype=int)
            for c in itertools.combinations(range(T), K)
            if all(allowed[t, k] for k, t in enumerate(c))
        ]
        if not opts:
            raise InfeasibleError("an item has no feasible ordered placement")
        per_item.append(opts)
    if np.prod([len(o) for o in per_item], dtype=float) > LOCALIZE_CAPS["joint"]:
        raise CapExceededError("too many joint assignments for exhaustive search")
    best, best_value = None, np.inf
    for combo in itertools.product(*per_item):
        Z = np.vstack([intervals_to_z(iv, T) for iv, T in zip(combo, lengths)])
        value = clustering_cost(Z, kernel)
        if value < best_value:
            best, best_value = list(combo), value
    return best, best_value
