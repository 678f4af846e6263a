"""Text clustering: multiple sequence alignment of direct-object token sequences.

Each narration is a sequence of (verb, object) tokens. Sequences are mapped
monotonically into a shared template of ``L`` slots so that the sum-of-pairs
cost is minimal; the best-supported slots become the steps of the script.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConsistencyError, EmptyInputError, InfeasibleError

logger = logging.getLogger(__name__)

DEFAULT_MATCH_REWARD = -1.0
DEFAULT_MISMATCH_PENALTY = 100.0


@dataclass(frozen=True, order=True)
class Token:
    """A lemmatized direct object relation, e.g. ``Token("loosen", "nut")``."""

    verb: str
    object: str

    def __post_init__(self):
        if not self.verb or not self.object:
            raise ValueError(f"token fields must be non-empty, got {self!r}")

    def __str__(self):
        return f"{self.verb} {self.object}"


@dataclass(frozen=True)
class TokenSequence:
    item_id: str
    tokens: tuple[Token, ...]
    spans: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        spans = tuple((float(a), float(b)) for a, b in self.spans)
        if not spans:
            spans = tuple((0.0, 0.0) for _ in self.tokens)
        if len(spans) != len(self.tokens):
            raise ConsistencyError(
                f"item {self.item_id}: {len(spans)} spans for {len(self.tokens)} tokens"
            )
        for a, b in spans:
            if a > b:
                raise ConsistencyError(f"item {self.item_id}: span start {a} > end {b}")
        object.__setattr__(self, "spans", spans)

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class TokenCostMatrix:
    """Pairwise cost of aligning two vocabulary tokens in the same slot.

    Aligning a token with a gap costs 0 and is not stored.
    """

    vocabulary: tuple[Token, ...]
    cost: np.ndarray
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        cost = np.asarray(self.cost, dtype=float)
        D = len(self.vocabulary)
        if cost.shape != (D, D):
            raise ConsistencyError(f"cost matrix shape {cost.shape} != ({D}, {D})")
        if not np.allclose(cost, cost.T):
            raise ConsistencyError("token cost matrix must be symmetric")
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "index", {tok: i for i, tok in enumerate(self.vocabulary)})
        if len(self.index) != D:
            raise ConsistencyError("vocabulary contains duplicate tokens")

    def indices(self, seq: TokenSequence) -> np.ndarray:
        try:
            return np.array([self.index[tok] for tok in seq.tokens], dtype=int)
        except KeyError as exc:
            raise ConsistencyError(
                f"item {seq.item_id}: token {exc.args[0]} missing from vocabulary"
            ) from None


@dataclass(frozen=True)
class GlobalAlignment:
    """Monotone remapping of every sequence into ``num_slots`` template slots.

    ``slots[n][s]`` is the template slot that receives token ``s`` of item
    ``n``; the remapping matrix ``U_n`` is materialized on demand.
    """

    num_slots: int
    slots: tuple[np.ndarray, ...]
    item_ids: tuple[str, ...] = ()

    def __post_init__(self):
        slots = tuple(np.asarray(s, dtype=int).reshape(-1) for s in self.slots)
        for n, s in enumerate(slots):
            if s.size and (s.min() < 0 or s.max() >= self.num_slots):
                raise ConsistencyError(f"sequence {n}: slot index outside [0, {self.num_slots})")
            if np.any(np.diff(s) <= 0):
                raise ConsistencyError(f"sequence {n}: remapping is not strictly increasing")
        object.__setattr__(self, "slots", slots)
        if not self.item_ids:
            object.__setattr__(self, "item_ids", tuple(str(n) for n in range(len(slots))))

    def remapping(self, n: int) -> np.ndarray:
        s = self.slots[n]
        U = np.zeros((s.size, self.num_slots))
        U[np.arange(s.size), s] = 1.0
        return U

    def stacked(self) -> np.ndarray:
        if not self.slots:
            return np.zeros((0, self.num_slots))
        return np.vstack([self.remapping(n) for n in range(len(self.slots))])

    def support(self) -> np.ndarray:
        """Number of tokens mapped to each slot."""
        counts = np.zeros(self.num_slots, dtype=int)
        for s in self.slots:
            np.add.at(counts, s, 1)
        return counts


@dataclass(frozen=True)
class StepAssignment:
    """Main steps extracted from an alignment, with per-item token assignments."""

    num_steps: int
    slots: tuple[int, ...]
    labels: tuple[Token, ...]
    support: tuple[int, ...]
    assignments: tuple[np.ndarray, ...]
    item_ids: tuple[str, ...]
    status: str = "ok"

    def step_support(self) -> np.ndarray:
        return np.asarray(self.support, dtype=int)


def build_token_cost(
    sequences: Sequence[TokenSequence],
    match_reward: float = DEFAULT_MATCH_REWARD,
    mismatch_penalty: float = DEFAULT_MISMATCH_PENALTY,
) -> TokenCostMatrix:
    """Exact-match cost: ``match_reward`` for identical tokens, else ``mismatch_penalty``."""
    vocab = sorted({tok for seq in sequences for tok in seq.tokens})
    if not vocab:
        raise EmptyInputError("no tokens in corpus")
    D = len(vocab)
    cost = np.full((D, D), float(mismatch_penalty))
    np.fill_diagonal(cost, float(match_reward))
    return TokenCostMatrix(tuple(vocab), cost)


def _offsets(lengths):
    return np.concatenate([[0], np.cumsum(lengths)]).astype(int)


def token_pair_cost_matrix(sequences: Sequence[TokenSequence], cost: TokenCostMatrix) -> np.ndarray:
    """Token-level cost ``Y C Y^T`` for the stacked corpus (S x S)."""
    idx = np.concatenate([cost.indices(seq) for seq in sequences]) if sequences else np.zeros(0, int)
    return cost.cost[np.ix_(idx, idx)]


def pairwise_block_cost(sequences: Sequence[TokenSequence], cost: TokenCostMatrix) -> np.ndarray:
    """Token pair cost with the within-sequence diagonal blocks zeroed."""
    B = token_pair_cost_matrix(sequences, cost).copy()
    off = _offsets([len(s) for s in sequences])
    for a, b in zip(off[:-1], off[1:]):
        B[a:b, a:b] = 0.0
    return B


def _check_alignment(alignment: GlobalAlignment, sequences):
    if len(alignment.slots) != len(sequences):
        raise ConsistencyError(
            f"alignment has {len(alignment.slots)} items, corpus has {len(sequences)}"
        )
    for n, (s, seq) in enumerate(zip(alignment.slots, sequences)):
        if s.size != len(seq):
            raise ConsistencyError(f"sequence {n}: {s.size} slots for {len(seq)} tokens")


def sum_of_pairs_cost(
    alignment: GlobalAlignment, sequences: Sequence[TokenSequence], cost: TokenCostMatrix
) -> float:
    """Sum over unordered item pairs of the cost of tokens sharing a slot."""
    _check_alignment(alignment, sequences)
    L = alignment.num_slots
    # slot -> vocabulary index, -1 for a gap
    rows = []
    for s, seq in zip(alignment.slots, sequences):
        row = np.full(L, -1, dtype=int)
        row[s] = cost.indices(seq)
        rows.append(row)
    total = 0.0
    for n in range(len(rows)):
        for m in range(n + 1, len(rows)):
            both = (rows[n] >= 0) & (rows[m] >= 0)
            total += float(cost.cost[rows[n][both], rows[m][both]].sum())
    return total


def relaxed_objective(U: np.ndarray, pair_cost: np.ndarray) -> float:
    """``0.5 * Tr(U^T B U)`` with ``B`` the block-zeroed pair cost; equals sum-of-pairs on corners."""
    return 0.5 * float(np.sum(U * (pair_cost @ U)))


def msa_linear_oracle(gradient: np.ndarray) -> np.ndarray:
    """Minimize ``<gradient, U>`` over strictly increasing token-to-slot maps.

    Returns the slot index of every token. Ties go to the smallest slot index.
    """
    G = np.asarray(gradient, dtype=float)
    S, L = G.shape
    if L < S:
        raise InfeasibleError(f"{S} tokens cannot be placed in {L} slots")
    if S == 0:
        return np.zeros(0, dtype=int)
    # value[l]: best cost of tokens 0..s with token s in slot l
    back = np.zeros((S, L), dtype=int)
    value = G[0]
    positions = np.arange(L)
    for s in range(1, S):
        # running minimum of value[:l], tracking its first (smallest) index
        running = np.minimum.accumulate(value)
        fresh = np.empty(L, dtype=bool)
        fresh[0] = True
        np.less(value[1:], running[:-1], out=fresh[1:])
        arg = np.maximum.accumulate(np.where(fresh, positions, 0))
        prev = np.empty(L)
        prev[0] = np.inf
        prev[1:] = running[:-1]
        back[s, 1:] = arg[:-1]
        value = G[s] + prev
    out = np.empty(S, dtype=int)
    out[-1] = int(np.argmin(value))
    for s in range(S - 1, 0, -1):
        out[s - 1] = back[s, out[s]]
    return out


def _pairwise_align(template_cost: np.ndarray):
    """Global alignment of template columns (rows) against tokens (cols), gaps free.

    Returns ``(column or None, token or None)`` pairs in template order. On
    ties a gap is preferred over a match.
    """
    P, Q = template_cost.shape
    score = np.zeros((P + 1, Q + 1))
    move = np.zeros((P + 1, Q + 1), dtype=np.int8)  # 0 diag, 1 column only, 2 token only
    move[1:, 0] = 1
    move[0, 1:] = 2
    for i in range(1, P + 1):
        for j in range(1, Q + 1):
            diag = score[i - 1, j - 1] + template_cost[i - 1, j - 1]
            up, left = score[i - 1, j], score[i, j - 1]
            if diag < min(up, left):
                score[i, j], move[i, j] = diag, 0
            elif up <= left:
                score[i, j], move[i, j] = up, 1
            else:
                score[i, j], move[i, j] = left, 2
    path = []
    i, j = P, Q
    while i > 0 or j > 0:
        m = move[i, j]
        if m == 0:
            path.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif m == 1:
            path.append((i - 1, None))
            i -= 1
        else:
            path.append((None, j - 1))
            j -= 1
    path.reverse()
    return path


def progressive_align(
    sequences: Sequence[TokenSequence], cost: TokenCostMatrix, num_slots: int | None = None
) -> GlobalAlignment:
    """Fold sequences one at a time into a growing linear template.

    Each new sequence is aligned to the current template by dynamic
    programming, scoring a token against a column by the summed cost with the
    tokens already in that column; unmatched tokens open new columns.
    """
    idx = [cost.indices(seq) for seq in sequences]
    # each column: list of (item, position)
    columns: list[list[tuple[int, int]]] = []
    for n, tokens in enumerate(idx):
        if not columns:
            columns = [[(n, s)] for s in range(len(tokens))]
            continue
        col_cost = np.zeros((len(columns), len(tokens)))
        for c, members in enumerate(columns):
            member_tokens = np.array([idx[m][s] for m, s in members], dtype=int)
            col_cost[c] = cost.cost[np.ix_(member_tokens, tokens)].sum(axis=0)
        merged = []
        for c, s in _pairwise_align(col_cost):
            if c is None:
                merged.append([(n, s)])
            else:
                column = list(columns[c])
                if s is not None:
                    column.append((n, s))
                merged.append(column)
        columns = merged
    L = len(columns)
    slots = [np.zeros(len(t), dtype=int) for t in idx]
    for c, members in enumerate(columns):
        for m, s in members:
            slots[m][s] = c
    if num_slots is not None:
        if num_slots < L:
            raise InfeasibleError(f"progressive template needs {L} slots, got {num_slots}")
        L = num_slots
    return GlobalAlignment(L, tuple(slots), tuple(seq.item_id for seq in sequences))


def _left_packed(lengths):
    return [np.arange(n, dtype=int) for n in lengths]


@dataclass
class MSAHistory:
    """Per-iteration trace of :func:`fw_msa`, concatenated over restarts."""

    relaxed: list = field(default_factory=list)
    gap: list = field(default_factory=list)
    corner_cost: list = field(default_factory=list)
    best_cost: list = field(default_factory=list)
    restart_starts: list = field(default_factory=list)


class _MSAProblem:
    def __init__(self, sequences, cost, L):
        self.lengths = [len(s) for s in sequences]
        self.off = _offsets(self.lengths)
        self.B = pairwise_block_cost(sequences, cost)
        self.L = L

    def corner(self, slot_list):
        V = np.zeros((self.off[-1], self.L))
        for n, s in enumerate(slot_list):
            V[self.off[n] + np.arange(s.size), s] = 1.0
        return V

    def block(self, M, n):
        return M[self.off[n]:self.off[n + 1]]

    def oracle(self, grad):
        return [msa_linear_oracle(self.block(grad, n)) for n in range(len(self.lengths))]


def _frank_wolfe(problem, start_slots, max_iters, line_search, tol, hist):
    B = problem.B
    U = problem.corner(start_slots)
    BU = B @ U
    best_slots = list(start_slots)
    best = 0.5 * float(np.sum(U * BU))
    hist.restart_starts.append(len(hist.corner_cost))
    hist.corner_cost.append(best)
    hist.best_cost.append(min(best, hist.best_cost[-1]) if hist.best_cost else best)
    prev_obj = best
    for t in range(max_iters):
        slot_list = problem.oracle(BU)
        V = problem.corner(slot_list)
        BV = B @ V
        D = V - U
        lin = float(np.sum(BU * D))
        c = 0.5 * float(np.sum(V * BV))
        hist.corner_cost.append(c)
        if c < best:
            best, best_slots = c, slot_list
        hist.best_cost.append(min(c, hist.best_cost[-1]))
        hist.gap.append(-lin)
        if line_search:
            curv = float(np.sum(D * (BV - BU)))
            gamma = 1.0 if curv <= 0 else min(max(-lin / curv, 0.0), 1.0)
        else:
            gamma = 2.0 / (t + 2.0)
        U = U + gamma * D
        BU = BU + gamma * (BV - BU)
        obj = 0.5 * float(np.sum(U * BU))
        hist.relaxed.append(obj)
        if -lin <= tol * max(1.0, abs(obj)):
            break
        if t > 0 and abs(prev_obj - obj) <= tol * max(1.0, abs(prev_obj)):
            break
        prev_obj = obj
    return best_slots, best


def _best_response_descent(problem, slot_list, value):
    """Re-solve one sequence at a time against the others until no move helps.

    With the other sequences fixed the objective is linear in one remapping,
    so the oracle returns that sequence's exact best response.
    """
    B = problem.B
    slot_list = list(slot_list)
    U = problem.corner(slot_list)
    improved = True
    while improved:
        improved = False
        for n in range(len(slot_list)):
            new = msa_linear_oracle(problem.block(B @ U, n))
            if np.array_equal(new, slot_list[n]):
                continue
            trial = list(slot_list)
            trial[n] = new
            V = problem.corner(trial)
            v = relaxed_objective(V, B)
            if v < value - 1e-9 * max(1.0, abs(value)):
                slot_list, U, value = trial, V, v
                improved = True
    return slot_list, value


def fw_msa(
    sequences: Sequence[TokenSequence],
    cost: TokenCostMatrix,
    num_slots: int | None = None,
    max_iters: int = 300,
    seed: int = 0,
    line_search: bool = False,
    tol: float = 1e-7,
    restarts: int = 4,
    polish: bool = True,
) -> tuple[GlobalAlignment, MSAHistory]:
    """Frank-Wolfe on the convex hull of monotone remappings.

    The relaxed objective is ``0.5 * Tr(U^T B U)`` with ``B`` the token pair
    cost whose within-sequence blocks are zero, so it equals the
    sum-of-pairs cost on integer corners. Every oracle corner is kept and the
    cheapest one is returned (Frank-Wolfe rounding).

    Parameters
    ----------
    num_slots : int, optional
        Template length. Defaults to ``2 * max_n S_n``, widened when needed so
        the progressive alignment used as the first starting corner fits.
    seed : int
        Seeds the sequence orders of the progressive alignments that start
        restarts ``1..restarts-1``. Restart 0 starts from the input order.
    restarts : int
        Number of Frank-Wolfe runs; the best corner over all runs is kept.
    polish : bool
        Finish each run's best corner with exact per-sequence best responses.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    if not sequences:
        raise EmptyInputError("no sequences to align")
    lengths = [len(s) for s in sequences]
    longest = max(lengths)
    first = progressive_align(sequences, cost)
    if num_slots is None:
        num_slots = max(2 * longest, first.num_slots)
    L = int(num_slots)
    if L < longest:
        raise InfeasibleError(f"template of {L} slots cannot hold a sequence of {longest} tokens")

    problem = _MSAProblem(sequences, cost, L)
    rng = np.random.default_rng(seed)
    hist = MSAHistory()
    best_slots, best = None, np.inf
    for r in range(restarts):
        if r == 0:
            init = first
        else:
            order = rng.permutation(len(sequences))
            perm = progressive_align([sequences[i] for i in order], cost)
            slots = [None] * len(sequences)
            for k, i in enumerate(order):
                slots[i] = perm.slots[k]
            init = GlobalAlignment(perm.num_slots, tuple(slots))
        if init.num_slots > L:
            logger.debug("start corner needs %d > %d slots, using left-packed start", init.num_slots, L)
            start = _left_packed(lengths)
        else:
            start = list(init.slots)
        slots, value = _frank_wolfe(problem, start, max_iters, line_search, tol, hist)
        if polish:
            slots, value = _best_response_descent(problem, slots, value)
            hist.best_cost[-1] = min(hist.best_cost[-1], value)
        if value < best:
            best_slots, best = slots, value
    item_ids = tuple(seq.item_id for seq in sequences)
    return GlobalAlignment(L, tuple(best_slots), item_ids), hist


def extract_main_steps(
    alignment: GlobalAlignment, K: int, sequences: Sequence[TokenSequence] | None = None
) -> StepAssignment:
    """Pick the ``k <= K`` best-supported slots, never splitting a group of tied slots."""
    if K < 1:
        raise ValueError("K must be >= 1")
    support = alignment.support()
    used = np.flatnonzero(support > 0)
    # stable sort: equal support keeps template order
    ranked = used[np.argsort(-support[used], kind="stable")]
    sup = support[ranked]
    k = min(K, ranked.size)
    while 0 < k < ranked.size and sup[k - 1] == sup[k]:
        k -= 1
    status = "ok"
    if k == 0:
        status = "empty"
        logger.warning("no salient steps: tie rule or empty alignment left k = 0")
    chosen = np.sort(ranked[:k])
    column = {int(slot): j for j, slot in enumerate(chosen)}
    assignments = []
    for s in alignment.slots:
        R = np.zeros((s.size, k), dtype=int)
        for pos, slot in enumerate(s):
            j = column.get(int(slot))
            if j is not None:
                R[pos, j] = 1
        assignments.append(R)
    labels = []
    if sequences is not None:
        for slot in chosen:
            counts = Counter(
                seq.tokens[pos]
                for seq, s in zip(sequences, alignment.slots)
                for pos in np.flatnonzero(s == slot)
            )
            top = max(counts.values())
            labels.append(min(tok for tok, c in counts.items() if c == top))
    return StepAssignment(
        num_steps=k,
        slots=tuple(int(c) for c in chosen),
        labels=tuple(labels),
        support=tuple(int(support[c]) for c in chosen),
        assignments=tuple(assignments),
        item_ids=alignment.item_ids,
        status=status,
    )
