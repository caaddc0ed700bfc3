"""Beam search decoders: length-aware single-pass (LABS), standard, and an exhaustive oracle.

All active hypotheses in a beam have the same length, so a beam is kept as
a token matrix plus a score vector and one decoder step is one batched
model call. Ranking everywhere is by cumulative log-probability, highest
first; equal scores go to the lexicographically smaller id sequence.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from labsdub.core import (
    ALL_TAGS,
    NEG_INF,
    STATUS_EXHAUSTED,
    STATUS_OK,
    DecodeResult,
    Hypothesis,
    LengthTag,
    SourceUtterance,
    Vocabulary,
    rank,
    tag_token_id,
)
from labsdub.scoring import ScoringModel

logger = logging.getLogger(__name__)

DEFAULT_ORACLE_CAP = 10**7


@dataclass(frozen=True)
class BeamConfig:
    """Beam budget for LABS.

    ``per_tag`` slots are reserved for each explored tag at every prune;
    if they do not fit in ``beam_size`` they shrink to
    ``beam_size // len(tags)`` with a warning. ``max_len`` counts tokens
    after the tag, EOS included. ``length_penalty`` (GNMT-style exponent)
    only affects final ranking and is off by default.
    """

    beam_size: int = 9
    per_tag: int = 3
    max_len: int = 50
    tags: tuple[LengthTag, ...] = ALL_TAGS
    early_stop: bool = True
    length_penalty: float = 0.0

    def __post_init__(self) -> None:
        tags = tuple(t for t in ALL_TAGS if t in {LengthTag.parse(x) for x in self.tags})
        if not tags:
            raise ValueError("tag set must not be empty")
        object.__setattr__(self, "tags", tags)
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.per_tag < 0:
            raise ValueError("per_tag must be >= 0")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.per_tag * len(tags) > self.beam_size:
            g = self.beam_size // len(tags)
            warnings.warn(
                f"per_tag={self.per_tag} x {len(tags)} tags exceeds beam_size={self.beam_size}; using per_tag={g}",
                stacklevel=3,
            )
            object.__setattr__(self, "per_tag", g)


class Candidates:
    """Expansions of one beam step; rows share a length and start with a tag id.

    A row is ``prefixes[parent[i]]`` followed by ``token[i]``. Full rows are
    only built on request, since most candidates are discarded unseen.
    """

    __slots__ = ("vocab", "prefixes", "parent", "token", "scores", "lex_key", "lex_sorted")

    def __init__(
        self,
        vocab: Vocabulary,
        prefixes: np.ndarray,
        parent: np.ndarray,
        token: np.ndarray,
        scores: np.ndarray,
        lex_key: Optional[np.ndarray] = None,
        lex_sorted: bool = False,
    ) -> None:
        self.vocab = vocab
        self.prefixes = prefixes
        self.parent = parent
        self.token = token
        self.scores = scores
        # Optional integer whose order equals the lexicographic order of the rows.
        self.lex_key = lex_key
        # True when index order already is lexicographic order.
        self.lex_sorted = lex_sorted

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def completed(self) -> np.ndarray:
        return self.token == self.vocab.eos_id

    @property
    def lead(self) -> np.ndarray:
        return self.prefixes[self.parent, 0]

    def lead_of(self, idx: np.ndarray) -> np.ndarray:
        return self.prefixes[self.parent[idx], 0]

    @property
    def tokens(self) -> np.ndarray:
        return self.rows(np.arange(len(self)))

    def rows(self, idx: np.ndarray) -> np.ndarray:
        return np.concatenate([self.prefixes[self.parent[idx]], self.token[idx, None]], axis=1)

    def subset(self, idx: np.ndarray) -> "Candidates":
        key = None if self.lex_key is None else self.lex_key[idx]
        # Fancy indexing keeps lexicographic order only for increasing indices.
        still_sorted = self.lex_sorted and bool(np.all(np.diff(idx) > 0))
        return Candidates(
            self.vocab, self.prefixes, self.parent[idx], self.token[idx], self.scores[idx], key, still_sorted
        )

    def hypotheses(self, idx: Optional[np.ndarray] = None) -> list[Hypothesis]:
        if idx is None:
            idx = np.arange(len(self))
        eos, tag_of = self.vocab.eos_id, self.vocab.tag_of
        return [
            Hypothesis(tag_of(row[0]), tuple(row), s, row[-1] == eos)
            for row, s in zip(self.rows(idx).tolist(), self.scores[idx].tolist())
        ]

    @classmethod
    def from_hypotheses(cls, vocab: Vocabulary, hyps: Sequence[Hypothesis]) -> "Candidates":
        lengths = {len(h.tokens) for h in hyps}
        if len(lengths) > 1:
            raise ValueError("candidates of one step must share a length")
        width = lengths.pop() if lengths else 2
        if width < 2:
            raise ValueError("a candidate holds a tag and at least one more token")
        tokens = np.array([h.tokens for h in hyps], dtype=np.int64).reshape(len(hyps), width)
        scores = np.array([h.score for h in hyps], dtype=np.float64)
        return cls(vocab, tokens[:, :-1], np.arange(len(hyps)), tokens[:, -1].copy(), scores)


class FinishedPools(Mapping):
    """Completed hypotheses per tag.

    Rows arrive as one block per step and stay arrays until read, so a
    decode only pays for the hypotheses it actually returns. Reading a tag
    gives its pool ranked best first.
    """

    def __init__(self, vocab: Vocabulary, tags: Iterable[LengthTag]) -> None:
        self.vocab = vocab
        self.tags = tuple(LengthTag.parse(t) for t in tags)
        self._blocks: list[tuple[np.ndarray, np.ndarray]] = []
        # Best finished score indexed by tag token id; -inf while a pool is empty.
        self.best_by_id = np.full(len(vocab), -np.inf)
        self._empty = set(_tag_ids(vocab, self.tags))

    def add(self, rows: np.ndarray, scores: np.ndarray) -> None:
        if len(scores) == 0:
            return
        if not (rows[:, -1] == self.vocab.eos_id).all():
            raise ValueError("finished rows must end with EOS")
        self._blocks.append((rows, scores))
        np.maximum.at(self.best_by_id, rows[:, 0], scores)
        if self._empty:
            self._empty.difference_update(rows[:, 0].tolist())

    def extend(self, hyps: Iterable[Hypothesis]) -> None:
        for h in hyps:
            self.add(np.array([h.tokens], dtype=np.int64), np.array([h.score], dtype=np.float64))

    def best(self, tag: "LengthTag | str") -> Optional[float]:
        score = self.best_by_id[tag_token_id(self.vocab, tag)]
        return None if score == -np.inf else float(score)

    def all_nonempty(self) -> bool:
        return not self._empty

    def _flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self._blocks:
            empty = np.zeros(0, dtype=np.int64)
            return empty.astype(np.float64), empty, np.zeros(1, dtype=np.int64)
        scores = np.concatenate([b[1] for b in self._blocks])
        lead = np.concatenate([b[0][:, 0] for b in self._blocks])
        offsets = np.cumsum([0] + [len(b[1]) for b in self._blocks])
        return scores, lead, offsets

    def _hypotheses(self, idx: np.ndarray, offsets: np.ndarray) -> list[Hypothesis]:
        tag_of = self.vocab.tag_of
        blocks = np.searchsorted(offsets, idx, "right") - 1
        out = []
        for i, b in zip((idx - offsets[blocks]).tolist(), blocks.tolist()):
            rows, scores = self._blocks[b]
            row = tuple(rows[i].tolist())
            out.append(Hypothesis(tag_of(row[0]), row, float(scores[i]), True))
        return out

    def top(self, tag: "LengthTag | str", k: Optional[int] = None) -> list[Hypothesis]:
        """The ``k`` best of one tag's pool (all of it when ``k`` is None), ranked."""
        scores, lead, offsets = self._flat()
        idx = np.flatnonzero(lead == tag_token_id(self.vocab, tag))
        if k is not None and len(idx) > k:
            # Keep everything tied with the k-th score; the exact ranking settles ties.
            cut = np.partition(scores[idx], len(idx) - k)[len(idx) - k]
            idx = idx[scores[idx] >= cut]
        return rank(self._hypotheses(idx, offsets))[:k]

    def shortlist(self, k: int) -> dict[LengthTag, list[Hypothesis]]:
        """Sub-pools that still hold each tag's best and the overall ``k`` best.

        Choosing an n-best of size ``k`` from these gives the same answer as
        choosing from the full pools, at the cost of materializing a handful.
        """
        scores, lead, offsets = self._flat()
        keep = scores == self.best_by_id[lead]
        if len(scores) > k:
            keep |= scores >= np.partition(scores, len(scores) - k)[len(scores) - k]
        else:
            keep[:] = True
        out: dict[LengthTag, list[Hypothesis]] = {t: [] for t in self.tags}
        for h in self._hypotheses(np.flatnonzero(keep), offsets):
            out[h.tag].append(h)
        return out

    def __getitem__(self, tag: "LengthTag | str") -> list[Hypothesis]:
        tag = LengthTag.parse(tag)
        if tag not in self.tags:
            raise KeyError(tag)
        return self.top(tag)

    def __iter__(self):
        return iter(self.tags)

    def __len__(self) -> int:
        return len(self.tags)


@dataclass
class BeamState:
    vocab: Vocabulary
    tokens: np.ndarray
    scores: np.ndarray
    finished: FinishedPools
    step: int = 0
    # Set when rows are known to be in lexicographic order; lets expand skip a sort.
    lex_sorted: bool = False

    def __len__(self) -> int:
        return len(self.scores)

    def active(self) -> list[Hypothesis]:
        tag_of = self.vocab.tag_of
        return [
            Hypothesis(tag_of(row[0]), tuple(row), s, False)
            for row, s in zip(self.tokens.tolist(), self.scores.tolist())
        ]

    def sub_beam(self, tag: "LengthTag | str") -> list[Hypothesis]:
        tag = LengthTag.parse(tag)
        return [h for h in self.active() if h.tag == tag]

    @classmethod
    def initial(cls, vocab: Vocabulary, tags: Iterable[LengthTag]) -> "BeamState":
        tags = tuple(tags)
        tokens = np.sort(np.array([[tag_token_id(vocab, t)] for t in tags], dtype=np.int64), axis=0)
        return cls(vocab, tokens, np.zeros(len(tags)), FinishedPools(vocab, tags), 0, lex_sorted=True)


def expand(state: BeamState, model: ScoringModel, src: SourceUtterance) -> Candidates:
    """Extend every active hypothesis by every token with non-zero probability."""
    if len(state) == 0:
        raise ValueError("no active hypotheses to expand")
    logp = model.batch_log_probs(src, state.tokens)
    parent, tok = np.nonzero(logp > NEG_INF)
    scores = state.scores[parent] + logp[parent, tok]
    if state.lex_sorted:
        # nonzero walks row-major, so sorted parents give sorted candidates.
        return Candidates(state.vocab, state.tokens, parent, tok, scores, lex_sorted=True)
    # Beam rows are distinct, so (parent's lexicographic rank, token) orders the candidates.
    parent_rank = np.empty(len(state), dtype=np.int64)
    parent_rank[_lex_order(state.tokens)] = np.arange(len(state))
    lex_key = parent_rank[parent] * logp.shape[1] + tok
    return Candidates(state.vocab, state.tokens, parent, tok, scores, lex_key)


def _lex_order(tokens: np.ndarray) -> np.ndarray:
    # np.lexsort sorts by its last key first.
    return np.lexsort(tuple(tokens[:, j] for j in range(tokens.shape[1] - 1, -1, -1)))


def _ranked_order(cands: Candidates, idx: Optional[np.ndarray] = None) -> np.ndarray:
    """Indices by score descending, ties to the lexicographically smaller sequence."""
    if idx is None:
        idx = np.arange(len(cands))
    scores = cands.scores[idx]
    if cands.lex_sorted:
        # idx is increasing, so a stable sort leaves ties in lexicographic order.
        return idx[np.argsort(-scores, kind="stable")]
    if cands.lex_key is not None:
        return idx[np.lexsort((cands.lex_key[idx], -scores))]
    tokens = cands.rows(idx)
    keys = tuple(tokens[:, j] for j in range(tokens.shape[1] - 1, -1, -1)) + (-scores,)
    return idx[np.lexsort(keys)]


def _tag_ids(vocab: Vocabulary, tags: Iterable[LengthTag]) -> list[int]:
    return [vocab.tag_ids[ALL_TAGS.index(t)] for t in tags]


def _ranked_head(cands: Candidates, idx: np.ndarray, m: int) -> tuple[np.ndarray, bool]:
    """Rank order of at least the ``m`` best of ``idx``, and whether that is all of it.

    Everything tied with the m-th score is included, so whatever is left out
    scores strictly lower and ranks after the head.
    """
    if len(idx) <= 2 * m:
        return _ranked_order(cands, idx), True
    scores = cands.scores[idx]
    cut = np.partition(scores, len(idx) - m)[len(idx) - m]
    return _ranked_order(cands, idx[scores >= cut]), False


def _reserve(lead: list, quota: dict, beam_size: int, exhaustive: bool) -> Optional[list]:
    """Positions in a ranked list kept by the per-tag quotas and the global fill.

    Returns None when the list is only a head of the ranking and ran out
    before the quotas and the fill were settled.
    """
    pending = len(quota)
    reserved, queued = [], []
    for pos, tag_id in enumerate(lead):
        if quota[tag_id]:
            reserved.append(pos)
            quota[tag_id] -= 1
            if not quota[tag_id]:
                pending -= 1
        elif len(queued) < beam_size:
            queued.append(pos)
        if not pending and len(queued) >= beam_size - len(reserved):
            break
    else:
        if not exhaustive:
            return None
    return reserved + queued[: beam_size - len(reserved)]


def _keep(cands: Candidates, live: np.ndarray, beam_size: int, per_tag: int) -> np.ndarray:
    """Live candidates surviving the prune: per-tag reservations, then global fill."""
    # The survivors almost always sit near the top, so rank a head first.
    order, whole = _ranked_head(cands, live, 4 * beam_size)
    if not per_tag:
        return order[:beam_size]
    tags = set(cands.prefixes[:, 0].tolist())
    picked = _reserve(cands.lead_of(order).tolist(), dict.fromkeys(tags, per_tag), beam_size, whole)
    if picked is None:
        # Some tag ranks too low for the head. Its own head supplies its quota, and
        # the global head, a true prefix of the ranking, still supplies the fill.
        lead = cands.lead_of(live)
        parts = [order] + [_ranked_head(cands, live[lead == t], per_tag)[0] for t in tags]
        order = _ranked_order(cands, np.unique(np.concatenate(parts)))
        picked = _reserve(cands.lead_of(order).tolist(), dict.fromkeys(tags, per_tag), beam_size, True)
    return order[picked]


def prune(candidates: Candidates, cfg: BeamConfig, previous: Optional[BeamState] = None) -> BeamState:
    """Length-aware pruning of one step's candidates.

    Completed candidates go to the finished pools and are never dropped.
    Of the rest, the best ``per_tag`` of each tag are kept first, then the
    remaining room up to ``beam_size`` is filled by global rank. The
    finished pools of ``previous`` are carried over and extended in place.
    """
    if previous is None:
        pools, step = FinishedPools(candidates.vocab, cfg.tags), 1
    else:
        pools, step = previous.finished, previous.step + 1
    completed = candidates.completed
    done = np.flatnonzero(completed)
    if len(done):
        pools.add(candidates.rows(done), candidates.scores[done])
    chosen = _keep(candidates, np.flatnonzero(~completed), cfg.beam_size, cfg.per_tag)
    if candidates.lex_sorted:
        chosen = np.sort(chosen)
    return BeamState(
        candidates.vocab, candidates.rows(chosen), candidates.scores[chosen], pools, step, candidates.lex_sorted
    )


def _final_key(length_penalty: float):
    if not length_penalty:
        return Hypothesis.sort_key

    def key(h: Hypothesis):
        return (-h.score / (((5 + h.length) / 6) ** length_penalty), h.tokens)

    return key


def select_nbest(
    finished: Mapping[LengthTag, Sequence[Hypothesis]],
    cfg: BeamConfig,
    vocab: Vocabulary,
) -> DecodeResult:
    """Up to ``beam_size`` hypotheses: each tag's best first, then the rest by rank.

    With fewer slots than non-empty tags the budget wins and only the
    globally best tag-leaders survive.
    """
    key = _final_key(cfg.length_penalty)
    if isinstance(finished, FinishedPools) and not cfg.length_penalty:
        finished = finished.shortlist(cfg.beam_size)
    leaders, rest = [], []
    status = {}
    for tag in cfg.tags:
        pool = sorted(finished.get(tag, ()), key=key)
        status[tag] = STATUS_OK if pool else STATUS_EXHAUSTED
        if pool:
            leaders.append(pool[0])
            rest.extend(pool[1:])
    leaders.sort(key=key)
    chosen = leaders[: cfg.beam_size]
    chosen += sorted(rest, key=key)[: cfg.beam_size - len(chosen)]
    return DecodeResult(vocab=vocab, tags=cfg.tags, nbest=tuple(sorted(chosen, key=key)), status=status)


def _can_stop(state: BeamState) -> bool:
    """True once no active hypothesis can still beat its tag's best finished one."""
    pools = state.finished
    if not pools.all_nonempty():
        return False
    return bool((state.scores < pools.best_by_id[state.tokens[:, 0]]).all())


def labs_decode(model: ScoringModel, src: SourceUtterance, cfg: BeamConfig = BeamConfig()) -> DecodeResult:
    """Decode every tag in ``cfg.tags`` in one pass over a shared beam."""
    start = time.perf_counter()
    vocab = model.vocab
    state = BeamState.initial(vocab, cfg.tags)
    expansions = 0
    for step in range(1, cfg.max_len + 1):
        if len(state) == 0:
            break
        expansions += len(state)
        cands = expand(state, model, src)
        if step == cfg.max_len:
            cands = cands.subset(np.flatnonzero(cands.completed))
        state = prune(cands, cfg, state)
        assert len(state) <= cfg.beam_size
        if cfg.early_stop and _can_stop(state):
            break
    result = select_nbest(state.finished, cfg, vocab)
    return replace(result, expansions=expansions, wall_time=time.perf_counter() - start)


def standard_beam_decode(
    model: ScoringModel,
    src: SourceUtterance,
    tag: "LengthTag | str",
    width: int,
    max_len: int,
    early_stop: bool = True,
) -> DecodeResult:
    """Classic beam search seeded with one tag token; keeps the top ``width`` per step."""
    if width < 1:
        raise ValueError("width must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    start = time.perf_counter()
    tag = LengthTag.parse(tag)
    vocab = model.vocab
    state = BeamState.initial(vocab, (tag,))
    pools = state.finished
    expansions = 0
    for step in range(1, max_len + 1):
        if len(state) == 0:
            break
        expansions += len(state)
        cands = expand(state, model, src)
        finished = cands.completed
        idx = np.flatnonzero(finished)
        if len(idx):
            pools.add(cands.rows(idx), cands.scores[idx])
        if step == max_len:
            break
        top = _ranked_head(cands, np.flatnonzero(~finished), width)[0][:width]
        if cands.lex_sorted:
            top = np.sort(top)
        state = BeamState(vocab, cands.rows(top), cands.scores[top], pools, step, cands.lex_sorted)
        if early_stop and _can_stop(state):
            break
    nbest = tuple(rank(pools.shortlist(width)[tag])[:width])
    return DecodeResult(
        vocab=vocab,
        tags=(tag,),
        nbest=nbest,
        status={tag: STATUS_OK if nbest else STATUS_EXHAUSTED},
        expansions=expansions,
        wall_time=time.perf_counter() - start,
    )


class OracleRefused(RuntimeError):
    pass


@dataclass(frozen=True)
class OracleResult:
    tag: LengthTag
    ranked: tuple[Hypothesis, ...]

    @property
    def best(self) -> Optional[Hypothesis]:
        return self.ranked[0] if self.ranked else None


def enumerate_oracle(
    model: ScoringModel,
    src: SourceUtterance,
    tag: "LengthTag | str",
    max_len: int,
    cap: int = DEFAULT_ORACLE_CAP,
) -> OracleResult:
    """Score every complete sequence of at most ``max_len`` tokens after ``tag``.

    Walks the prefix tree one prefix at a time through ``next_log_probs``.
    Zero-probability continuations are not sequences of the model and are
    skipped. Refuses when the worst-case number of visited sequences
    exceeds ``cap``.
    """
    tag = LengthTag.parse(tag)
    vocab = model.vocab
    branching = len(vocab.word_ids()) - 1
    visits = sum(branching**d for d in range(max_len)) * (branching + 1)
    if visits > cap:
        raise OracleRefused(f"{visits} sequences exceed the enumeration cap of {cap}")
    eos = vocab.eos_id
    frontier = [((tag_token_id(vocab, tag),), 0.0)]
    complete = []
    for _ in range(max_len):
        nxt = []
        for prefix, score in frontier:
            logp = model.next_log_probs(src, prefix)
            for tok in range(len(logp)):
                lp = float(logp[tok])
                if lp <= NEG_INF:
                    continue
                seq = prefix + (tok,)
                if tok == eos:
                    complete.append(Hypothesis(tag, seq, score + lp, True))
                else:
                    nxt.append((seq, score + lp))
        frontier = nxt
    return OracleResult(tag, tuple(rank(complete)))
