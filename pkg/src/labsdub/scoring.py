"""Conditional next-token scoring models.

Every model answers one question: given a source utterance and a prefix
that starts with a length-tag token, what is the log-probability of each
vocabulary token coming next. ``batch_log_probs`` answers it for a stack
of equal-length prefixes in a single call; a decoder step issues exactly
one such call, which is the unit ``CountingModel`` reports as a query.
"""

from __future__ import annotations

import functools
import json
import math
from abc import ABC, abstractmethod
from collections import Counter, defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from labsdub.core import NEG_INF, LengthTag, SourceUtterance, Vocabulary
from labsdub.lengthtag import PHONEME, TaggedExample

MODEL_FORMAT = "labsdub-model"
MODEL_VERSION = 1

DEFAULT_WEIGHTS = {
    2: (0.8, 0.2),
    3: (0.7, 0.2, 0.1),
    4: (0.6, 0.2, 0.1, 0.1),
}
DEFAULT_FLOOR = 1e-6


class ContractViolation(ValueError):
    """A query broke the scoring-model preconditions."""


def _to_log(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    logp[~(probs > 0)] = NEG_INF
    np.minimum(logp, 0.0, out=logp)
    return logp


@functools.lru_cache(maxsize=64)
def _special_masks(vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    is_tag = np.zeros(len(vocab), dtype=bool)
    is_tag[list(vocab.tag_ids)] = True
    is_special = is_tag.copy()
    is_special[vocab.eos_id] = True
    return is_tag, is_special


class ScoringModel(ABC):
    vocab: Vocabulary

    @abstractmethod
    def _log_probs_batch(self, src: SourceUtterance, prefixes: np.ndarray) -> np.ndarray:
        """Return a (B, |V|) array of log-probabilities for validated prefixes."""

    def _check(self, prefixes: np.ndarray) -> None:
        if prefixes.ndim != 2 or prefixes.shape[1] < 1:
            raise ContractViolation("prefixes must be a non-empty 2-D array of token ids")
        if prefixes.min() < 0 or prefixes.max() >= len(self.vocab):
            raise ContractViolation("token id out of vocabulary range")
        is_tag, is_special = _special_masks(self.vocab)
        if not is_tag[prefixes[:, 0]].all():
            raise ContractViolation("every prefix must start with a length-tag token")
        if is_special[prefixes[:, 1:]].any():
            raise ContractViolation("prefix holds a tag token after position 0 or an EOS")

    def batch_log_probs(self, src: SourceUtterance, prefixes: "np.ndarray | Sequence[Sequence[int]]") -> np.ndarray:
        prefixes = np.asarray(prefixes, dtype=np.int64)
        self._check(prefixes)
        out = np.array(self._log_probs_batch(src, prefixes), dtype=np.float64)
        out[:, list(self.vocab.tag_ids)] = NEG_INF
        return out

    def next_log_probs(self, src: SourceUtterance, prefix: Sequence[int]) -> np.ndarray:
        return self.batch_log_probs(src, np.asarray([prefix], dtype=np.int64))[0]

    def sequence_log_prob(self, src: SourceUtterance, tokens: Sequence[int]) -> float:
        """Cumulative log-probability of ``tokens`` (tag first) under the model."""
        total = 0.0
        for i in range(1, len(tokens)):
            total += float(self.next_log_probs(src, tokens[:i])[tokens[i]])
        return total

    def to_dict(self) -> dict:
        raise NotImplementedError(f"{type(self).__name__} is not serializable")

    def save(self, path: "str | Path") -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _envelope(kind: str, vocab: Vocabulary) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "kind": kind,
        "vocabulary": {
            "tokens": list(vocab.tokens),
            "eos": vocab.eos,
            "tags": list(vocab.tag_tokens),
        },
    }


def _vocab_from(doc: Mapping) -> Vocabulary:
    v = doc["vocabulary"]
    return Vocabulary(tuple(v["tokens"]), eos=v["eos"], tag_tokens=tuple(v["tags"]))


class TableModel(ScoringModel):
    """Explicit next-token distributions keyed by tag plus the last ``order`` tokens.

    Keys are tuples of token ids: ``(tag_id, *last_order_tokens)``. When
    the prefix is shorter than ``order`` the key is shorter too. Contexts
    that are not listed use ``default``.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        distributions: Mapping[tuple[int, ...], Sequence[float]],
        default: Sequence[float],
        order: int = 1,
    ):
        if order < 0:
            raise ValueError("order must be >= 0")
        self.vocab = vocab
        self.order = order
        self._probs = {tuple(k): self._normalize(p) for k, p in distributions.items()}
        self._default_probs = self._normalize(default)
        self._logs = {k: _to_log(p) for k, p in self._probs.items()}
        self._default = _to_log(self._default_probs)

    def _normalize(self, probs: Sequence[float]) -> np.ndarray:
        p = np.asarray(probs, dtype=np.float64).copy()
        if p.shape != (len(self.vocab),):
            raise ValueError(f"distribution has shape {p.shape}, expected ({len(self.vocab)},)")
        if (p < 0).any() or not np.isfinite(p).all():
            raise ValueError("probabilities must be finite and non-negative")
        p[list(self.vocab.tag_ids)] = 0.0
        total = p.sum()
        if total <= 0:
            raise ValueError("distribution has no mass on emittable tokens")
        return p / total

    def key(self, prefix: Sequence[int]) -> tuple[int, ...]:
        body = tuple(prefix[1:])
        tail = body[len(body) - self.order :] if self.order else ()
        return (int(prefix[0]), *tail)

    @classmethod
    def from_tokens(
        cls,
        vocab: Vocabulary,
        distributions: Mapping[Sequence[str], Mapping[str, float]],
        default: Mapping[str, float],
        order: int = 1,
    ) -> "TableModel":
        def dense(d: Mapping[str, float]) -> np.ndarray:
            p = np.zeros(len(vocab))
            for tok, v in d.items():
                p[vocab.id(tok)] = v
            return p

        table = {tuple(vocab.id(t) for t in ctx): dense(d) for ctx, d in distributions.items()}
        return cls(vocab, table, dense(default), order)

    def _log_probs_batch(self, src: SourceUtterance, prefixes: np.ndarray) -> np.ndarray:
        get = self._logs.get
        rows = [get(self.key(p), self._default) for p in prefixes.tolist()]
        return np.stack(rows)

    def to_dict(self) -> dict:
        toks = self.vocab.tokens

        def sparse(p: np.ndarray) -> dict:
            return {toks[i]: float(p[i]) for i in np.flatnonzero(p)}

        doc = _envelope("table", self.vocab)
        doc["order"] = self.order
        doc["default"] = sparse(self._default_probs)
        doc["contexts"] = [
            {"context": [toks[i] for i in k], "probs": sparse(self._probs[k])}
            for k in sorted(self._probs)
        ]
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> "TableModel":
        vocab = _vocab_from(doc)
        return cls.from_tokens(
            vocab,
            {tuple(c["context"]): c["probs"] for c in doc["contexts"]},
            doc["default"],
            int(doc["order"]),
        )


class NGramModel(ScoringModel):
    """Tag-conditioned n-gram model with linear interpolation across orders.

    Every context starts with the length tag, so each order's counts are
    tag-specific. When ``bucket_width`` is positive the source phoneme
    count, bucketed, joins the tag as conditioning; unseen (tag, bucket)
    pairs back off to the tag alone. Levels whose history was never seen
    drop out and the remaining weights are renormalized. A uniform floor
    over emittable tokens keeps every continuation finite.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        order: int,
        weights: Sequence[float],
        counts: Mapping[tuple[int, int, tuple[int, ...]], Mapping[int, int]],
        floor: float = DEFAULT_FLOOR,
        bucket_width: int = 0,
        max_bucket: int = 16,
    ):
        _check_weights(order, weights)
        if not 0 <= floor < 1:
            raise ValueError("floor must be in [0, 1)")
        self.vocab = vocab
        self.order = order
        self.weights = tuple(float(w) for w in weights)
        self.floor = float(floor)
        self.bucket_width = int(bucket_width)
        self.max_bucket = int(max_bucket)
        # (tag_id, bucket, history) -> {next_id: count}; bucket -1 = any source
        self.counts = {k: dict(v) for k, v in counts.items()}

        V = len(vocab)
        emit = np.zeros(V)
        emit[vocab.word_ids()] = 1.0
        self._uniform = emit / emit.sum()
        self._dense: dict[tuple[int, int, tuple[int, ...]], np.ndarray] = {}
        for key, nxt in self.counts.items():
            vec = np.zeros(V)
            for tok, c in nxt.items():
                vec[tok] = c
            self._dense[key] = vec / vec.sum()
        # Computed distributions live as rows of one table so a batch is a single gather.
        self._cache: dict[tuple, int] = {}
        self._table = np.empty((64, V))

    def bucket(self, n_phonemes: int) -> int:
        if self.bucket_width <= 0:
            return -1
        return min(n_phonemes // self.bucket_width, self.max_bucket)

    def histories(self, prefix: Sequence[int]) -> list[tuple[int, ...]]:
        """Histories for each level, highest order first (last n-1 ... 0 tokens)."""
        i = len(prefix)
        return [tuple(prefix[max(0, i - j) : i]) if j else () for j in range(self.order - 1, -1, -1)]

    def distribution(self, tag_id: int, bucket: int, prefix: Sequence[int]) -> np.ndarray:
        return self._table[self._row(tag_id, bucket, prefix)]

    def _row(self, tag_id: int, bucket: int, prefix: Sequence[int]) -> int:
        # Lower-order histories are suffixes of the top one, so it keys the cache.
        key = (tag_id, bucket, tuple(prefix[-(self.order - 1) :]))
        row = self._cache.get(key)
        if row is not None:
            return row
        hists = self.histories(prefix)
        cond = None
        for b in (bucket, -1) if bucket != -1 else (-1,):
            if (tag_id, b, ()) in self._dense:
                cond = b
                break
        if cond is None:
            probs = self._uniform.copy()
        else:
            seen = [(w, self._dense[(tag_id, cond, h)]) for w, h in zip(self.weights, hists) if (tag_id, cond, h) in self._dense]
            wsum = sum(w for w, _ in seen)
            if wsum > 0:
                mix = sum(w * vec for w, vec in seen) / wsum
            else:
                mix = seen[-1][1]
            probs = (1.0 - self.floor) * mix + self.floor * self._uniform
        row = len(self._cache)
        if row == len(self._table):
            self._table = np.concatenate([self._table, np.empty_like(self._table)])
        self._table[row] = _to_log(probs)
        self._cache[key] = row
        return row

    def _log_probs_batch(self, src: SourceUtterance, prefixes: np.ndarray) -> np.ndarray:
        b = self.bucket(len(src.phonemes))
        row = self._row
        rows = [row(p[0], b, p) for p in prefixes.tolist()]
        return self._table[rows]

    def to_dict(self) -> dict:
        toks = self.vocab.tokens
        doc = _envelope("ngram", self.vocab)
        doc.update(
            order=self.order,
            weights=list(self.weights),
            floor=self.floor,
            bucket_width=self.bucket_width,
            max_bucket=self.max_bucket,
        )
        doc["counts"] = [
            {
                "tag": toks[tag],
                "bucket": bucket,
                "history": [toks[i] for i in hist],
                "next": {toks[i]: c for i, c in sorted(nxt.items())},
            }
            for (tag, bucket, hist), nxt in sorted(self.counts.items())
        ]
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> "NGramModel":
        vocab = _vocab_from(doc)
        counts = {}
        for rec in doc["counts"]:
            key = (vocab.id(rec["tag"]), int(rec["bucket"]), tuple(vocab.encode(rec["history"])))
            counts[key] = {vocab.id(t): int(c) for t, c in rec["next"].items()}
        return cls(
            vocab,
            int(doc["order"]),
            doc["weights"],
            counts,
            floor=float(doc["floor"]),
            bucket_width=int(doc["bucket_width"]),
            max_bucket=int(doc["max_bucket"]),
        )


def _check_weights(order: int, weights: Sequence[float]) -> None:
    if order < 2:
        raise ValueError("n-gram order must be >= 2")
    if len(weights) != order:
        raise ValueError(f"need {order} interpolation weights, got {len(weights)}")
    if any(w < 0 for w in weights):
        raise ValueError("interpolation weights must be non-negative")
    if abs(math.fsum(weights) - 1.0) > 1e-9:
        raise ValueError(f"interpolation weights must sum to 1, got {math.fsum(weights)}")


def train_ngram(
    corpus: Sequence[TaggedExample],
    order: int = 3,
    weights: Optional[Sequence[float]] = None,
    floor: float = DEFAULT_FLOOR,
    bucket_width: int = 0,
    max_bucket: int = 16,
    vocab: Optional[Vocabulary] = None,
) -> NGramModel:
    """Count tag-conditioned n-grams over the whitespace tokens of each target."""
    if not corpus:
        raise ValueError("cannot train on an empty corpus")
    if weights is None:
        if order not in DEFAULT_WEIGHTS:
            raise ValueError(f"no default weights for order {order}; pass weights")
        weights = DEFAULT_WEIGHTS[order]
    _check_weights(order, weights)
    if bucket_width > 0 and any(ex.unit != PHONEME for ex in corpus):
        raise ValueError("source-length buckets need phoneme-unit annotations")
    if vocab is None:
        vocab = Vocabulary.build(w for ex in corpus for w in ex.target.split())

    counts: dict = defaultdict(Counter)
    probe = NGramModel(vocab, order, weights, {}, floor, bucket_width, max_bucket)
    for ex in corpus:
        tag_id = vocab.id(LengthTag.parse(ex.tag).token)
        seq = [tag_id, *vocab.encode(ex.target.split()), vocab.eos_id]
        buckets = {-1, probe.bucket(ex.src_units)}
        for i in range(1, len(seq)):
            for hist in probe.histories(seq[:i]):
                for b in buckets:
                    counts[(tag_id, b, hist)][seq[i]] += 1
    return NGramModel(vocab, order, weights, counts, floor, bucket_width, max_bucket)


class CountingModel(ScoringModel):
    """Wraps a model and counts batched calls (``calls``) and prefixes scored (``rows``)."""

    def __init__(self, inner: ScoringModel):
        self.inner = inner
        self.vocab = inner.vocab
        self.calls = 0
        self.rows = 0

    def reset(self) -> None:
        self.calls = 0
        self.rows = 0

    def _log_probs_batch(self, src: SourceUtterance, prefixes: np.ndarray) -> np.ndarray:
        self.calls += 1
        self.rows += prefixes.shape[0]
        return self.inner._log_probs_batch(src, prefixes)


def load_model(path: "str | Path") -> ScoringModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return model_from_dict(doc)


def model_from_dict(doc: Mapping) -> ScoringModel:
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError("not a labsdub model document")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')}")
    kinds = {"table": TableModel, "ngram": NGramModel}
    try:
        return kinds[doc["kind"]].from_dict(doc)
    except KeyError:
        raise ValueError(f"unknown model kind {doc.get('kind')!r}") from None


def load_vocabulary(path: "str | Path") -> Vocabulary:
    """Vocabulary from either a model document or a vocabulary file."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        return _vocab_from(json.loads(text))
    return Vocabulary.loads(text)


def perplexity(model: ScoringModel, items: Iterable[tuple[SourceUtterance, Sequence[int]]]) -> float:
    """Per-token perplexity over (source, tag-first token sequence) items."""
    total, n = 0.0, 0
    for src, tokens in items:
        total += model.sequence_log_prob(src, tokens)
        n += len(tokens) - 1
    return math.exp(-total / n)
