"""Shared domain types: vocabulary, length tags, hypotheses, decode results."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

# Stand-in for log(0). Finite so score sums never turn into NaN; compared exactly.
NEG_INF = -1.0e30

VOCAB_FORMAT = "labsdub-vocab"
VOCAB_VERSION = 1

EOS = "<eos>"
STATUS_OK = "ok"
STATUS_EXHAUSTED = "length-exhausted"


class LengthTag(str, enum.Enum):
    SHORT = "short"
    NORMAL = "normal"
    LONG = "long"

    @property
    def token(self) -> str:
        return f"<{self.value}>"

    @classmethod
    def parse(cls, value: "str | LengthTag") -> "LengthTag":
        if isinstance(value, LengthTag):
            return value
        value = value.strip().lower()
        if value.startswith("<") and value.endswith(">"):
            value = value[1:-1]
        return cls(value)


ALL_TAGS: tuple[LengthTag, ...] = (LengthTag.SHORT, LengthTag.NORMAL, LengthTag.LONG)


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Target vocabulary with EOS and the three tag tokens inside it.

    Ids are list positions. ``Vocabulary.build`` puts the specials first
    (EOS=0, <short>=1, <normal>=2, <long>=3) followed by the words.
    """

    tokens: tuple[str, ...]
    eos: str = EOS
    tag_tokens: tuple[str, str, str] = tuple(t.token for t in ALL_TAGS)  # type: ignore[assignment]
    _index: Mapping[str, int] = field(init=False, repr=False, compare=False)
    eos_id: int = field(init=False, repr=False, compare=False)
    tag_ids: tuple[int, int, int] = field(init=False, repr=False, compare=False)
    _tag_of: Mapping[int, LengthTag] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        index: dict[str, int] = {}
        for i, tok in enumerate(tokens):
            if not tok or any(c.isspace() for c in tok):
                raise VocabularyError(f"invalid token {tok!r} at id {i}")
            if tok in index:
                raise VocabularyError(f"duplicate token {tok!r}")
            index[tok] = i
        specials = (self.eos, *self.tag_tokens)
        if len(set(specials)) != 4:
            raise VocabularyError("EOS and tag tokens must be mutually distinct")
        for tok in specials:
            if tok not in index:
                raise VocabularyError(f"special token {tok!r} missing from vocabulary")
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "eos_id", index[self.eos])
        object.__setattr__(self, "tag_ids", tuple(index[t] for t in self.tag_tokens))
        object.__setattr__(self, "_tag_of", dict(zip(self.tag_ids, ALL_TAGS)))

    @classmethod
    def build(cls, words: Iterable[str]) -> "Vocabulary":
        specials = [EOS] + [t.token for t in ALL_TAGS]
        seen = set(specials)
        rest = []
        for w in words:
            if w not in seen:
                seen.add(w)
                rest.append(w)
        return cls(tuple(specials + rest))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: object) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None

    def tag_of(self, token_id: int) -> LengthTag:
        try:
            return self._tag_of[token_id]
        except KeyError:
            raise VocabularyError(f"token id {token_id} is not a tag token") from None

    def is_tag(self, token_id: int) -> bool:
        return token_id in self.tag_ids

    def word_ids(self) -> list[int]:
        """Ids a decoder may emit after the tag: everything except tag tokens."""
        tags = set(self.tag_ids)
        return [i for i in range(len(self.tokens)) if i not in tags]

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.id(w) for w in words]

    def detokenize(self, ids: Sequence[int]) -> str:
        """Space-joined words, dropping tag tokens and EOS."""
        skip = {self.eos_id, *self.tag_ids}
        return " ".join(self.tokens[i] for i in ids if i not in skip)

    # --- file format -------------------------------------------------------
    # Line 1 is a header record, then one token per line in id order:
    #   #labsdub-vocab v1 eos=<eos> short=<short> normal=<normal> long=<long>

    def dumps(self) -> str:
        short, normal, long_ = self.tag_tokens
        header = (
            f"#{VOCAB_FORMAT} v{VOCAB_VERSION} eos={self.eos} "
            f"short={short} normal={normal} long={long_}"
        )
        return "\n".join([header, *self.tokens]) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines or not lines[0].startswith(f"#{VOCAB_FORMAT} "):
            raise VocabularyError("missing vocabulary header")
        fields = lines[0].split()[1:]
        if fields[0] != f"v{VOCAB_VERSION}":
            raise VocabularyError(f"unsupported vocabulary version {fields[0]}")
        kv = dict(f.split("=", 1) for f in fields[1:])
        try:
            return cls(
                tuple(lines[1:]),
                eos=kv["eos"],
                tag_tokens=(kv["short"], kv["normal"], kv["long"]),
            )
        except KeyError as exc:
            raise VocabularyError(f"header lacks {exc.args[0]}") from None

    def save(self, path: "str | Path") -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: "str | Path") -> "Vocabulary":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def tag_token_id(vocab: Vocabulary, tag: "LengthTag | str") -> int:
    return vocab.id(vocab.tag_tokens[ALL_TAGS.index(LengthTag.parse(tag))])


class Hypothesis(NamedTuple):
    # A named tuple rather than a dataclass: decoders build one per finished row.
    tag: LengthTag
    tokens: tuple[int, ...]
    score: float
    completed: bool

    def sort_key(self) -> tuple[float, tuple[int, ...]]:
        # Higher score first; equal scores fall back to the smaller id sequence.
        return (-self.score, self.tokens)

    @property
    def length(self) -> int:
        """Tokens after the tag, EOS included."""
        return len(self.tokens) - 1


def rank(hyps: Iterable[Hypothesis]) -> list[Hypothesis]:
    return sorted(hyps, key=Hypothesis.sort_key)


@dataclass(frozen=True)
class DecodeResult:
    vocab: Vocabulary
    tags: tuple[LengthTag, ...]
    nbest: tuple[Hypothesis, ...]
    status: Mapping[LengthTag, str]
    expansions: int = 0
    wall_time: float = 0.0

    def __post_init__(self) -> None:
        for h in self.nbest:
            if not h.completed:
                raise ValueError("DecodeResult holds only completed hypotheses")

    def by_tag(self, tag: "LengthTag | str") -> list[Hypothesis]:
        tag = LengthTag.parse(tag)
        return [h for h in self.nbest if h.tag == tag]

    def best(self, tag: "LengthTag | str | None" = None) -> Optional[Hypothesis]:
        pool = self.nbest if tag is None else self.by_tag(tag)
        return pool[0] if pool else None

    def text(self, hyp: Hypothesis) -> str:
        return self.vocab.detokenize(hyp.tokens)

    def to_record(self, utt_id: str, mode: str) -> dict:
        per_tag = {}
        for tag in self.tags:
            per_tag[tag.value] = {
                "status": self.status[tag],
                "hypotheses": [
                    {
                        "tokens": [self.vocab.tokens[i] for i in h.tokens],
                        "text": self.text(h),
                        "score": h.score,
                    }
                    for h in self.by_tag(tag)
                ],
            }
        return {
            "id": utt_id,
            "mode": mode,
            "tags": per_tag,
            "expansions": self.expansions,
            "wall_time_s": self.wall_time,
        }

    @classmethod
    def from_record(cls, record: Mapping, vocab: Vocabulary) -> "DecodeResult":
        tags = []
        status = {}
        hyps = []
        for name, entry in record["tags"].items():
            tag = LengthTag.parse(name)
            tags.append(tag)
            status[tag] = entry["status"]
            for h in entry["hypotheses"]:
                ids = tuple(vocab.encode(h["tokens"]))
                hyps.append(Hypothesis(tag, ids, float(h["score"]), ids[-1] == vocab.eos_id))
        return cls(
            vocab=vocab,
            tags=tuple(tags),
            nbest=tuple(rank(hyps)),
            status=status,
            expansions=int(record.get("expansions", 0)),
            wall_time=float(record.get("wall_time_s", 0.0)),
        )


@dataclass(frozen=True)
class SourceUtterance:
    id: str
    phonemes: tuple[str, ...]
    reference_duration: float
    reference: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "phonemes", tuple(self.phonemes))
        if not self.phonemes:
            raise ValueError(f"utterance {self.id!r}: empty phoneme sequence")
        if not (self.reference_duration >= 0 and math.isfinite(self.reference_duration)):
            raise ValueError(f"utterance {self.id!r}: reference duration must be >= 0")

    @classmethod
    def from_record(cls, record: Mapping) -> "SourceUtterance":
        phonemes = record["phonemes"]
        if isinstance(phonemes, str):
            phonemes = phonemes.split()
        return cls(
            id=str(record["id"]),
            phonemes=tuple(phonemes),
            reference_duration=float(record["reference_duration"]),
            reference=record.get("reference"),
        )

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "phonemes": list(self.phonemes),
            "reference_duration": self.reference_duration,
        }
        if self.reference is not None:
            rec["reference"] = self.reference
        return rec
