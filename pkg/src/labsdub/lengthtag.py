"""G2P lookup, length-unit counting and ratio-based length-tag assignment."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from labsdub.core import LengthTag

DEFAULT_ALPHA = 0.1
PHONEME = "phoneme"
CHARACTER = "character"
UNITS = (PHONEME, CHARACTER)

# Anything outside word characters and whitespace, in-word apostrophes excepted.
_PUNCT = re.compile(r"[^\w\s']|_|(?<!\w)'|'(?!\w)")


class G2PError(ValueError):
    pass


def normalize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass(frozen=True)
class G2PLexicon:
    """Word lexicon plus a grapheme rule table for out-of-vocabulary words.

    Rules are applied greedily, longest grapheme first, so multi-letter
    rules such as ``sh -> SH`` win over ``s`` followed by ``h``.
    """

    entries: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    rules: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    alphabet: Optional[str] = None

    def __post_init__(self) -> None:
        entries = {w.lower(): tuple(p) for w, p in self.entries.items()}
        rules = {g.lower(): tuple(p) for g, p in self.rules.items()}
        for word, phones in entries.items():
            if not phones:
                raise G2PError(f"lexicon entry {word!r} has no phonemes")
        for graph, phones in rules.items():
            if not graph or not phones:
                raise G2PError(f"bad fallback rule {graph!r} -> {phones!r}")
        if self.alphabet is not None:
            missing = sorted(set(self.alphabet.lower()) - set(rules))
            if missing:
                raise G2PError(f"fallback rules miss letters: {''.join(missing)}")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "rules", rules)
        object.__setattr__(self, "_max_graph", max((len(g) for g in rules), default=0))

    def word(self, word: str) -> tuple[str, ...]:
        hit = self.entries.get(word)
        if hit is not None:
            return hit
        out: list[str] = []
        i = 0
        while i < len(word):
            for size in range(min(self._max_graph, len(word) - i), 0, -1):  # type: ignore[attr-defined]
                rule = self.rules.get(word[i : i + size])
                if rule is not None:
                    out.extend(rule)
                    i += size
                    break
            else:
                raise G2PError(f"no lexicon entry or rule covers {word[i]!r} in {word!r}")
        return tuple(out)

    @classmethod
    def load(
        cls,
        lexicon_path: "str | Path | None" = None,
        rules_path: "str | Path | None" = None,
        alphabet: Optional[str] = None,
    ) -> "G2PLexicon":
        entries = _read_tsv(lexicon_path) if lexicon_path else {}
        rules = _read_tsv(rules_path) if rules_path else {}
        return cls(entries, rules, alphabet)

    def save(self, lexicon_path: "str | Path", rules_path: "str | Path | None" = None) -> None:
        _write_tsv(lexicon_path, self.entries)
        if rules_path is not None:
            _write_tsv(rules_path, self.rules)


def _read_tsv(path: "str | Path") -> dict[str, tuple[str, ...]]:
    table: dict[str, tuple[str, ...]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            key, phones = line.split("\t", 1)
        except ValueError:
            raise G2PError(f"{path}:{lineno}: expected 'word<TAB>phonemes'") from None
        table[key.strip()] = tuple(phones.split())
    return table


def _write_tsv(path: "str | Path", table: Mapping[str, Sequence[str]]) -> None:
    lines = [f"{k}\t{' '.join(v)}" for k, v in sorted(table.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def g2p(lexicon: G2PLexicon, text: str) -> list[str]:
    words = normalize(text)
    if not words:
        raise G2PError("text is empty after normalization")
    phones: list[str] = []
    for w in words:
        phones.extend(lexicon.word(w))
    return phones


def count_units(text: str, unit: str, lexicon: Optional[G2PLexicon] = None) -> int:
    if unit == PHONEME:
        if lexicon is None:
            raise G2PError("phoneme counting needs a lexicon")
        return len(g2p(lexicon, text))
    if unit == CHARACTER:
        words = normalize(text)
        if not words:
            raise G2PError("text is empty after normalization")
        return sum(len(w) for w in words)
    raise ValueError(f"unknown unit {unit!r}; expected one of {UNITS}")


def _exact(x: float) -> Fraction:
    # Read alpha as the decimal the user wrote, so 1 - 0.3 is exactly 7/10.
    return Fraction(repr(float(x)))


def assign_tag(src_units: int, tgt_units: int, alpha: float = DEFAULT_ALPHA) -> tuple[float, LengthTag]:
    """Return ``(r, tag)`` with ``r = tgt_units / src_units``.

    short if r < 1 - alpha, long if r > 1 + alpha, otherwise normal
    (both boundaries belong to normal). The comparison is done in exact
    rational arithmetic.
    """
    if src_units < 1 or tgt_units < 1:
        raise ValueError(f"unit counts must be >= 1, got src={src_units} tgt={tgt_units}")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    r = Fraction(int(tgt_units), int(src_units))
    a = _exact(alpha)
    if r < 1 - a:
        tag = LengthTag.SHORT
    elif r > 1 + a:
        tag = LengthTag.LONG
    else:
        tag = LengthTag.NORMAL
    return float(r), tag


@dataclass(frozen=True)
class TaggedExample:
    source: str
    target: str
    src_units: int
    tgt_units: int
    ratio: float
    tag: LengthTag
    unit: str = PHONEME
    alpha: float = DEFAULT_ALPHA
    id: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "tag", LengthTag.parse(self.tag))
        if self.unit not in UNITS:
            raise ValueError(f"unknown unit {self.unit!r}")

    def is_consistent(self) -> bool:
        r, tag = assign_tag(self.src_units, self.tgt_units, self.alpha)
        return tag == self.tag and r == self.ratio

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["tag"] = self.tag.value
        if rec["id"] is None:
            del rec["id"]
        return rec

    @classmethod
    def from_record(cls, record: Mapping) -> "TaggedExample":
        return cls(
            source=record["source"],
            target=record["target"],
            src_units=int(record["src_units"]),
            tgt_units=int(record["tgt_units"]),
            ratio=float(record["ratio"]),
            tag=LengthTag.parse(record["tag"]),
            unit=record.get("unit", PHONEME),
            alpha=float(record.get("alpha", DEFAULT_ALPHA)),
            id=record.get("id"),
        )


@dataclass
class AnnotationReport:
    unit: str
    alpha: float
    counts: dict[str, int]
    histogram: dict[str, int]
    failures: list[dict]
    total: int

    @property
    def annotated(self) -> int:
        return self.total - len(self.failures)

    def to_dict(self) -> dict:
        return {
            "unit": self.unit,
            "alpha": self.alpha,
            "total": self.total,
            "annotated": self.annotated,
            "counts": self.counts,
            "ratio_histogram": self.histogram,
            "failures": self.failures,
        }

    def to_text(self) -> str:
        lines = [
            f"unit={self.unit} alpha={self.alpha} annotated={self.annotated}/{self.total}",
            "tag counts:",
        ]
        lines += [f"  {tag:<7} {n}" for tag, n in self.counts.items()]
        lines.append("ratio histogram (bin start, width 0.1):")
        lines += [f"  {b:>5} {n}" for b, n in self.histogram.items()]
        for f in self.failures:
            lines.append(f"failed #{f['index']}: {f['reason']}")
        return "\n".join(lines) + "\n"


def _bin(r: float, width: float = 0.1, top: float = 3.0) -> str:
    start = min(int(r / width), int(top / width)) * width
    return f"{start:.1f}"


def annotate_corpus(
    pairs: Iterable[Sequence[str]],
    unit: str = PHONEME,
    alpha: float = DEFAULT_ALPHA,
    src_lexicon: Optional[G2PLexicon] = None,
    tgt_lexicon: Optional[G2PLexicon] = None,
    ids: Optional[Sequence[Optional[str]]] = None,
) -> tuple[list[TaggedExample], AnnotationReport]:
    """Tag every (source, target) pair; failures are reported, not raised."""
    if unit not in UNITS:
        raise ValueError(f"unknown unit {unit!r}")
    examples: list[TaggedExample] = []
    failures: list[dict] = []
    counts = Counter({t.value: 0 for t in LengthTag})
    hist: Counter = Counter()
    total = 0
    for i, (source, target) in enumerate(pairs):
        total += 1
        ex_id = ids[i] if ids is not None else None
        try:
            s = count_units(source, unit, src_lexicon)
            t = count_units(target, unit, tgt_lexicon)
            r, tag = assign_tag(s, t, alpha)
        except ValueError as exc:
            failures.append({"index": i, "id": ex_id, "reason": str(exc)})
            continue
        examples.append(TaggedExample(source, target, s, t, r, tag, unit, alpha, ex_id))
        counts[tag.value] += 1
        hist[_bin(r)] += 1
    report = AnnotationReport(
        unit=unit,
        alpha=alpha,
        counts=dict(counts),
        histogram={k: hist[k] for k in sorted(hist, key=float)},
        failures=failures,
        total=total,
    )
    return examples, report
