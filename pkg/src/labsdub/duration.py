"""Text-only duration estimation and duration-matched n-best selection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

from labsdub.core import DecodeResult, Hypothesis, LengthTag, SourceUtterance
from labsdub.lengthtag import G2PLexicon, g2p

PROFILE_FORMAT = "labsdub-profile"


class DurationError(ValueError):
    pass


@dataclass(frozen=True)
class DurationProfile:
    """Per-phoneme durations in milliseconds plus a fixed per-utterance allowance."""

    durations_ms: Mapping[str, float]
    allowance_ms: float = 0.0
    profile_id: str = "default"

    def __post_init__(self) -> None:
        bad = [p for p, ms in self.durations_ms.items() if not ms > 0]
        if bad:
            raise DurationError(f"durations must be > 0 ms: {bad}")
        if self.allowance_ms < 0:
            raise DurationError("allowance must be >= 0 ms")
        object.__setattr__(self, "durations_ms", dict(self.durations_ms))

    def scaled(self, factor: float) -> "DurationProfile":
        return DurationProfile(
            {p: ms * factor for p, ms in self.durations_ms.items()},
            self.allowance_ms * factor,
            self.profile_id,
        )

    def to_dict(self) -> dict:
        return {
            "format": PROFILE_FORMAT,
            "profile_id": self.profile_id,
            "allowance_ms": self.allowance_ms,
            "durations_ms": dict(sorted(self.durations_ms.items())),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "DurationProfile":
        return cls(doc["durations_ms"], float(doc.get("allowance_ms", 0.0)), doc.get("profile_id", "default"))

    def save(self, path: "str | Path") -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: "str | Path") -> "DurationProfile":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def phoneme_duration(profile: DurationProfile, phonemes: Sequence[str]) -> float:
    """Seconds for a phoneme sequence: sum of table entries plus the allowance."""
    total = profile.allowance_ms
    for p in phonemes:
        try:
            total += profile.durations_ms[p]
        except KeyError:
            raise DurationError(f"phoneme {p!r} missing from profile {profile.profile_id!r}") from None
    return total / 1000.0


def estimate_duration(profile: DurationProfile, text: str, lexicon: G2PLexicon) -> float:
    return phoneme_duration(profile, g2p(lexicon, text))


@dataclass(frozen=True)
class SelectionPolicy:
    """``epsilon``: compliance threshold on |ratio - 1|.

    ``margin``: when positive, a non-normal candidate is eligible only if
    its score is within ``margin`` of the best score. ``fallback`` applies
    when no candidate is eligible: ``closest`` or ``best-score``.
    """

    epsilon: float = 0.2
    margin: float = 0.0
    fallback: str = "closest"

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.fallback not in ("closest", "best-score"):
            raise ValueError(f"unknown fallback {self.fallback!r}")


@dataclass(frozen=True)
class CandidateReport:
    hypothesis: Hypothesis
    text: str
    duration: float
    ratio: float
    eligible: bool
    compliant: bool

    def to_record(self) -> dict:
        return {
            "tag": self.hypothesis.tag.value,
            "text": self.text,
            "score": self.hypothesis.score,
            "estimated_duration_s": self.duration,
            "ratio": self.ratio,
            "eligible": self.eligible,
            "compliant": self.compliant,
        }


@dataclass(frozen=True)
class Selection:
    utterance_id: str
    chosen: CandidateReport
    reference_duration: float
    candidates: tuple[CandidateReport, ...]
    fallback: bool = False
    reference: Optional[str] = None

    @property
    def compliant(self) -> bool:
        return self.chosen.compliant

    def to_record(self) -> dict:
        rec = {
            "id": self.utterance_id,
            "text": self.chosen.text,
            "tag": self.chosen.hypothesis.tag.value,
            "score": self.chosen.hypothesis.score,
            "estimated_duration_s": self.chosen.duration,
            "reference_duration_s": self.reference_duration,
            "ratio": self.chosen.ratio,
            "compliant": self.chosen.compliant,
            "fallback": self.fallback,
            "candidates": [c.to_record() for c in self.candidates],
        }
        if self.reference is not None:
            rec["reference"] = self.reference
        return rec


def _closeness(c: CandidateReport):
    return (abs(c.ratio - 1.0), -c.hypothesis.score, c.hypothesis.tokens)


def select_hypothesis(
    result: DecodeResult,
    src: SourceUtterance,
    profile: DurationProfile,
    policy: SelectionPolicy = SelectionPolicy(),
    lexicon: Optional[G2PLexicon] = None,
    strategy: str = "duration",
) -> Selection:
    """Pick the n-best entry whose estimated duration is closest to the source.

    ``strategy="top-score"`` ignores durations and takes the decoder's
    best hypothesis, which is the single-output baseline.
    """
    if not result.nbest:
        raise DurationError(f"utterance {src.id!r}: decode result has no completed hypotheses")
    if not src.reference_duration > 0:
        raise DurationError(f"utterance {src.id!r}: reference duration must be > 0")
    if lexicon is None:
        raise DurationError("a target lexicon is required to estimate durations")
    best_score = max(h.score for h in result.nbest)
    reports = []
    for h in result.nbest:
        text = result.text(h)
        dur = estimate_duration(profile, text, lexicon) if text else profile.allowance_ms / 1000.0
        ratio = dur / src.reference_duration
        eligible = not (policy.margin > 0 and h.tag != LengthTag.NORMAL and h.score < best_score - policy.margin)
        reports.append(CandidateReport(h, text, dur, ratio, eligible, abs(ratio - 1.0) <= policy.epsilon))

    fallback = False
    if strategy == "top-score":
        chosen = min(reports, key=lambda c: c.hypothesis.sort_key())
    elif strategy == "duration":
        pool = [c for c in reports if c.eligible]
        if not pool:
            fallback = True
            pool = reports
            if policy.fallback == "best-score":
                pool = [min(reports, key=lambda c: c.hypothesis.sort_key())]
        chosen = min(pool, key=_closeness)
    else:
        raise ValueError(f"unknown selection strategy {strategy!r}")
    return Selection(src.id, chosen, src.reference_duration, tuple(reports), fallback, src.reference)
