"""Speech-rate compliance, length ratio, corpus BLEU and the decode latency bench."""

from __future__ import annotations

import math
import re
import statistics
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from labsdub.core import ALL_TAGS, SourceUtterance
from labsdub.scoring import CountingModel, ScoringModel

DEFAULT_EPSILON = 0.2
MAX_ORDER = 4

# Words and single punctuation marks; everything else is whitespace.
_TOKEN = re.compile(r"\w+|[^\w\s]")


def is_compliant(reference: float, hypothesis: float, epsilon: float = DEFAULT_EPSILON) -> bool:
    return abs(hypothesis / reference - 1.0) <= epsilon


def src_metric(rows: Sequence[tuple[float, float]], epsilon: float = DEFAULT_EPSILON) -> float:
    """Percentage of (reference, hypothesis) duration pairs within ``epsilon``."""
    if not rows:
        raise ValueError("no rows to score")
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must be in (0, 1)")
    for ref, hyp in rows:
        if not (ref > 0 and hyp >= 0):
            raise ValueError(f"need reference > 0 and hypothesis >= 0, got ({ref}, {hyp})")
    hits = sum(is_compliant(ref, hyp, epsilon) for ref, hyp in rows)
    return 100.0 * hits / len(rows)


def length_ratio(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> float:
    if not hyps or len(hyps) != len(refs):
        raise ValueError("need equal, non-empty hypothesis and reference lists")
    ref_total = sum(len(r) for r in refs)
    if ref_total == 0:
        raise ValueError("references contain no tokens")
    return sum(len(h) for h in hyps) / ref_total


def tokenize(text: str) -> list[str]:
    """Split punctuation off words, then split on whitespace. Case is kept."""
    return _TOKEN.findall(text)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def sentence_stats(hyp: Sequence[str], ref: Sequence[str]) -> dict:
    """Clipped matches and totals per order, plus both lengths."""
    matches, totals = [], []
    for n in range(1, MAX_ORDER + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        matches.append(sum(min(c, r[g]) for g, c in h.items()))
        totals.append(max(len(hyp) - n + 1, 0))
    return {"hyp_len": len(hyp), "ref_len": len(ref), "matches": matches, "totals": totals}


def bleu_from_stats(stats: Sequence[dict]) -> float:
    hyp_len = sum(s["hyp_len"] for s in stats)
    ref_len = sum(s["ref_len"] for s in stats)
    log_p = 0.0
    for n in range(MAX_ORDER):
        m = sum(s["matches"][n] for s in stats)
        t = sum(s["totals"][n] for s in stats)
        if n == 0:
            if m == 0:
                return 0.0
            log_p += math.log(m / t)
        else:
            log_p += math.log((m + 1) / (t + 1))
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / MAX_ORDER)


def corpus_bleu(hyps: Sequence[str], refs: Sequence[str]) -> float:
    """BLEU-4 with brevity penalty; orders 2-4 use add-one smoothing."""
    if not hyps or len(hyps) != len(refs):
        raise ValueError("need equal, non-empty hypothesis and reference lists")
    return bleu_from_stats([sentence_stats(tokenize(h), tokenize(r)) for h, r in zip(hyps, refs)])


@dataclass
class EvalRow:
    id: str
    reference_duration: float
    estimated_duration: float
    ratio: float
    compliant: bool
    tag: Optional[str] = None
    bleu_stats: Optional[dict] = None


@dataclass
class EvalReport:
    src: float
    length_ratio: Optional[float]
    bleu: Optional[float]
    rows: list[EvalRow]
    epsilon: float
    unit: str = "phoneme"
    tag_counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "src": self.src,
            "length_ratio": self.length_ratio,
            "bleu": self.bleu,
            "n": len(self.rows),
            "config": {"epsilon": self.epsilon, "unit": self.unit},
            "chosen_tag_counts": self.tag_counts,
            "rows": [asdict(r) for r in self.rows],
        }

    def to_text(self) -> str:
        lr = "n/a" if self.length_ratio is None else f"{self.length_ratio:.3f}"
        bleu = "n/a" if self.bleu is None else f"{self.bleu:.2f}"
        lines = [
            f"utterances  {len(self.rows)}",
            f"SRC@{self.epsilon:g}    {self.src:.2f}",
            f"LR          {lr}",
            f"BLEU        {bleu}",
        ]
        if self.tag_counts:
            lines.append("chosen tags " + " ".join(f"{k}={v}" for k, v in self.tag_counts.items()))
        return "\n".join(lines) + "\n"

    def recompute(self) -> "EvalReport":
        """Aggregate fields rebuilt from the per-utterance rows alone."""
        return build_report(self.rows, self.epsilon, self.unit)


def build_report(rows: Sequence[EvalRow], epsilon: float = DEFAULT_EPSILON, unit: str = "phoneme") -> EvalReport:
    src = src_metric([(r.reference_duration, r.estimated_duration) for r in rows], epsilon)
    stats = [r.bleu_stats for r in rows]
    if all(s is not None for s in stats):
        bleu = bleu_from_stats(stats)  # type: ignore[arg-type]
        lr = sum(s["hyp_len"] for s in stats) / sum(s["ref_len"] for s in stats)  # type: ignore[index]
    else:
        bleu = lr = None
    tags = Counter(r.tag for r in rows if r.tag)
    return EvalReport(src, lr, bleu, list(rows), epsilon, unit, dict(sorted(tags.items())))


def evaluate_selections(records: Sequence[dict], epsilon: float = DEFAULT_EPSILON, unit: str = "phoneme") -> EvalReport:
    """Report over selection records (as written by the ``select`` step)."""
    rows = []
    for rec in records:
        ref_d, est = float(rec["reference_duration_s"]), float(rec["estimated_duration_s"])
        stats = None
        if rec.get("reference") is not None:
            stats = sentence_stats(tokenize(rec["text"]), tokenize(rec["reference"]))
        rows.append(EvalRow(rec["id"], ref_d, est, est / ref_d, is_compliant(ref_d, est, epsilon), rec.get("tag"), stats))
    return build_report(rows, epsilon, unit)


# --- latency bench ---------------------------------------------------------


@dataclass
class BenchConfigReport:
    name: str
    samples_s: list[float]
    model_calls: int
    rows_scored: int

    @property
    def median_s(self) -> float:
        return statistics.median(self.samples_s)

    @property
    def mean_s(self) -> float:
        return statistics.fmean(self.samples_s)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "median_s_per_utt": self.median_s,
            "mean_s_per_utt": self.mean_s,
            "samples_s_per_utt": self.samples_s,
            "model_calls": self.model_calls,
            "rows_scored": self.rows_scored,
        }


@dataclass
class BenchReport:
    utterances: int
    repeats: int
    beam_size: int
    per_tag: int
    width: int
    configs: dict[str, BenchConfigReport]

    def ratio(self, num: str, den: str, what: str = "median_s") -> float:
        return getattr(self.configs[num], what) / getattr(self.configs[den], what)

    def to_dict(self) -> dict:
        return {
            "utterances": self.utterances,
            "repeats": self.repeats,
            "beam_size": self.beam_size,
            "per_tag": self.per_tag,
            "standard_width": self.width,
            "configs": {k: v.to_dict() for k, v in self.configs.items()},
            "labs_vs_three_pass": {
                "median_time": self.ratio("labs", "three_pass"),
                "model_calls": self.ratio("labs", "three_pass", "model_calls"),
                "rows_scored": self.ratio("labs", "three_pass", "rows_scored"),
            },
            "labs_vs_one_pass": {
                "median_time": self.ratio("labs", "one_pass"),
                "model_calls": self.ratio("labs", "one_pass", "model_calls"),
                "rows_scored": self.ratio("labs", "one_pass", "rows_scored"),
            },
        }

    def to_text(self) -> str:
        lines = [f"{'config':<12}{'median ms':>11}{'mean ms':>10}{'calls':>9}{'rows':>10}"]
        for c in self.configs.values():
            lines.append(
                f"{c.name:<12}{c.median_s * 1e3:>11.3f}{c.mean_s * 1e3:>10.3f}{c.model_calls:>9}{c.rows_scored:>10}"
            )
        d = self.to_dict()["labs_vs_three_pass"]
        lines.append(
            f"labs / three_pass: time {d['median_time']:.3f}  calls {d['model_calls']:.3f}  rows {d['rows_scored']:.3f}"
        )
        return "\n".join(lines) + "\n"


def latency_bench(
    model: ScoringModel,
    inputs: Sequence[SourceUtterance],
    cfg,
    repeats: int = 7,
    width: Optional[int] = None,
) -> BenchReport:
    """Time one LABS pass against three tag-wise standard passes and one standard pass.

    One warm-up round is run and discarded. Each of the ``repeats`` samples
    is the mean wall-time per utterance over ``inputs``. Configurations are
    interleaved per utterance, in rotating order, so drift in machine load
    lands on all of them alike. Query counts come from a single counted
    round and do not depend on timing.
    """
    from labsdub.decode import labs_decode, standard_beam_decode

    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    if not inputs:
        raise ValueError("no inputs to bench")
    width = width or math.ceil(cfg.beam_size / 3)
    counter = CountingModel(model)

    def labs(m, src):
        labs_decode(m, src, cfg)

    def three(m, src):
        for tag in ALL_TAGS:
            standard_beam_decode(m, src, tag, width, cfg.max_len, cfg.early_stop)

    def one(m, src):
        standard_beam_decode(m, src, "normal", width, cfg.max_len, cfg.early_stop)

    runs = {"labs": labs, "three_pass": three, "one_pass": one}
    names = list(runs)
    counts = {}
    for name, run in runs.items():
        counter.reset()
        for src in inputs:
            run(counter, src)
        counts[name] = (counter.calls, counter.rows)
    samples: dict[str, list[float]] = {name: [] for name in runs}
    clock = time.perf_counter
    for r in range(repeats + 1):
        total = dict.fromkeys(names, 0.0)
        for i, src in enumerate(inputs):
            for k in range(len(names)):
                name = names[(i + k) % len(names)]
                t0 = clock()
                runs[name](model, src)
                total[name] += clock() - t0
        if r:  # round 0 is warm-up
            for name in names:
                samples[name].append(total[name] / len(inputs))
    configs = {name: BenchConfigReport(name, samples[name], *counts[name]) for name in runs}
    return BenchReport(len(inputs), repeats, cfg.beam_size, cfg.per_tag, width, configs)
