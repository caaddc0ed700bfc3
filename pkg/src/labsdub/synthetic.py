"""Seeded toy corpora and random table models for experiments and tests.

The toy target language is positional: the word at position i is one of
``t{i}a``, ``t{i}b``, ``t{i}c``, so an n-gram history pins down the
position and a tag-conditioned model can learn where sentences end.
Source and target share one phoneme inventory and one duration profile.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from labsdub.core import ALL_TAGS, EOS, LengthTag, SourceUtterance, Vocabulary
from labsdub.duration import DurationProfile, phoneme_duration
from labsdub.lengthtag import G2PLexicon, g2p
from labsdub.scoring import TableModel

TAG_RATIOS = {LengthTag.SHORT: 0.8, LengthTag.NORMAL: 1.0, LengthTag.LONG: 1.2}
VARIANTS = "abc"
VARIANT_WEIGHTS = (0.7, 0.2, 0.1)


@dataclass
class ToyCorpus:
    src_lexicon: G2PLexicon
    tgt_lexicon: G2PLexicon
    profile: DurationProfile
    pairs: list[dict]
    utterances: list[SourceUtterance]
    seed: int


def _phonemes(rng: np.random.Generator, inventory: Sequence[str], lo: int, hi: int) -> tuple[str, ...]:
    return tuple(inventory[i] for i in rng.integers(0, len(inventory), rng.integers(lo, hi + 1)))


def _target(rng, lexicon: G2PLexicon, goal: float, max_pos: int) -> str:
    words, total = [], 0
    for pos in range(1, max_pos + 1):
        w = f"t{pos}{VARIANTS[rng.choice(3, p=VARIANT_WEIGHTS)]}"
        n = len(lexicon.entries[w])
        # Stop where the running phoneme count is closest to the goal.
        if words and abs(total + n - goal) >= abs(total - goal):
            break
        words.append(w)
        total += n
    return " ".join(words)


def make_toy_corpus(
    n_train: int = 600,
    n_test: int = 200,
    seed: int = 0,
    n_phonemes: int = 20,
    n_source_words: int = 40,
    max_pos: int = 16,
    rate_range: tuple[float, float] = (0.7, 1.35),
    ratio_jitter: float = 0.04,
) -> ToyCorpus:
    rng = np.random.default_rng(seed)
    inventory = [f"P{i:02d}" for i in range(n_phonemes)]
    durations = {p: float(ms) for p, ms in zip(inventory, rng.integers(50, 141, n_phonemes))}
    profile = DurationProfile(durations, 0.0, f"toy-{seed}")

    src_lex = G2PLexicon({f"s{i}": _phonemes(rng, inventory, 2, 5) for i in range(n_source_words)})
    tgt_lex = G2PLexicon(
        {f"t{p}{v}": _phonemes(rng, inventory, 2, 4) for p in range(1, max_pos + 1) for v in VARIANTS}
    )

    def source_text() -> str:
        return " ".join(f"s{i}" for i in rng.integers(0, n_source_words, rng.integers(3, 9)))

    pairs = []
    for k in range(n_train):
        src = source_text()
        m = len(g2p(src_lex, src))
        for tag in ALL_TAGS:
            goal = m * (TAG_RATIOS[tag] + rng.uniform(-ratio_jitter, ratio_jitter))
            pairs.append({"id": f"train{k:05d}-{tag.value}", "source": src, "target": _target(rng, tgt_lex, goal, max_pos)})

    utterances = []
    for k in range(n_test):
        src = source_text()
        phones = g2p(src_lex, src)
        rate = rng.uniform(*rate_range)
        ref_dur = round(phoneme_duration(profile, phones) * rate, 6)
        reference = _target(rng, tgt_lex, len(phones) * TAG_RATIOS[LengthTag.NORMAL], max_pos)
        utterances.append(SourceUtterance(f"test{k:05d}", tuple(phones), ref_dur, reference))
    return ToyCorpus(src_lex, tgt_lex, profile, pairs, utterances, seed)


def random_table_model(
    rng: np.random.Generator,
    n_words: int,
    order: int = 2,
    dead_end: float = 0.0,
    eos_boost: Optional[dict] = None,
) -> TableModel:
    """Random Dirichlet distributions for every tag-and-history context.

    ``dead_end`` is the chance a context gets zero EOS probability.
    ``eos_boost`` multiplies EOS mass per tag before normalization.
    """
    vocab = Vocabulary.build(f"w{i}" for i in range(n_words))
    words = [vocab.id(f"w{i}") for i in range(n_words)]
    emit = [vocab.eos_id, *words]
    eos_boost = eos_boost or {}
    table = {}
    for tag in ALL_TAGS:
        tid = vocab.id(tag.token)
        for k in range(order + 1):
            for hist in itertools.product(words, repeat=k):
                p = np.zeros(len(vocab))
                p[emit] = rng.dirichlet(np.ones(len(emit)))
                p[vocab.eos_id] *= eos_boost.get(tag, 1.0)
                if rng.random() < dead_end:
                    p[vocab.eos_id] = 0.0
                table[(tid, *hist)] = p
    default = np.zeros(len(vocab))
    default[emit] = 1.0
    return TableModel(vocab, table, default, order)


def point_mass_model(n_words: int = 2) -> TableModel:
    """Every context puts all mass on EOS."""
    vocab = Vocabulary.build(f"w{i}" for i in range(n_words))
    default = np.zeros(len(vocab))
    default[vocab.id(EOS)] = 1.0
    return TableModel(vocab, {}, default, 0)
