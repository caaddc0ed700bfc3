"""Command-line pipeline: annotate, train-ngram, decode, select, evaluate, bench.

Exit codes: 0 success, 2 configuration error, 3 partial failure (some
records failed, the rest were written), 4 total failure. Failures are
reported on stderr as one JSON object per line.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from labsdub import __version__
from labsdub.core import ALL_TAGS, DecodeResult, LengthTag, SourceUtterance
from labsdub.decode import BeamConfig, labs_decode, standard_beam_decode
from labsdub.duration import DurationProfile, SelectionPolicy, select_hypothesis
from labsdub.lengthtag import DEFAULT_ALPHA, UNITS, G2PLexicon, TaggedExample, annotate_corpus, g2p
from labsdub.metrics import DEFAULT_EPSILON, evaluate_selections, latency_bench
from labsdub.scoring import ScoringModel, load_model, load_vocabulary, train_ngram

log = logging.getLogger("labsdub")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3
EXIT_FAILED = 4


class ConfigError(Exception):
    pass


# --- io helpers --------------------------------------------------------------


def _emit_error(kind: str, message: str, **extra) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")


def atomic_write(path: "str | Path", text: str) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def dumps_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in records)


def dumps_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def read_jsonl(path: "str | Path") -> list[dict]:
    records = []
    for lineno, line in enumerate(_existing(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return records


def _existing(path: "str | Path") -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"input file not found: {p}")
    return p


def _lexicon(words: Optional[str], rules: Optional[str]) -> Optional[G2PLexicon]:
    if words is None and rules is None:
        return None
    return G2PLexicon.load(words and _existing(words), rules and _existing(rules))


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _fraction(text: str) -> float:
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"must be in (0, 1), got {text}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def _outcome(done: int, failures: Sequence[dict], what: str) -> int:
    for f in failures:
        _emit_error("record-failed", f["reason"], **{k: v for k, v in f.items() if k != "reason"})
    if failures and not done:
        _emit_error("total-failure", f"no {what} succeeded", failed=len(failures))
        return EXIT_FAILED
    if failures:
        _emit_error("partial-failure", f"{len(failures)} {what} failed", failed=len(failures), succeeded=done)
        return EXIT_PARTIAL
    return EXIT_OK


# --- utterances --------------------------------------------------------------


def load_utterances(path: str, src_lexicon: Optional[G2PLexicon]) -> tuple[list[SourceUtterance], list[dict]]:
    """Utterances from JSONL; records with source text but no phonemes go through g2p."""
    utts, failures = [], []
    for i, rec in enumerate(read_jsonl(path)):
        try:
            rec = dict(rec)
            if "phonemes" not in rec:
                if src_lexicon is None or "source" not in rec:
                    raise ValueError("record has no phonemes and no source text with --src-lexicon")
                rec["phonemes"] = g2p(src_lexicon, rec["source"])
            utts.append(SourceUtterance.from_record(rec))
        except (KeyError, ValueError, TypeError) as exc:
            failures.append({"index": i, "id": rec.get("id"), "reason": f"bad utterance: {exc}"})
    ids = [u.id for u in utts]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"{path}: utterance ids are not unique")
    return utts, failures


# --- decode workers ------------------------------------------------------------

_worker: dict = {}


def _init_worker(model_path: str, mode: str, cfg: BeamConfig, tag: str, width: int) -> None:
    _worker.update(model=load_model(model_path), mode=mode, cfg=cfg, tag=tag, width=width)


def _decode_one(model: ScoringModel, utt: SourceUtterance, mode: str, cfg: BeamConfig, tag: str, width: int) -> dict:
    if mode == "labs":
        result = labs_decode(model, utt, cfg)
    else:
        result = standard_beam_decode(model, utt, tag, width, cfg.max_len, cfg.early_stop)
    return result.to_record(utt.id, mode)


def _decode_in_worker(utt: SourceUtterance) -> dict:
    w = _worker
    return _decode_one(w["model"], utt, w["mode"], w["cfg"], w["tag"], w["width"])


# --- subcommands ---------------------------------------------------------------


def cmd_annotate(args) -> int:
    records = read_jsonl(args.pairs)
    src_lex = _lexicon(args.src_lexicon, args.src_rules)
    tgt_lex = _lexicon(args.tgt_lexicon, args.tgt_rules)
    if args.unit == "phoneme" and (src_lex is None or tgt_lex is None):
        raise ConfigError("phoneme units need --src-lexicon/--src-rules and --tgt-lexicon/--tgt-rules")
    pairs, ids, bad = [], [], []
    for i, rec in enumerate(records):
        if not isinstance(rec.get("source"), str) or not isinstance(rec.get("target"), str):
            bad.append({"index": i, "id": rec.get("id"), "reason": "record needs string 'source' and 'target'"})
            pairs.append(("", ""))
        else:
            pairs.append((rec["source"], rec["target"]))
        ids.append(rec.get("id", f"pair{i:06d}"))
    examples, report = annotate_corpus(pairs, args.unit, args.alpha, src_lex, tgt_lex, ids)
    # Malformed records surface as annotation failures; keep the clearer reason.
    reasons = {b["index"]: b["reason"] for b in bad}
    for f in report.failures:
        f["reason"] = reasons.get(f["index"], f["reason"])
    atomic_write(args.out, dumps_jsonl(ex.to_record() for ex in examples))
    atomic_write(args.report, dumps_json(report.to_dict()))
    atomic_write(Path(args.report).with_suffix(".txt"), report.to_text())
    return _outcome(len(examples), report.failures, "pairs")


def cmd_train(args) -> int:
    corpus = []
    failures = []
    for i, rec in enumerate(read_jsonl(args.corpus)):
        try:
            corpus.append(TaggedExample.from_record(rec))
        except (KeyError, ValueError) as exc:
            failures.append({"index": i, "id": rec.get("id"), "reason": f"bad example: {exc}"})
    if not corpus:
        _outcome(0, failures, "examples")
        return EXIT_FAILED
    try:
        model = train_ngram(corpus, args.order, args.weights, args.floor, args.bucket_width, args.max_bucket)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    atomic_write(args.out, json.dumps(model.to_dict(), indent=1, sort_keys=True) + "\n")
    if args.vocab_out:
        atomic_write(args.vocab_out, model.vocab.dumps())
    return _outcome(len(corpus), failures, "examples")


def _beam_config(args) -> BeamConfig:
    try:
        return BeamConfig(
            beam_size=args.beam,
            per_tag=args.per_tag,
            max_len=args.max_len,
            tags=tuple(args.tags),
            early_stop=not args.no_early_stop,
            length_penalty=args.length_penalty,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_decode(args) -> int:
    model_path = str(_existing(args.model))
    cfg = _beam_config(args)
    width = args.width or args.beam
    utts, failures = load_utterances(args.inputs, _lexicon(args.src_lexicon, args.src_rules))
    if args.jobs > 1 and len(utts) > 1:
        with ProcessPoolExecutor(args.jobs, initializer=_init_worker, initargs=(model_path, args.mode, cfg, args.tag, width)) as pool:
            records = list(pool.map(_decode_in_worker, utts, chunksize=max(1, len(utts) // (4 * args.jobs))))
    else:
        model = load_model(model_path)
        records = [_decode_one(model, u, args.mode, cfg, args.tag, width) for u in utts]
    atomic_write(args.out, dumps_jsonl(records))
    exhausted = sum(1 for r in records for t in r["tags"].values() if t["status"] != "ok")
    if exhausted:
        log.warning("%d tag lists ended length-exhausted", exhausted)
    return _outcome(len(records), failures, "utterances")


def cmd_select(args) -> int:
    vocab = load_vocabulary(_existing(args.model))
    profile = DurationProfile.load(_existing(args.profile))
    lexicon = _lexicon(args.tgt_lexicon, args.tgt_rules)
    if lexicon is None:
        raise ConfigError("select needs --tgt-lexicon or --tgt-rules")
    try:
        policy = SelectionPolicy(args.src_threshold, args.margin, args.fallback)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    utts, failures = load_utterances(args.inputs, _lexicon(args.src_lexicon, args.src_rules))
    by_id = {u.id: u for u in utts}
    out = []
    for i, rec in enumerate(read_jsonl(args.decoded)):
        utt_id = rec.get("id")
        try:
            if utt_id not in by_id:
                raise ValueError("no matching utterance in --inputs")
            result = DecodeResult.from_record(rec, vocab)
            sel = select_hypothesis(result, by_id[utt_id], profile, policy, lexicon, args.strategy)
            out.append(sel.to_record())
        except (KeyError, ValueError) as exc:
            failures.append({"index": i, "id": utt_id, "reason": str(exc)})
    atomic_write(args.out, dumps_jsonl(out))
    return _outcome(len(out), failures, "selections")


def cmd_evaluate(args) -> int:
    records = read_jsonl(args.selections)
    if not records:
        raise ConfigError(f"{args.selections}: no selection records")
    try:
        report = evaluate_selections(records, args.src_threshold, args.unit)
    except (KeyError, ValueError, ZeroDivisionError) as exc:
        _emit_error("evaluate-failed", str(exc))
        return EXIT_FAILED
    atomic_write(args.out, dumps_json(report.to_dict()))
    atomic_write(Path(args.out).with_suffix(".txt"), report.to_text())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_bench(args) -> int:
    model = load_model(_existing(args.model))
    cfg = _beam_config(args)
    utts, failures = load_utterances(args.inputs, _lexicon(args.src_lexicon, args.src_rules))
    if not utts:
        raise ConfigError("no usable utterances to bench")
    if args.sample and args.sample < len(utts):
        pick = np.sort(np.random.default_rng(args.seed).choice(len(utts), args.sample, replace=False))
        utts = [utts[i] for i in pick]
    try:
        report = latency_bench(model, utts, cfg, args.repeats)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    doc = report.to_dict()
    doc["seed"] = args.seed
    doc["utterance_ids"] = [u.id for u in utts]
    atomic_write(args.out, dumps_json(doc))
    sys.stdout.write(report.to_text())
    return _outcome(len(utts), failures, "utterances")


def cmd_synth(args) -> int:
    from labsdub.synthetic import make_toy_corpus

    corpus = make_toy_corpus(n_train=args.n_train, n_test=args.n_test, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "pairs.jsonl", dumps_jsonl(corpus.pairs))
    atomic_write(out / "utterances.jsonl", dumps_jsonl(u.to_record() for u in corpus.utterances))
    atomic_write(out / "profile.json", dumps_json(corpus.profile.to_dict()))
    for side, lex in (("src", corpus.src_lexicon), ("tgt", corpus.tgt_lexicon)):
        atomic_write(out / f"{side}_lexicon.tsv", "".join(f"{w}\t{' '.join(p)}\n" for w, p in sorted(lex.entries.items())))
    atomic_write(out / "synth.json", dumps_json({"seed": args.seed, "n_train": args.n_train, "n_test": args.n_test}))
    return EXIT_OK


# --- parser ----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors become config errors so they get a JSON record and exit 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _add_beam_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--beam", type=_positive_int, default=9, help="beam size N (default 9)")
    p.add_argument("--per-tag", type=_nonneg_int, default=3, help="slots reserved per tag g (default 3)")
    p.add_argument("--max-len", type=_positive_int, default=50, help="max tokens after the tag, EOS included")
    p.add_argument(
        "--tags", nargs="+", default=[t.value for t in ALL_TAGS], choices=[t.value for t in ALL_TAGS],
        help="tags explored by LABS (default: all three)",
    )
    p.add_argument("--no-early-stop", action="store_true", help="always run to --max-len")
    p.add_argument("--length-penalty", type=float, default=0.0, help="GNMT-style exponent for final ranking (off)")


def _add_lexicon_flags(p: argparse.ArgumentParser, side: str) -> None:
    p.add_argument(f"--{side}-lexicon", help=f"{side} lexicon TSV (word<TAB>phonemes)")
    p.add_argument(f"--{side}-rules", help=f"{side} fallback grapheme rules TSV")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="labsdub", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"labsdub {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("annotate", help="tag parallel pairs by length ratio")
    p.add_argument("--pairs", required=True, help="JSONL records with source and target text plus an id")
    p.add_argument("--unit", choices=UNITS, default="phoneme", help="length unit for ratios (default phoneme)")
    p.add_argument("--alpha", type=_fraction, default=DEFAULT_ALPHA, help="ratio threshold (default 0.1)")
    _add_lexicon_flags(p, "src")
    _add_lexicon_flags(p, "tgt")
    p.add_argument("--out", required=True, help="annotated JSONL")
    p.add_argument("--report", required=True, help="JSON report; a .txt twin is written next to it")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("train-ngram", help="train a tag-conditioned n-gram model")
    p.add_argument("--corpus", required=True, help="annotated JSONL from 'annotate'")
    p.add_argument("--order", type=int, default=3, help="n-gram order (default 3)")
    p.add_argument("--weights", type=_float_list, help="interpolation weights, highest order first")
    p.add_argument("--floor", type=float, default=1e-6, help="uniform mass mixed into every distribution")
    p.add_argument("--bucket-width", type=int, default=0, help="source phonemes per length bucket (0 = off)")
    p.add_argument("--max-bucket", type=int, default=16, help="largest length bucket id")
    p.add_argument("--out", required=True, help="model JSON")
    p.add_argument("--vocab-out", help="also write the vocabulary file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decode utterances with LABS or standard beam search")
    p.add_argument("--model", required=True, help="model JSON from train-ngram")
    p.add_argument("--inputs", required=True, help="utterance JSONL; each record has an id and reference_duration plus phonemes or source text")
    p.add_argument("--mode", choices=("labs", "standard"), default="labs", help="labs: one tagged pass; standard: baseline for --tag")
    p.add_argument("--tag", choices=[t.value for t in LengthTag], default="normal", help="tag for --mode standard")
    p.add_argument("--width", type=_positive_int, help="standard beam width (default: --beam)")
    _add_beam_flags(p)
    _add_lexicon_flags(p, "src")
    p.add_argument("--jobs", type=_positive_int, default=1, help="worker processes; output order is kept")
    p.add_argument("--out", required=True, help="decode JSONL")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("select", help="pick the n-best entry closest to the source duration")
    p.add_argument("--decoded", required=True, help="decode JSONL")
    p.add_argument("--inputs", required=True, help="utterance JSONL used for decoding")
    p.add_argument("--model", required=True, help="model JSON or vocabulary file")
    p.add_argument("--profile", required=True, help="duration profile JSON")
    _add_lexicon_flags(p, "tgt")
    _add_lexicon_flags(p, "src")
    p.add_argument("--strategy", choices=("duration", "top-score"), default="duration", help="duration: closest estimated duration; top-score: best decoder score")
    p.add_argument("--src-threshold", type=_fraction, default=DEFAULT_EPSILON, help="compliance threshold epsilon")
    p.add_argument("--margin", type=float, default=0.0, help="score margin for non-normal candidates (0 = off)")
    p.add_argument("--fallback", choices=("closest", "best-score"), default="closest", help="used when no candidate passes --margin")
    p.add_argument("--out", required=True, help="selection JSONL")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("evaluate", help="score selections for duration compliance and quality")
    p.add_argument("--selections", required=True, help="selection JSONL from select")
    p.add_argument("--src-threshold", type=_fraction, default=DEFAULT_EPSILON, help="compliance threshold epsilon")
    p.add_argument("--unit", choices=UNITS, default="phoneme", help="echoed in the report")
    p.add_argument("--out", required=True, help="JSON report; a .txt twin is written next to it")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="time LABS against three standard passes")
    p.add_argument("--model", required=True, help="model JSON from train-ngram")
    p.add_argument("--inputs", required=True, help="utterance JSONL")
    _add_beam_flags(p)
    _add_lexicon_flags(p, "src")
    p.add_argument("--repeats", type=int, default=7, help="timed rounds after one warm-up (>= 3)")
    p.add_argument("--sample", type=_nonneg_int, default=0, help="bench a seeded random subset (0 = all)")
    p.add_argument("--seed", type=int, default=0, help="seed for --sample; echoed in the output")
    p.add_argument("--out", required=True, help="bench JSON")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write the seeded toy corpus used by the tests")
    p.add_argument("--out-dir", required=True, help="directory for corpus files")
    p.add_argument("--n-train", type=_positive_int, default=600, help="training sources (three tagged pairs each)")
    p.add_argument("--n-test", type=_positive_int, default=200, help="test utterances")
    p.add_argument("--seed", type=int, default=0, help="corpus seed; echoed in synth.json")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        _emit_error("config", str(exc))
        return EXIT_CONFIG
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    func: Callable = args.func
    try:
        return func(args)
    except ConfigError as exc:
        _emit_error("config", str(exc))
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - last-resort machine-readable report
        _emit_error("internal", f"{type(exc).__name__}: {exc}")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
