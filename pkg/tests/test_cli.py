import argparse
import hashlib
import json
import warnings
from pathlib import Path

import numpy as np
import pytest
from conftest import exhaustive_cfg

from labsdub.cli import EXIT_CONFIG, EXIT_FAILED, EXIT_OK, EXIT_PARTIAL, atomic_write, build_parser, main
from labsdub.core import STATUS_OK, DecodeResult, SourceUtterance
from labsdub.decode import FinishedPools, enumerate_oracle, select_nbest
from labsdub.duration import DurationProfile, SelectionPolicy, select_hypothesis
from labsdub.lengthtag import G2PLexicon
from labsdub.scoring import load_model
from labsdub.synthetic import random_table_model


def jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


def write_jsonl(path, records):
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in records))


def strip_timing(records):
    return [{k: v for k, v in r.items() if k != "wall_time_s"} for r in records]


def errors(capsys):
    return [json.loads(line) for line in capsys.readouterr().err.splitlines() if line.startswith("{")]


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out-dir", str(d), "--n-train", "200", "--n-test", "30", "--seed", "4"]) == EXIT_OK
    return d


def pipeline(d, out, extra_decode=()):
    out.mkdir(exist_ok=True)
    lex = ["--src-lexicon", str(d / "src_lexicon.tsv"), "--tgt-lexicon", str(d / "tgt_lexicon.tsv")]
    steps = [
        ["annotate", "--pairs", str(d / "pairs.jsonl"), *lex, "--out", str(out / "ann.jsonl"), "--report", str(out / "ann.json")],
        ["train-ngram", "--corpus", str(out / "ann.jsonl"), "--order", "3", "--bucket-width", "4",
         "--out", str(out / "model.json"), "--vocab-out", str(out / "vocab.txt")],
        ["decode", "--model", str(out / "model.json"), "--inputs", str(d / "utterances.jsonl"),
         "--mode", "labs", "--beam", "9", "--per-tag", "3", "--out", str(out / "dec.jsonl"), *extra_decode],
        ["select", "--decoded", str(out / "dec.jsonl"), "--inputs", str(d / "utterances.jsonl"),
         "--model", str(out / "model.json"), "--profile", str(d / "profile.json"),
         "--tgt-lexicon", str(d / "tgt_lexicon.tsv"), "--out", str(out / "sel.jsonl")],
        ["evaluate", "--selections", str(out / "sel.jsonl"), "--out", str(out / "eval.json")],
    ]
    for argv in steps:
        assert main(argv) == EXIT_OK, argv


# --- documented examples ------------------------------------------------------------------------------


def test_annotate_three_branches(tmp_path):
    (tmp_path / "lex.tsv").write_text("ten\t" + " X" * 10 + "\neight\t" + " X" * 8 + "\nnine\t" + " X" * 9 + "\n")
    write_jsonl(tmp_path / "pairs.jsonl", [
        {"id": "s", "source": "ten", "target": "eight"},
        {"id": "n", "source": "ten", "target": "nine"},
        {"id": "l", "source": "eight", "target": "ten"},
    ])
    lex = str(tmp_path / "lex.tsv")
    code = main(["annotate", "--pairs", str(tmp_path / "pairs.jsonl"), "--src-lexicon", lex, "--tgt-lexicon", lex,
                 "--out", str(tmp_path / "a.jsonl"), "--report", str(tmp_path / "r.json")])
    assert code == EXIT_OK
    assert [r["tag"] for r in jsonl(tmp_path / "a.jsonl")] == ["short", "normal", "long"]
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["counts"] == {"short": 1, "normal": 1, "long": 1}
    assert "annotated=3/3" in (tmp_path / "r.txt").read_text()


def test_evaluate_identity_durations(tmp_path, capsys):
    write_jsonl(tmp_path / "sel.jsonl", [
        {"id": f"u{i}", "text": "a", "tag": "normal", "estimated_duration_s": d, "reference_duration_s": d, "ratio": 1.0}
        for i, d in enumerate((0.5, 1.25, 3.0))
    ])
    assert main(["evaluate", "--selections", str(tmp_path / "sel.jsonl"), "--out", str(tmp_path / "e.json")]) == EXIT_OK
    assert json.loads((tmp_path / "e.json").read_text())["src"] == 100.0
    assert "SRC@0.2    100.00" in capsys.readouterr().out


def test_pipeline_against_oracle_golden(tmp_path):
    """The CLI pipeline reproduces outputs built directly from the brute-force oracle."""
    rng = np.random.default_rng(21)
    model = random_table_model(rng, 3, order=2, dead_end=0.1)
    max_len = 4
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cfg = exhaustive_cfg(model.vocab, max_len)
    model.save(tmp_path / "m.json")
    words = [w for w in model.vocab.tokens[4:]]
    (tmp_path / "lex.tsv").write_text("".join(f"{w}\t{' '.join(['P'] * (i + 1))}\n" for i, w in enumerate(words)))
    DurationProfile({"P": 100.0}).save(tmp_path / "profile.json")
    utts = [SourceUtterance(f"u{i}", ("P",) * 3, d, "w0 w1") for i, d in enumerate((0.15, 0.3, 0.45, 0.6))]
    write_jsonl(tmp_path / "utts.jsonl", [u.to_record() for u in utts])

    assert main(["decode", "--model", str(tmp_path / "m.json"), "--inputs", str(tmp_path / "utts.jsonl"),
                 "--beam", str(cfg.beam_size), "--per-tag", "1", "--max-len", str(max_len),
                 "--out", str(tmp_path / "dec.jsonl")]) == EXIT_OK
    assert main(["select", "--decoded", str(tmp_path / "dec.jsonl"), "--inputs", str(tmp_path / "utts.jsonl"),
                 "--model", str(tmp_path / "m.json"), "--profile", str(tmp_path / "profile.json"),
                 "--tgt-lexicon", str(tmp_path / "lex.tsv"), "--out", str(tmp_path / "sel.jsonl")]) == EXIT_OK
    assert main(["evaluate", "--selections", str(tmp_path / "sel.jsonl"), "--out", str(tmp_path / "eval.json")]) == EXIT_OK

    # Golden path: exhaustive enumeration per tag, the same final n-best rule, the same selection.
    model = load_model(tmp_path / "m.json")
    pools = FinishedPools(model.vocab, cfg.tags)
    for tag in cfg.tags:
        pools.extend(list(enumerate_oracle(model, utts[0], tag, max_len).ranked))
    golden = select_nbest(pools, cfg, model.vocab)
    assert all(s == STATUS_OK for s in golden.status.values())
    lex = G2PLexicon.load(tmp_path / "lex.tsv")
    profile = DurationProfile.load(tmp_path / "profile.json")
    decoded = jsonl(tmp_path / "dec.jsonl")
    for rec, utt in zip(decoded, utts):
        got = DecodeResult.from_record(rec, model.vocab)
        assert got.nbest == golden.nbest
    want_sel = [select_hypothesis(golden, u, profile, SelectionPolicy(), lex).to_record() for u in utts]
    assert jsonl(tmp_path / "sel.jsonl") == json.loads(json.dumps(want_sel))
    report = json.loads((tmp_path / "eval.json").read_text())
    assert report["src"] == 100.0 * sum(r["compliant"] for r in want_sel) / len(want_sel)


def test_synthetic_pipeline_end_to_end(synth, tmp_path):
    pipeline(synth, tmp_path)
    decoded = jsonl(tmp_path / "dec.jsonl")
    assert [r["id"] for r in decoded] == [r["id"] for r in jsonl(synth / "utterances.jsonl")]
    assert all(r["mode"] == "labs" and set(r["tags"]) == {"short", "normal", "long"} for r in decoded)
    report = json.loads((tmp_path / "eval.json").read_text())
    assert report["n"] == 30 and 0 <= report["src"] <= 100
    assert (tmp_path / "eval.txt").read_text().startswith("utterances  30")


def test_standard_mode_exposes_baseline(synth, tmp_path):
    pipeline(synth, tmp_path)
    assert main(["decode", "--model", str(tmp_path / "model.json"), "--inputs", str(synth / "utterances.jsonl"),
                 "--mode", "standard", "--tag", "long", "--width", "3", "--out", str(tmp_path / "std.jsonl")]) == EXIT_OK
    for rec in jsonl(tmp_path / "std.jsonl"):
        assert rec["mode"] == "standard" and list(rec["tags"]) == ["long"]
        assert len(rec["tags"]["long"]["hypotheses"]) <= 3


# --- invariants -------------------------------------------------------------------------------------


def test_idempotent_and_inputs_untouched(synth, tmp_path):
    inputs = sorted(synth.iterdir())
    before = {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in inputs}
    pipeline(synth, tmp_path / "a")
    pipeline(synth, tmp_path / "b")
    after = {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in inputs}
    assert before == after
    for name in ("ann.jsonl", "ann.json", "ann.txt", "model.json", "vocab.txt", "sel.jsonl", "eval.json", "eval.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    assert strip_timing(jsonl(tmp_path / "a" / "dec.jsonl")) == strip_timing(jsonl(tmp_path / "b" / "dec.jsonl"))


def test_jobs_keep_input_order(synth, tmp_path):
    pipeline(synth, tmp_path / "one")
    pipeline(synth, tmp_path / "many", ["--jobs", "3"])
    assert strip_timing(jsonl(tmp_path / "one" / "dec.jsonl")) == strip_timing(jsonl(tmp_path / "many" / "dec.jsonl"))
    assert (tmp_path / "one" / "sel.jsonl").read_bytes() == (tmp_path / "many" / "sel.jsonl").read_bytes()


def test_bench_echoes_seed(synth, tmp_path, capsys):
    pipeline(synth, tmp_path)
    argv = ["bench", "--model", str(tmp_path / "model.json"), "--inputs", str(synth / "utterances.jsonl"),
            "--repeats", "3", "--sample", "5", "--seed", "9"]
    assert main([*argv, "--out", str(tmp_path / "b1.json")]) == EXIT_OK
    assert main([*argv, "--out", str(tmp_path / "b2.json")]) == EXIT_OK
    b1, b2 = (json.loads((tmp_path / f"b{i}.json").read_text()) for i in (1, 2))
    assert b1["seed"] == 9 and len(b1["utterance_ids"]) == 5
    assert b1["utterance_ids"] == b2["utterance_ids"]
    assert b1["utterances"] == 5 and b1["repeats"] == 3
    assert "labs / three_pass" in capsys.readouterr().out


def test_synth_echoes_seed(synth):
    assert json.loads((synth / "synth.json").read_text())["seed"] == 4


# --- errors and exit codes ------------------------------------------------------------------------


def test_unknown_subcommand(capsys):
    assert main(["transcribe"]) == EXIT_CONFIG
    (err,) = errors(capsys)
    assert err["error"] == "config" and "transcribe" in err["message"]


def test_missing_input_is_config_error(tmp_path, capsys):
    assert main(["decode", "--model", str(tmp_path / "none.json"), "--inputs", "x", "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert errors(capsys)[0]["error"] == "config"
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize(
    "flags",
    [["--beam", "0"], ["--per-tag", "-1"], ["--max-len", "0"], ["--jobs", "0"], ["--tags", "tiny"]],
)
def test_bad_numbers_rejected_before_work(flags, capsys):
    assert main(["decode", "--model", "m", "--inputs", "i", "--out", "o", *flags]) == EXIT_CONFIG
    assert errors(capsys)[0]["error"] == "config"


def test_bad_alpha_and_threshold(capsys):
    assert main(["annotate", "--pairs", "p", "--out", "o", "--report", "r", "--alpha", "1.5"]) == EXIT_CONFIG
    assert main(["evaluate", "--selections", "s", "--out", "o", "--src-threshold", "0"]) == EXIT_CONFIG


def test_bad_weights_are_config_errors(synth, tmp_path, capsys):
    pipeline(synth, tmp_path)
    code = main(["train-ngram", "--corpus", str(tmp_path / "ann.jsonl"), "--order", "2", "--weights", "0.5,0.2",
                 "--out", str(tmp_path / "m2.json")])
    assert code == EXIT_CONFIG
    assert "sum to 1" in errors(capsys)[0]["message"]


def test_partial_and_total_failure(synth, tmp_path, capsys):
    pipeline(synth, tmp_path)
    good = jsonl(synth / "utterances.jsonl")[:2]
    write_jsonl(tmp_path / "mixed.jsonl", [*good, {"id": "bad", "phonemes": [], "reference_duration": 1.0}])
    write_jsonl(tmp_path / "allbad.jsonl", [{"id": "bad", "reference_duration": 1.0}])
    model = str(tmp_path / "model.json")
    capsys.readouterr()
    assert main(["decode", "--model", model, "--inputs", str(tmp_path / "mixed.jsonl"), "--out", str(tmp_path / "d.jsonl")]) == EXIT_PARTIAL
    errs = errors(capsys)
    assert errs[0]["error"] == "record-failed" and errs[0]["id"] == "bad"
    assert errs[-1]["error"] == "partial-failure"
    assert len(jsonl(tmp_path / "d.jsonl")) == 2
    assert main(["decode", "--model", model, "--inputs", str(tmp_path / "allbad.jsonl"), "--out", str(tmp_path / "e.jsonl")]) == EXIT_FAILED
    assert errors(capsys)[-1]["error"] == "total-failure"


def test_annotate_partial_failure(tmp_path, capsys):
    write_jsonl(tmp_path / "pairs.jsonl", [{"source": "ab", "target": "abc"}, {"source": "ab"}, {"source": "!!", "target": "x"}])
    code = main(["annotate", "--pairs", str(tmp_path / "pairs.jsonl"), "--unit", "character",
                 "--out", str(tmp_path / "a.jsonl"), "--report", str(tmp_path / "r.json")])
    assert code == EXIT_PARTIAL
    reasons = [e["message"] for e in errors(capsys) if e["error"] == "record-failed"]
    assert len(reasons) == 2 and "source" in reasons[0]
    assert len(jsonl(tmp_path / "a.jsonl")) == 1


def test_select_reports_unmatched_ids(synth, tmp_path, capsys):
    pipeline(synth, tmp_path)
    utts = jsonl(synth / "utterances.jsonl")
    write_jsonl(tmp_path / "few.jsonl", utts[:3])
    code = main(["select", "--decoded", str(tmp_path / "dec.jsonl"), "--inputs", str(tmp_path / "few.jsonl"),
                 "--model", str(tmp_path / "vocab.txt"), "--profile", str(synth / "profile.json"),
                 "--tgt-lexicon", str(synth / "tgt_lexicon.tsv"), "--out", str(tmp_path / "s.jsonl")])
    assert code == EXIT_PARTIAL
    assert len(jsonl(tmp_path / "s.jsonl")) == 3


def test_invalid_jsonl_is_config_error(tmp_path, capsys):
    (tmp_path / "bad.jsonl").write_text("{not json\n")
    assert main(["evaluate", "--selections", str(tmp_path / "bad.jsonl"), "--out", str(tmp_path / "e.json")]) == EXIT_CONFIG
    assert "bad.jsonl:1" in errors(capsys)[0]["message"]


# --- plumbing -----------------------------------------------------------------------------------------


def test_help_documents_every_flag():
    parser = build_parser()
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    assert set(subparsers.choices) >= {"annotate", "train-ngram", "decode", "select", "evaluate", "bench"}
    for name, sub in subparsers.choices.items():
        for action in sub._actions:
            if action.option_strings:
                assert action.help, f"{name} {action.option_strings} lacks help"


def test_atomic_write_keeps_old_file_on_failure(tmp_path):
    target = tmp_path / "out.txt"
    atomic_write(target, "old\n")
    with pytest.raises(TypeError):
        atomic_write(target, 12345)  # not a string: the write fails midway
    assert target.read_text() == "old\n"
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]
