"""End-to-end tests for the command-line interface.

Commands run in-process through ``cli.main`` so exit codes, stdout, and
stderr can be asserted directly.  A tiny corpus and model keep every
command fast; determinism checks compare artifact bytes across reruns.
"""
import json

import numpy as np
import pytest

from pointergen import data as D
from pointergen.cli import ABLATION_COLUMNS, VARIANTS, load_responses, main, save_responses
from pointergen.model import load_checkpoint

MODEL_FLAGS = [
    "--d", "8", "--heads", "2", "--rounds", "1", "--d-ff", "16",
    "--dropout", "0.1", "--epochs", "2", "--batch-size", "4",
    "--warmup-steps", "10", "--seed", "3",
]
DECODE_FLAGS = ["--beam-size", "2", "--max-len", "8"]


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def synth(dest, seed=5, n=12):
    code = main(["synth-data", "--out", str(dest), "--n", str(n),
                 "--seed", str(seed), "--vocab-size", "30",
                 "--f-min", "2", "--f-max", "3",
                 "--d-vis", "6", "--d-aud", "4"])
    assert code == 0
    return dest / "dialogs.jsonl"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Corpus, trained checkpoint, and generated responses shared by tests."""
    ws = tmp_path_factory.mktemp("cli")
    dialogs = synth(ws / "data")
    assert main(["train", "--data", str(dialogs), "--out", str(ws / "model"),
                 *MODEL_FLAGS]) == 0
    assert main(["generate", "--data", str(dialogs),
                 "--checkpoints", str(ws / "model" / "checkpoint.bin"),
                 "--vocab", str(ws / "model" / "vocab.txt"),
                 "--out", str(ws / "resp.jsonl"), *DECODE_FLAGS]) == 0
    return ws


def assert_single_error_line(err):
    text = err.strip()
    assert text.startswith("error: ")
    assert "\n" not in text


class TestParsing:
    def test_no_command(self, capsys):
        code, _, err = run(capsys)
        assert code == 1
        assert_single_error_line(err)

    def test_unknown_command(self, capsys):
        code, _, err = run(capsys, "frobnicate")
        assert code == 1
        assert_single_error_line(err)

    def test_unknown_flag(self, capsys, tmp_path):
        code, _, err = run(capsys, "synth-data", "--out", str(tmp_path),
                           "--n", "3", "--bogus", "7")
        assert code == 1
        assert_single_error_line(err)

    def test_non_integer_flag_value(self, capsys, tmp_path):
        code, _, err = run(capsys, "synth-data", "--out", str(tmp_path),
                           "--n", "three")
        assert code == 1
        assert_single_error_line(err)

    def test_missing_required_setting(self, capsys):
        code, _, err = run(capsys, "synth-data", "--n", "3")
        assert code == 1
        assert_single_error_line(err)
        assert "out" in err

    def test_out_of_range_epochs(self, capsys, tmp_path, workspace):
        code, _, err = run(capsys, "train",
                           "--data", str(workspace / "data" / "dialogs.jsonl"),
                           "--out", str(tmp_path), "--epochs", "99")
        assert code == 1
        assert_single_error_line(err)


class TestConfigFile:
    def test_config_supplies_settings(self, capsys, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"out": str(tmp_path / "c"), "n": 4,
                                   "vocab_size": 30, "d_vis": 6, "d_aud": 4,
                                   "f_min": 2, "f_max": 3}))
        code, out, _ = run(capsys, "synth-data", "--config", str(cfg))
        assert code == 0
        assert len(D.load_dialogs(tmp_path / "c" / "dialogs.jsonl")) == 4

    def test_flag_overrides_config(self, capsys, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"out": str(tmp_path / "c"), "n": 4,
                                   "vocab_size": 30, "d_vis": 6, "d_aud": 4,
                                   "f_min": 2, "f_max": 3}))
        code, _, _ = run(capsys, "synth-data", "--config", str(cfg), "--n", "7")
        assert code == 0
        assert len(D.load_dialogs(tmp_path / "c" / "dialogs.jsonl")) == 7

    def test_unknown_config_key_rejected(self, capsys, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"out": str(tmp_path / "c"), "n": 4, "zap": 1}))
        code, _, err = run(capsys, "synth-data", "--config", str(cfg))
        assert code == 1
        assert_single_error_line(err)
        assert "zap" in err

    def test_config_must_be_json_object(self, capsys, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text("[1, 2]")
        code, _, err = run(capsys, "synth-data", "--config", str(cfg))
        assert code == 1
        assert_single_error_line(err)

    def test_config_value_of_wrong_type(self, capsys, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"out": str(tmp_path / "c"), "n": "four"}))
        code, _, err = run(capsys, "synth-data", "--config", str(cfg))
        assert code == 1
        assert_single_error_line(err)

    def test_missing_config_file(self, capsys, tmp_path):
        code, _, err = run(capsys, "synth-data",
                           "--config", str(tmp_path / "absent.json"))
        assert code == 1
        assert_single_error_line(err)


class TestSynthData:
    def test_writes_corpus_and_feature_files(self, capsys, tmp_path):
        dialogs = synth(tmp_path / "c", n=6)
        capsys.readouterr()
        corpus = D.load_dialogs(dialogs)
        assert len(corpus) == 6
        for ex in corpus:
            assert ex.visual.shape[1] == 6 and ex.audio.shape[1] == 4
            assert ex.visual.shape[0] == ex.audio.shape[0]
        files = list((tmp_path / "c" / "features").iterdir())
        assert len(files) == 12

    def test_same_seed_bytes_identical(self, capsys, tmp_path):
        a = synth(tmp_path / "a", seed=9)
        b = synth(tmp_path / "b", seed=9)
        capsys.readouterr()
        assert a.read_bytes() == b.read_bytes()

    def test_different_seed_differs(self, capsys, tmp_path):
        a = synth(tmp_path / "a", seed=9)
        b = synth(tmp_path / "b", seed=10)
        capsys.readouterr()
        assert a.read_bytes() != b.read_bytes()


class TestTrain:
    def test_artifacts(self, workspace):
        params = load_checkpoint(workspace / "model" / "checkpoint.bin")
        assert params.config.d == 8 and params.config.rounds == 1
        vocab = D.Vocab.load(workspace / "model" / "vocab.txt")
        assert params.config.vocab_size == len(vocab)

    def test_log_parses(self, workspace):
        lines = (workspace / "model" / "train_log.tsv").read_text().splitlines()
        assert lines[0] == "epoch\ttrain_loss\tval_loss\tlr"
        assert len(lines) == 3  # header + one row per epoch
        for line in lines[1:]:
            epoch, train, val, lr = line.split("\t")
            int(epoch)
            assert np.isfinite([float(train), float(val), float(lr)]).all()

    def test_missing_data_file(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--data", str(tmp_path / "no.jsonl"),
                           "--out", str(tmp_path), *MODEL_FLAGS)
        assert code == 1
        assert_single_error_line(err)


class TestGenerate:
    def test_response_rows(self, workspace):
        rows = load_responses(workspace / "resp.jsonl")
        corpus = D.load_dialogs(workspace / "data" / "dialogs.jsonl")
        vocab = D.Vocab.load(workspace / "model" / "vocab.txt")
        assert [(r["dialog_id"], r["turn"]) for r in rows] == \
               [(ex.dialog_id, ex.turn) for ex in corpus]
        for row in rows:
            for tok in D.tokenize(row["response"]):
                assert tok in vocab.index

    def test_ensemble_of_identical_checkpoints_matches_single(self, capsys,
                                                              workspace,
                                                              tmp_path):
        ckpt = str(workspace / "model" / "checkpoint.bin")
        out = tmp_path / "ens.jsonl"
        code, _, _ = run(capsys, "generate",
                         "--data", str(workspace / "data" / "dialogs.jsonl"),
                         "--checkpoints", f"{ckpt},{ckpt}",
                         "--vocab", str(workspace / "model" / "vocab.txt"),
                         "--out", str(out), *DECODE_FLAGS)
        assert code == 0
        assert out.read_bytes() == (workspace / "resp.jsonl").read_bytes()

    def test_vocab_size_mismatch_rejected(self, capsys, workspace, tmp_path):
        small = D.Vocab(list(D.RESERVED_TOKENS) + ["a", "b"])
        small.save(tmp_path / "v.txt")
        code, _, err = run(capsys, "generate",
                           "--data", str(workspace / "data" / "dialogs.jsonl"),
                           "--checkpoints", str(workspace / "model" / "checkpoint.bin"),
                           "--vocab", str(tmp_path / "v.txt"),
                           "--out", str(tmp_path / "r.jsonl"), *DECODE_FLAGS)
        assert code == 1
        assert_single_error_line(err)

    def test_empty_checkpoint_list_rejected(self, capsys, workspace, tmp_path):
        code, _, err = run(capsys, "generate",
                           "--data", str(workspace / "data" / "dialogs.jsonl"),
                           "--checkpoints", " , ",
                           "--vocab", str(workspace / "model" / "vocab.txt"),
                           "--out", str(tmp_path / "r.jsonl"))
        assert code == 1
        assert_single_error_line(err)


class TestEvaluate:
    @staticmethod
    def perfect_responses(workspace, path):
        corpus = D.load_dialogs(workspace / "data" / "dialogs.jsonl")
        save_responses(path, [{"dialog_id": ex.dialog_id, "turn": ex.turn,
                               "response": ex.answer} for ex in corpus])

    def test_perfect_responses_score_one(self, capsys, workspace, tmp_path):
        resp = tmp_path / "perfect.jsonl"
        self.perfect_responses(workspace, resp)
        code, out, _ = run(capsys, "evaluate", "--responses", str(resp),
                           "--references", str(workspace / "data" / "dialogs.jsonl"))
        assert code == 0
        lines = out.strip().splitlines()
        assert lines[0].split() == ["pairs", "12"]
        values = dict(line.split() for line in lines[1:])
        assert values["bleu1"] == "1.0000"
        assert values["rouge_l"] == "1.0000"

    def test_json_output(self, capsys, workspace, tmp_path):
        resp = tmp_path / "perfect.jsonl"
        self.perfect_responses(workspace, resp)
        code, out, _ = run(capsys, "evaluate", "--responses", str(resp),
                           "--references", str(workspace / "data" / "dialogs.jsonl"),
                           "--json")
        assert code == 0
        scores = json.loads(out.strip().splitlines()[1])
        assert set(scores) == {"bleu1", "bleu2", "bleu3", "bleu4",
                               "rouge_l", "cider"}
        assert scores["bleu1"] == pytest.approx(1.0)

    def test_report_file_written(self, capsys, workspace, tmp_path):
        resp = tmp_path / "perfect.jsonl"
        self.perfect_responses(workspace, resp)
        report = tmp_path / "report.txt"
        code, out, _ = run(capsys, "evaluate", "--responses", str(resp),
                           "--references", str(workspace / "data" / "dialogs.jsonl"),
                           "--out", str(report))
        assert code == 0
        body = report.read_text()
        assert body.endswith("\n")
        assert body.strip() == "\n".join(out.strip().splitlines()[1:])

    def test_generated_responses_evaluate_cleanly(self, capsys, workspace):
        code, out, _ = run(capsys, "evaluate",
                           "--responses", str(workspace / "resp.jsonl"),
                           "--references", str(workspace / "data" / "dialogs.jsonl"),
                           "--json")
        assert code == 0
        scores = json.loads(out.strip().splitlines()[1])
        assert all(v >= 0.0 for v in scores.values())

    def test_missing_reference_rejected(self, capsys, workspace, tmp_path):
        resp = tmp_path / "r.jsonl"
        save_responses(resp, [{"dialog_id": "zzz", "turn": 1, "response": "w000"}])
        code, _, err = run(capsys, "evaluate", "--responses", str(resp),
                           "--references", str(workspace / "data" / "dialogs.jsonl"))
        assert code == 1
        assert_single_error_line(err)

    def test_duplicate_reference_rejected(self, capsys, workspace, tmp_path):
        corpus = D.load_dialogs(workspace / "data" / "dialogs.jsonl",
                                load_feature_files=False)
        dup = tmp_path / "refs.jsonl"
        D.save_dialogs(dup, list(corpus) + [corpus[0]])
        resp = tmp_path / "r.jsonl"
        save_responses(resp, [{"dialog_id": corpus[0].dialog_id,
                               "turn": corpus[0].turn, "response": "w000"}])
        code, _, err = run(capsys, "evaluate", "--responses", str(resp),
                           "--references", str(dup))
        assert code == 1
        assert_single_error_line(err)

    def test_malformed_responses_file_rejected(self, capsys, workspace, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"dialog_id": "d00000", "turn": 1}\n')
        code, _, err = run(capsys, "evaluate", "--responses", str(bad),
                           "--references", str(workspace / "data" / "dialogs.jsonl"))
        assert code == 1
        assert_single_error_line(err)


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    ws = tmp_path_factory.mktemp("ablate")
    dialogs = synth(ws / "data", seed=7, n=10)
    out = ws / "run"
    assert main(["ablate", "--data", str(dialogs), "--out", str(out),
                 *MODEL_FLAGS, *DECODE_FLAGS]) == 0
    return ws, out


class TestAblate:

    def test_table_shape_and_order(self, ablation):
        _, out = ablation
        lines = (out / "ablation.tsv").read_text().splitlines()
        assert len(lines) == 1 + len(VARIANTS)
        assert lines[0].split("\t") == list(ABLATION_COLUMNS)
        for line, (name, _) in zip(lines[1:], VARIANTS):
            cells = line.split("\t")
            assert len(cells) == len(ABLATION_COLUMNS)
            assert cells[0] == name
            assert cells[5] == "-"  # METEOR needs resources this package omits
            for cell in cells[1:5] + cells[6:]:
                assert 0.0 <= float(cell)

    def test_variant_directories(self, ablation):
        _, out = ablation
        for name, _ in VARIANTS:
            slug = name.lower().replace("+", "_")
            for artifact in ("checkpoint.bin", "vocab.txt", "responses.jsonl"):
                assert (out / slug / artifact).exists()

    def test_none_variant_has_no_pointer_parameters(self, ablation):
        _, out = ablation
        params = load_checkpoint(out / "none" / "checkpoint.bin")
        assert params.config.pointer_sources == ()

    def test_rerun_bytes_identical(self, ablation, capsys):
        ws, out = ablation
        again = ws / "again"
        code, _, _ = run(capsys, "ablate",
                         "--data", str(ws / "data" / "dialogs.jsonl"),
                         "--out", str(again), *MODEL_FLAGS, *DECODE_FLAGS)
        assert code == 0
        assert (again / "ablation.tsv").read_bytes() == \
               (out / "ablation.tsv").read_bytes()
