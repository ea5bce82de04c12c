import json
from pathlib import Path

import numpy as np
import pytest

from ltricd.cli import load_run_config, main
from ltricd.codes import CodeKind
from ltricd.corpus import ConfigError, load_corpus_jsonl
from ltricd.ordering import OrderingStrategy
from ltricd.ranking import read_predictions_jsonl
from ltricd.training import Checkpoint

TINY_CONFIG = {
    "seed": 11,
    "beam_width": 3,
    "model": {
        "d_e": 8,
        "d_c": 8,
        "d_ff": 16,
        "dec_d_ff": 16,
        "kernel_size": 3,
        "segment_len": 16,
        "max_input_len": 48,
        "max_output_len": 10,
    },
    "train": {
        "batch_size": 4,
        "epochs_phase1": 2,
        "epochs_phase2": 1,
        "seed": 11,
    },
    "synth": {
        "n_diagnosis_codes": 8,
        "n_procedure_codes": 5,
        "n_train": 16,
        "n_validation": 6,
        "n_test": 6,
        "diagnosis_mean": 2.0,
        "diagnosis_max": 3,
        "procedure_mean": 1.0,
        "procedure_max": 2,
        "mentions_base": 3,
        "max_filler_run": 1,
    },
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "config.json"
    config.write_text(json.dumps(TINY_CONFIG), encoding="utf-8")
    corpus = root / "corpus"
    assert main(["synth", "--config", str(config), "--out", str(corpus)]) == 0
    run = root / "run"
    assert main(
        ["train", "--config", str(config), "--corpus", str(corpus), "--out", str(run)]
    ) == 0
    preds = root / "preds"
    assert main(
        [
            "predict",
            "--config",
            str(config),
            "--corpus",
            str(corpus),
            "--checkpoint",
            str(run / "phase2.ckpt"),
            "--split",
            "test",
            "--out",
            str(preds),
        ]
    ) == 0
    return root, config, corpus, run, preds


class TestSynth:
    def test_rerun_is_byte_identical(self, workdir, tmp_path):
        root, config, corpus, *_ = workdir
        again = tmp_path / "again"
        assert main(["synth", "--config", str(config), "--out", str(again)]) == 0
        for name in ("train.jsonl", "validation.jsonl", "test.jsonl", "stats.json"):
            assert (again / name).read_bytes() == (corpus / name).read_bytes()

    def test_missing_out_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth"])
        assert exc.value.code == 2

    def test_default_sizes_report_calibrated_stats(self, tmp_path):
        out = tmp_path / "default"
        assert main(["synth", "--out", str(out), "--seed", "3"]) == 0
        stats = json.loads((out / "stats.json").read_text())
        assert abs(stats["codes_per_document"]["diagnosis"]["mean"] - 11.0) <= 1.0
        assert abs(stats["codes_per_document"]["procedure"]["mean"] - 4.0) <= 1.0

    def test_size_overrides(self, tmp_path):
        out = tmp_path / "small"
        assert (
            main(
                [
                    "synth",
                    "--out",
                    str(out),
                    "--train-docs",
                    "5",
                    "--validation-docs",
                    "2",
                    "--test-docs",
                    "2",
                    "--diagnosis-codes",
                    "6",
                    "--procedure-codes",
                    "4",
                ]
            )
            == 0
        )
        splits = load_corpus_jsonl(out)
        assert (len(splits.train), len(splits.validation), len(splits.test)) == (5, 2, 2)


class TestTrain:
    def test_phase1_only(self, workdir, tmp_path):
        root, config, corpus, *_ = workdir
        out = tmp_path / "p1"
        assert (
            main(
                [
                    "train",
                    "--config",
                    str(config),
                    "--corpus",
                    str(corpus),
                    "--out",
                    str(out),
                    "--phase",
                    "1",
                ]
            )
            == 0
        )
        assert (out / "phase1.ckpt").exists()
        assert not (out / "phase2.ckpt").exists()
        rows = [json.loads(line) for line in (out / "training_log.jsonl").read_text().splitlines()]
        assert all(row["phase"] == "phase1" for row in rows)

    def test_full_run_preserves_encoder_across_phases(self, workdir):
        root, config, corpus, run, preds = workdir
        from ltricd.training import params_digest

        ckpt1 = Checkpoint.load(run / "phase1.ckpt")
        ckpt2 = Checkpoint.load(run / "phase2.ckpt")
        frozen = ("emb.", "enc.", "dec.")
        assert params_digest(ckpt1.params, frozen) == params_digest(ckpt2.params, frozen)

    def test_invalid_alpha_is_data_error(self, workdir, tmp_path):
        root, config, corpus, *_ = workdir
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"train": {"alpha": -1.0}}), encoding="utf-8")
        code = main(
            ["train", "--config", str(bad), "--corpus", str(corpus), "--out", str(tmp_path / "x")]
        )
        assert code == 3

    def test_phase2_requires_checkpoint(self, workdir, tmp_path):
        root, config, corpus, *_ = workdir
        code = main(
            [
                "train",
                "--config",
                str(config),
                "--corpus",
                str(corpus),
                "--out",
                str(tmp_path / "y"),
                "--phase",
                "2",
            ]
        )
        assert code == 3


class TestPredict:
    def test_beam_above_limit_is_usage_error(self, workdir, tmp_path):
        root, config, corpus, run, preds = workdir
        with pytest.raises(SystemExit) as exc:
            main(
                [
                    "predict",
                    "--corpus",
                    str(corpus),
                    "--checkpoint",
                    str(run / "phase2.ckpt"),
                    "--out",
                    str(tmp_path / "p"),
                    "--beam",
                    "6",
                ]
            )
        assert exc.value.code == 2

    def test_rerun_is_byte_identical(self, workdir, tmp_path):
        root, config, corpus, run, preds = workdir
        again = tmp_path / "again"
        assert (
            main(
                [
                    "predict",
                    "--config",
                    str(config),
                    "--corpus",
                    str(corpus),
                    "--checkpoint",
                    str(run / "phase2.ckpt"),
                    "--split",
                    "test",
                    "--out",
                    str(again),
                ]
            )
            == 0
        )
        for name in ("generative.jsonl", "classifier.jsonl"):
            assert (again / name).read_bytes() == (preds / name).read_bytes()

    def test_no_duplicate_codes_per_document(self, workdir):
        *_, preds = workdir
        for name in ("generative.jsonl", "classifier.jsonl"):
            for pred in read_predictions_jsonl(preds / name):
                assert len(set(pred.codes)) == len(pred.codes)


class TestMerge:
    def test_merged_set_equals_classifier_set(self, workdir, tmp_path):
        root, config, corpus, run, preds = workdir
        merged_path = tmp_path / "merged.jsonl"
        assert (
            main(
                [
                    "merge",
                    str(preds / "generative.jsonl"),
                    str(preds / "classifier.jsonl"),
                    "--out",
                    str(merged_path),
                ]
            )
            == 0
        )
        merged = {p.doc_id: p for p in read_predictions_jsonl(merged_path)}
        classifier = {p.doc_id: p for p in read_predictions_jsonl(preds / "classifier.jsonl")}
        assert set(merged) == set(classifier)
        for doc_id, pred in merged.items():
            assert set(pred.codes) == set(classifier[doc_id].codes)

    def test_empty_classifier_gives_empty_merged(self, tmp_path):
        gen = tmp_path / "gen.jsonl"
        clf = tmp_path / "clf.jsonl"
        gen.write_text('{"id": "1", "codes": ["401.9"]}\n', encoding="utf-8")
        clf.write_text('{"id": "1", "codes": []}\n', encoding="utf-8")
        out = tmp_path / "merged.jsonl"
        assert main(["merge", str(gen), str(clf), "--out", str(out)]) == 0
        (pred,) = read_predictions_jsonl(out)
        assert pred.codes == []

    def test_mismatched_ids_is_data_error(self, tmp_path):
        gen = tmp_path / "gen.jsonl"
        clf = tmp_path / "clf.jsonl"
        gen.write_text('{"id": "1", "codes": []}\n', encoding="utf-8")
        clf.write_text('{"id": "2", "codes": []}\n', encoding="utf-8")
        assert main(["merge", str(gen), str(clf), "--out", str(tmp_path / "m.jsonl")]) == 3


class TestEvaluate:
    def _gold_predictions(self, corpus, split="test"):
        splits = load_corpus_jsonl(corpus)
        lines = []
        for doc in getattr(splits, split):
            diag = [c.display for c in doc.codes_of_kind(CodeKind.DIAGNOSIS)]
            proc = [c.display for c in doc.codes_of_kind(CodeKind.PROCEDURE)]
            out = []
            for i in range(max(len(diag), len(proc))):
                if i < len(diag):
                    out.append(diag[i])
                if i < len(proc):
                    out.append(proc[i])
            lines.append(json.dumps({"id": doc.id, "codes": out}))
        return "\n".join(lines) + "\n"

    def test_gold_against_itself_is_all_ones(self, workdir, tmp_path):
        root, config, corpus, *_ = workdir
        pred_path = tmp_path / "gold_pred.jsonl"
        pred_path.write_text(self._gold_predictions(corpus), encoding="utf-8")
        prefix = tmp_path / "report"
        assert (
            main(
                [
                    "evaluate",
                    "--pred",
                    str(pred_path),
                    "--corpus",
                    str(corpus),
                    "--split",
                    "test",
                    "--k-list",
                    "1,2,3",
                    "--out-prefix",
                    str(prefix),
                ]
            )
            == 0
        )
        for tag in ("diagnosis", "procedure", "combined"):
            rows = json.loads(Path(f"{prefix}_{tag}.json").read_text())
            for row in rows:
                for metric in ("f1", "precision", "recall", "map", "ndcg", "cg"):
                    assert row[metric] == pytest.approx(1.0), (tag, row["k"], metric)

    def test_table_shaped_csv(self, workdir, tmp_path):
        root, config, corpus, run, preds = workdir
        prefix = tmp_path / "rep"
        assert (
            main(
                [
                    "evaluate",
                    "--pred",
                    str(preds / "classifier.jsonl"),
                    "--corpus",
                    str(corpus),
                    "--kinds",
                    "diag",
                    "--k-list",
                    "1,2,3,4,5,6,7,8,9,10,11,39",
                    "--out-prefix",
                    str(prefix),
                ]
            )
            == 0
        )
        lines = Path(f"{prefix}_diagnosis.csv").read_text().strip().splitlines()
        assert lines[0] == "K,F1,Prec,Rec,MAP,NDCG,CG"
        assert [line.split(",")[0] for line in lines[1:]] == [
            str(k) for k in list(range(1, 12)) + [39]
        ]
        assert Path(f"{prefix}_diagnosis_cg.csv").exists()

    def test_missing_kind_warns_and_scores_zero(self, workdir, tmp_path, capsys):
        root, config, corpus, *_ = workdir
        splits = load_corpus_jsonl(corpus)
        pred_path = tmp_path / "diag_only.jsonl"
        lines = [
            json.dumps({"id": doc.id, "codes": [c.display for c in doc.codes_of_kind(CodeKind.DIAGNOSIS)]})
            for doc in splits.test
        ]
        pred_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        prefix = tmp_path / "proc_rep"
        assert (
            main(
                [
                    "evaluate",
                    "--pred",
                    str(pred_path),
                    "--corpus",
                    str(corpus),
                    "--kinds",
                    "proc",
                    "--k-list",
                    "1,2",
                    "--out-prefix",
                    str(prefix),
                ]
            )
            == 0
        )
        assert "metrics will be zero" in capsys.readouterr().err
        rows = json.loads(Path(f"{prefix}_procedure.json").read_text())
        for row in rows:
            assert row["f1"] == 0.0 and row["ndcg"] == 0.0


class TestRunConfig:
    def test_unknown_keys_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"modle": {}}), encoding="utf-8")
        with pytest.raises(ConfigError):
            load_run_config(bad)

    def test_ordering_parsed_from_string(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"train": {"ordering": "diag_then_proc"}}), encoding="utf-8")
        cfg = load_run_config(path)
        assert cfg.train.ordering is OrderingStrategy.DIAG_THEN_PROC

    def test_beam_width_limit(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"beam_width": 9}), encoding="utf-8")
        with pytest.raises(ConfigError):
            load_run_config(path)

    def test_threads_env_fallback(self, monkeypatch, tmp_path):
        monkeypatch.setenv("LTRICD_THREADS", "4")
        from ltricd.cli import build_parser

        args = build_parser().parse_args(["synth", "--out", str(tmp_path / "o")])
        assert args.threads == 4

    def test_invalid_threads_rejected(self, workdir, tmp_path):
        root, config, corpus, *_ = workdir
        code = main(["synth", "--out", str(tmp_path / "t"), "--threads", "0"])
        assert code == 3


class TestExitCodes:
    def test_divergence_maps_to_exit_4(self, monkeypatch, tmp_path):
        import ltricd.cli as cli_module
        from ltricd.training import DivergenceError

        def boom(args):
            raise DivergenceError("loss became non-finite")

        monkeypatch.setattr(cli_module, "cmd_synth", boom)
        parser = cli_module.build_parser()
        args = parser.parse_args(["synth", "--out", str(tmp_path / "x")])
        args.func = boom
        monkeypatch.setattr(cli_module, "build_parser", lambda: _StubParser(args))
        assert cli_module.main(["synth", "--out", str(tmp_path / "x")]) == 4

    def test_missing_corpus_maps_to_exit_3(self, tmp_path):
        code = main(
            [
                "train",
                "--corpus",
                str(tmp_path / "nope"),
                "--out",
                str(tmp_path / "out"),
            ]
        )
        assert code == 3


class _StubParser:
    def __init__(self, args):
        self._args = args

    def parse_args(self, argv=None):
        return self._args

    def error(self, message):
        raise SystemExit(2)


class TestTrainingLogSchema:
    def test_rows_carry_split_field(self, workdir):
        root, config, corpus, run, preds = workdir
        rows = [json.loads(line) for line in (run / "training_log.jsonl").read_text().splitlines()]
        assert {row["split"] for row in rows} == {"train", "validation"}
        train_rows = [r for r in rows if r["split"] == "train"]
        assert all("loss" in r and "micro_f1" in r for r in train_rows)
        val_rows = [r for r in rows if r["split"] == "validation"]
        assert all("micro_f1" in r for r in val_rows)


class TestDeidWiring:
    def test_surrogates_in_corpus_text_become_tags(self, workdir, tmp_path):
        # A corpus whose texts carry de-identification surrogates trains and
        # predicts without the surrogate contents entering the vocabulary.
        root, config, corpus, *_ = workdir
        from ltricd.corpus import load_corpus_jsonl, save_corpus_jsonl

        splits = load_corpus_jsonl(corpus)
        for doc in splits.train + splits.validation + splits.test:
            doc.text = "[**2151-8-14**] " + doc.text
        noisy = tmp_path / "noisy"
        save_corpus_jsonl(splits, noisy)
        out = tmp_path / "run"
        assert (
            main(["train", "--config", str(config), "--corpus", str(noisy), "--out", str(out), "--phase", "1"])
            == 0
        )
        ckpt = Checkpoint.load(out / "phase1.ckpt")
        assert "[DAY]" in ckpt.meta["token_vocab"]
        assert "2151" not in ckpt.meta["token_vocab"]
