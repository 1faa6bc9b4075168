import json

import pytest

from tempdistill.cli import RunConfig, build_parser, main, manifest_path, resolve_config
from tempdistill.corpus import load_jsonl
from tempdistill.distillation import PseudoCorpus
from tempdistill.errors import InvalidArgument
from tempdistill.model import AttentionTemperatures, Transformer


def parse(*argv):
    return build_parser().parse_args(list(argv))


PSEUDO = ("pseudo", "--model", "m.bin", "--corpus", "c.jsonl", "--out", "p.jsonl")


class TestConfigResolution:

    def test_defaults(self):
        cfg = resolve_config(parse(*PSEUDO))
        assert cfg == RunConfig()

    def test_lambda_flags(self):
        cfg = resolve_config(parse(*PSEUDO, "--lambda", "2"))
        assert cfg.beam.temperatures == AttentionTemperatures.uniform(2.0)
        assert cfg.beam.lambda_range is None

        cfg = resolve_config(parse(*PSEUDO, "--lambda", "2", "--lambda-enc", "1"))
        assert cfg.beam.temperatures == AttentionTemperatures(1.0, 2.0, 2.0)

        cfg = resolve_config(parse(*PSEUDO, "--lambda-range", "1", "2", "--lambda-enc", "1"))
        assert cfg.beam.lambda_range == (1.0, 2.0)
        assert cfg.beam.pinned == {"enc": 1.0}

    def test_lambda_and_range_are_exclusive(self):
        with pytest.raises(SystemExit):
            parse(*PSEUDO, "--lambda", "2", "--lambda-range", "1", "2")

    def test_invalid_flag_values_are_rejected(self):
        with pytest.raises(InvalidArgument):
            resolve_config(parse(*PSEUDO, "--lambda-range", "2", "1"))
        with pytest.raises(InvalidArgument):
            resolve_config(parse(*PSEUDO, "--output-temp", "0"))

    def test_flags_override_the_config_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"beam": {"beam_size": 7, "max_length": 20}, "workers": 3}))
        cfg = resolve_config(parse(*PSEUDO, "--config", str(path), "--beam", "3"))
        assert cfg.beam.beam_size == 3
        assert cfg.beam.max_length == 20
        assert cfg.workers == 3
        assert resolve_config(parse(*PSEUDO, "--config", str(path), "--workers", "2")).workers == 2

    def test_seed_drives_every_section(self):
        cfg = resolve_config(parse(*PSEUDO, "--seed", "9"))
        assert cfg.beam.seed == cfg.train.seed == cfg.synth.seed == 9

    def test_config_file_errors(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"beams": {}}))
        with pytest.raises(InvalidArgument):
            RunConfig.load(path)
        path.write_text(json.dumps({"train": {"steps": 4}}))
        with pytest.raises(InvalidArgument):
            RunConfig.load(path)
        path.write_text("{")
        with pytest.raises(InvalidArgument):
            RunConfig.load(path)

    def test_dict_round_trip(self):
        cfg = resolve_config(parse(*PSEUDO, "--lambda-range", "1", "2", "--beam", "2", "--seed", "4"))
        assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestExitCodes:

    def test_missing_input_file(self, tmp_path, capsys):
        code = main(["analyze", "--system", str(tmp_path / "none.jsonl"), "--corpus", str(tmp_path / "c.jsonl"),
            "--report", str(tmp_path / "r.json")])
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_bad_config(self, tmp_path, capsys):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"model": {"d_model": 10, "n_heads": 4}}))
        assert main(["synth", "--config", str(path), "--out", str(tmp_path / "c")]) == 1
        assert "divisible" in capsys.readouterr().err

    def test_usage_errors_exit_through_argparse(self):
        with pytest.raises(SystemExit) as exc:
            main(["train"])
        assert exc.value.code == 2


SMALL_RUN = {
    "synth": {"num_documents": 30, "min_sentences": 3, "max_sentences": 4, "min_words": 3, "max_words": 5,
        "vocab_size": 40, "key_sentences": 1, "cue_words": 2, "valid_fraction": 0.1, "test_fraction": 0.2},
    "model": {"d_model": 8, "n_heads": 2, "encoder_layers": 2, "decoder_layers": 2, "ffn_dim": 16, "max_len": 64,
        "dropout": 0.0},
    "train": {"total_steps": 3, "warmup_steps": 0, "batch_tokens": 300, "valid_every": 2, "learning_rate": 0.01},
    "beam": {"beam_size": 2, "max_length": 5},
}


@pytest.fixture
def workspace(tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps(SMALL_RUN))
    return tmp_path, ["--config", str(config), "-q"]


class TestPipeline:

    def test_end_to_end(self, workspace):
        root, common = workspace
        data = root / "data"
        assert main(["synth", *common, "--out", str(data), "--seed", "5"]) == 0
        assert (data / "manifest.json").exists()
        assert len(load_jsonl(data / "test.jsonl")) == 6

        teacher = root / "teacher.bin"
        assert main(["train", *common, "--corpus", str(data / "train.jsonl"), "--valid", str(data / "valid.jsonl"),
            "--vocab", str(data / "vocab.json"), "--out", str(teacher)]) == 0
        assert Transformer.load(teacher).config.encoder_layers == 2
        assert manifest_path(teacher).exists()
        assert json.loads((root / "teacher.bin.losses.json").read_text())["best_step"] in (2, 3)

        pseudo = root / "pseudo.jsonl"
        assert main(["pseudo", *common, "--model", str(teacher), "--corpus", str(data / "train.jsonl"),
            "--lambda-range", "1", "2", "--dump-attention", str(root / "attn"), "--out", str(pseudo)]) == 0
        records = PseudoCorpus.load(pseudo).records
        assert all(1.0 <= r.lam <= 2.0 for r in records)
        assert records[0].teacher_digest == Transformer.load(teacher).digest()

        student_config = root / "student.json"
        student_config.write_text(json.dumps({"d_model": 8, "n_heads": 2, "encoder_layers": 1, "decoder_layers": 1,
            "ffn_dim": 16, "max_len": 64, "dropout": 0.0}))
        student = root / "student.bin"
        assert main(["distill", *common, "--teacher", str(teacher), "--student-config", str(student_config),
            "--init", "first_k", "--pseudo", str(pseudo), "--out", str(student)]) == 0
        assert Transformer.load(student).config.decoder_layers == 1

        report, outputs = root / "eval.json", root / "outputs.jsonl"
        assert main(["eval", *common, "--model", str(student), "--corpus", str(data / "test.jsonl"),
            "--rouge-mode", "limited_recall", "--outputs", str(outputs), "--report", str(report)]) == 0
        assert json.loads(report.read_text())["rouge_mode"] == "limited_recall"

        analysis = root / "analysis.json"
        assert main(["analyze", *common, "--system", str(outputs), "--corpus", str(data / "test.jsonl"),
            "--report", str(analysis)]) == 0
        assert json.loads(analysis.read_text())["documents"] == 6

        histogram = root / "hist.csv"
        assert main(["attn-stats", *common, "--attn", str(root / "attn"), "--csv", str(histogram)]) == 0
        assert histogram.read_text().startswith("label,bin")

    def test_replay_reproduces_outputs(self, workspace):
        root, common = workspace
        data = root / "data"
        assert main(["synth", *common, "--out", str(data), "--seed", "2"]) == 0
        teacher = root / "teacher.bin"
        assert main(["train", *common, "--corpus", str(data / "train.jsonl"), "--out", str(teacher)]) == 0

        first = teacher.read_bytes()
        assert main(["replay", "-q", "--manifest", str(manifest_path(teacher)), "--check"]) == 0
        assert teacher.read_bytes() == first

    def test_replay_refuses_changed_inputs(self, workspace, capsys):
        root, common = workspace
        data = root / "data"
        assert main(["synth", *common, "--out", str(data)]) == 0
        teacher = root / "teacher.bin"
        assert main(["train", *common, "--corpus", str(data / "train.jsonl"), "--out", str(teacher)]) == 0

        with open(data / "train.jsonl", "a") as f:
            f.write("\n")
        assert main(["replay", "-q", "--manifest", str(manifest_path(teacher))]) == 1
        assert "changed" in capsys.readouterr().err
