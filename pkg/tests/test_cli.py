import json

import pytest

from capfuse.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main

SMALL = {
    "data.n_videos": 8, "data.n_val": 4, "data.min_count": 1, "model.dim": 12, "model.hidden": 12,
    "model.att_dim": 8, "model.semantic_k": 4, "model.semantic_hidden": 8, "train.xe_epochs": 2,
    "train.max_stage_epochs": 1, "train.max_len": 6, "decode.max_len": 6, "decode.beam": 2,
}


def write_config(root, **extra):
    vals = dict(SMALL, **extra)
    for key, rel in [("paths.features", "data/f.mmfc"), ("paths.captions", "data/c.jsonl"),
                     ("paths.vocab", "data/vocab.txt"), ("paths.attributes", "data/attrs.txt"),
                     ("paths.checkpoints", "runs/ck"), ("paths.figures", "runs/fig"),
                     ("paths.report", "runs/report.json"), ("paths.captions_out", "runs/caps.jsonl")]:
        vals.setdefault(key, str(root / rel))
    path = root / "run.cfg"
    path.write_text("".join(f"{k}={v}\n" for k, v in vals.items()))
    return path


def pipeline(root):
    cfg = str(write_config(root))
    for cmd in (["gen-data"], ["build-vocab"], ["build-attrs"], ["train", "--decoder", "topdown"],
                ["train", "--decoder", "xlan"]):
        assert main(cmd + ["--config", cfg]) == EXIT_OK, cmd
    return cfg


@pytest.fixture(scope="module")
def run_a(tmp_path_factory):
    root = tmp_path_factory.mktemp("a")
    return root, pipeline(root)


class TestPipeline:
    def test_artifacts(self, run_a, capsys):
        root, cfg = run_a
        for rel in ("data/f.mmfc", "data/vocab.txt", "data/attrs.txt", "runs/ck/topdown/final.ckpt",
                    "runs/ck/xlan/train_log.jsonl", "runs/fig/training_xlan.png"):
            assert (root / rel).exists(), rel

    def test_eval_report(self, run_a, capsys):
        root, cfg = run_a
        ck = str(root / "runs/ck/topdown/final.ckpt")
        assert main(["eval", "--config", cfg, "--checkpoints", ck]) == EXIT_OK
        report = json.loads((root / "runs/report.json").read_text())
        assert set(report) == {"bleu4", "rouge_l", "cider_d", "meteor_exact"}
        lines = (root / "runs/caps.jsonl").read_text().splitlines()
        assert len(lines) == 4 and set(json.loads(lines[0])) == {"video_id", "caption"}

    def test_self_ensemble_equals_single(self, run_a):
        root, cfg = run_a
        ck = str(root / "runs/ck/topdown/final.ckpt")
        main(["eval", "--config", cfg, "--checkpoints", ck, "--no-figures"])
        single = json.loads((root / "runs/report.json").read_text())
        single_caps = (root / "runs/caps.jsonl").read_text()
        main(["eval", "--config", cfg, "--checkpoints", ck, ck, "--no-figures"])
        double = json.loads((root / "runs/report.json").read_text())
        assert {k: double[k] for k in single} == single
        assert (root / "runs/caps.jsonl").read_text() == single_caps

    def test_ensemble_report_has_one_block_per_run(self, run_a):
        root, cfg = run_a
        cks = [str(root / f"runs/ck/{d}/final.ckpt") for d in ("topdown", "xlan")]
        assert main(["eval", "--config", cfg, "--checkpoints", *cks]) == EXIT_OK
        report = json.loads((root / "runs/report.json").read_text())
        assert [r["checkpoint"] for r in report["runs"]] == cks
        assert (root / "runs/fig/metrics.png").exists()

    def test_caption(self, run_a, capsys):
        root, cfg = run_a
        vid = json.loads((root / "data/c.jsonl").read_text().splitlines()[0])["video_id"]
        ck = str(root / "runs/ck/xlan/final.ckpt")
        assert main(["caption", "--config", cfg, "--video-id", vid, "--checkpoints", ck]) == EXIT_OK
        assert capsys.readouterr().out.startswith(f"{vid}\t")
        assert (root / f"runs/fig/attention_{vid}.png").exists()

    def test_unknown_video(self, run_a, capsys):
        root, cfg = run_a
        ck = str(root / "runs/ck/xlan/final.ckpt")
        assert main(["caption", "--config", cfg, "--video-id", "nope", "--checkpoints", ck]) == EXIT_DATA

    def test_outputs_are_reproducible(self, run_a, tmp_path):
        root_a, _ = run_a
        pipeline(tmp_path)
        for rel in ("data/f.mmfc", "data/c.jsonl", "data/vocab.txt", "data/attrs.txt",
                    "runs/ck/topdown/final.ckpt", "runs/ck/xlan/final.ckpt", "runs/ck/xlan/train_log.jsonl",
                    "runs/fig/training_topdown.png"):
            assert (root_a / rel).read_bytes() == (tmp_path / rel).read_bytes(), rel


class TestExitCodes:
    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "FAIL" not in out and "PASS" in out

    def test_missing_input_names_path(self, tmp_path, capsys):
        cfg = str(write_config(tmp_path))
        assert main(["build-vocab", "--config", cfg]) == EXIT_DATA
        assert str(tmp_path / "data/c.jsonl") in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["frobnicate"])
        assert e.value.code == EXIT_CONFIG

    def test_no_subcommand(self, capsys):
        assert main([]) == EXIT_CONFIG

    def test_bad_config_value(self, capsys):
        assert main(["gen-data", "--set", "model.dim=-1"]) == EXIT_CONFIG
        assert main(["gen-data", "--set", "model.nope=1"]) == EXIT_CONFIG
        assert main(["gen-data", "--config", "/nonexistent.cfg"]) == EXIT_CONFIG

    def test_env_seed_reaches_data(self, tmp_path, monkeypatch):
        cfg = str(write_config(tmp_path))
        main(["gen-data", "--config", cfg])
        first = (tmp_path / "data/f.mmfc").read_bytes()
        monkeypatch.setenv("CAPFUSE_SEED", "7")
        main(["gen-data", "--config", cfg])
        assert (tmp_path / "data/f.mmfc").read_bytes() != first
