import json

import pytest

from icvedit.cli import main
from icvedit.scoring import ScoreCard, write_scorecards


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture()
def shard(tmp_path):
    code = run_cli("datagen", "--out", str(tmp_path / "data"), "--seed", "3",
                   "--size", "8", "--frames", "1", "--height", "8", "--width", "8")
    assert code == 0
    return tmp_path / "data" / "shard.rcvd"


def small_train_args(tmp_path, shard, out_name="run", **extra):
    args = [
        "train", "--shard", str(shard), "--out", str(tmp_path / out_name),
        "--steps", "3", "--batch", "2", "--token-dim", "16", "--heads", "2",
        "--depth", "1", "--lora-rank", "2", "--max-frames", "1",
        "--max-height", "2", "--max-width", "2", "--deterministic",
    ]
    for key, value in extra.items():
        args += [f"--{key}", str(value)]
    return args


class TestDatagen:
    def test_bit_identical_across_runs(self, tmp_path):
        for sub in ("a", "b"):
            assert run_cli("datagen", "--out", str(tmp_path / sub), "--seed", "7",
                           "--size", "8", "--frames", "1", "--height", "8",
                           "--width", "8") == 0
        assert (tmp_path / "a" / "shard.rcvd").read_bytes() == \
               (tmp_path / "b" / "shard.rcvd").read_bytes()

    def test_effective_config_echoed(self, tmp_path):
        run_cli("datagen", "--out", str(tmp_path / "d"), "--seed", "1", "--size", "4",
                "--frames", "1", "--height", "8", "--width", "8")
        echo = (tmp_path / "d" / "effective_config.toml").read_text()
        assert "seed = 1" in echo
        assert "size = 4" in echo

    def test_bad_size_reports_one_line_error(self, tmp_path, capsys):
        code = run_cli("datagen", "--out", str(tmp_path / "d"), "--size", "5")
        assert code == 1
        err = capsys.readouterr().err.strip()
        assert err.startswith("error: ValidationError:")
        assert "\n" not in err


class TestConfigFile:
    def test_config_file_values_used(self, tmp_path):
        cfg = tmp_path / "datagen.toml"
        cfg.write_text("seed = 11\nsize = 4\nframes = 1\nheight = 8\nwidth = 8\n")
        assert run_cli("datagen", "--config", str(cfg), "--out", str(tmp_path / "d")) == 0
        echo = (tmp_path / "d" / "effective_config.toml").read_text()
        assert "seed = 11" in echo

    def test_flags_override_config_file(self, tmp_path):
        cfg = tmp_path / "datagen.toml"
        cfg.write_text("seed = 11\nsize = 4\nframes = 1\nheight = 8\nwidth = 8\n")
        run_cli("datagen", "--config", str(cfg), "--seed", "42",
                "--out", str(tmp_path / "d"))
        assert "seed = 42" in (tmp_path / "d" / "effective_config.toml").read_text()

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "datagen.toml"
        cfg.write_text("sede = 11\n")
        code = run_cli("datagen", "--config", str(cfg), "--out", str(tmp_path / "d"))
        assert code == 1
        assert "ConfigError" in capsys.readouterr().err

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("datagen", "--bogus", "1")
        assert exc.value.code == 2

    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("frobnicate")
        assert exc.value.code == 2


class TestTrain:
    def test_ablation_excludes_term(self, tmp_path, shard):
        assert run_cli(*small_train_args(tmp_path, shard, "lc", ablation="lc-")) == 0
        records = [
            json.loads(line)
            for line in (tmp_path / "lc" / "train_log.jsonl").read_text().splitlines()
        ]
        for r in records:
            assert r["l_latent"] == 0.0
            assert r["total"] == pytest.approx(r["l_ic"] + 1e-3 * r["l_attn"])

    def test_train_writes_checkpoint_and_curves(self, tmp_path, shard):
        assert run_cli(*small_train_args(tmp_path, shard)) == 0
        out = tmp_path / "run"
        assert (out / "ckpt_final.rcck").exists()
        assert (out / "train_log.jsonl").exists()
        assert (out / "loss_curves.png").exists()
        assert (out / "effective_config.toml").exists()

    def test_missing_shard_flag_errors(self, tmp_path, capsys):
        code = run_cli("train", "--out", str(tmp_path / "x"))
        assert code == 1
        assert "ConfigError" in capsys.readouterr().err


class TestEditAndEval:
    @pytest.fixture()
    def checkpoint(self, tmp_path, shard):
        run_cli(*small_train_args(tmp_path, shard))
        return tmp_path / "run" / "ckpt_final.rcck"

    def test_edit_from_shard_with_png(self, tmp_path, shard, checkpoint):
        code = run_cli("edit", "--checkpoint", str(checkpoint), "--shard", str(shard),
                       "--index", "2", "--sampler-steps", "2",
                       "--out", str(tmp_path / "edit"), "--png", "true")
        assert code == 0
        assert (tmp_path / "edit" / "edited.rcv").exists()
        assert (tmp_path / "edit" / "frames" / "frame_0000.png").exists()

    def test_edit_from_video_file_with_instruction(self, tmp_path, shard, checkpoint):
        from icvedit.datagen import read_shard
        from icvedit.editor import write_video_file

        pair = read_shard(shard)[0]
        video_path = tmp_path / "src.rcv"
        write_video_file(pair.source, video_path)
        code = run_cli("edit", "--checkpoint", str(checkpoint), "--source",
                       str(video_path), "--task", "style", "--style", "invert",
                       "--sampler-steps", "2", "--out", str(tmp_path / "edit2"))
        assert code == 0

    def test_edit_requires_source_or_shard(self, tmp_path, checkpoint, capsys):
        code = run_cli("edit", "--checkpoint", str(checkpoint),
                       "--out", str(tmp_path / "edit3"))
        assert code == 1
        assert "ConfigError" in capsys.readouterr().err

    def test_eval_proxy(self, tmp_path, shard, checkpoint):
        code = run_cli("eval-proxy", "--checkpoint", str(checkpoint), "--shard",
                       str(shard), "--limit", "2", "--sampler-steps", "2",
                       "--out", str(tmp_path / "proxy"))
        assert code == 0
        lines = (tmp_path / "proxy" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2
        record = json.loads(lines[0])
        assert {"edit_change", "background_error", "gt_compliance", "flicker"} <= set(record)
        assert (tmp_path / "proxy" / "summary.json").exists()

    def test_eval_rater_mock_deterministic(self, tmp_path, shard):
        for sub in ("r1", "r2"):
            code = run_cli("eval-rater", "--shard", str(shard), "--mock", "true",
                           "--seed", "5", "--out", str(tmp_path / sub))
            assert code == 0
        assert (tmp_path / "r1" / "scorecards.jsonl").read_text() == \
               (tmp_path / "r2" / "scorecards.jsonl").read_text()

    def test_eval_rater_requires_mode(self, tmp_path, shard, capsys):
        code = run_cli("eval-rater", "--shard", str(shard), "--out", str(tmp_path / "r"))
        assert code == 1
        assert "ConfigError" in capsys.readouterr().err


class TestReport:
    def test_reproduces_reference_s_column(self, tmp_path, capsys):
        # one card per task whose sub-scores equal the printed category scores,
        # so per-category geometric means reproduce them exactly
        rows = {
            "add": (8.54, 7.55, 8.61),
            "replace": (9.43, 8.01, 8.77),
            "remove": (7.28, 6.90, 6.82),
            "style": (9.42, 9.19, 8.90),
        }
        cards = [
            ScoreCard(sa=ea, sp=ea, cp=ea, an=vn, sn=vn, mn=vn, vf=vq, ts=vq, es=vq,
                      task=task, sample_id="0")
            for task, (ea, vn, vq) in rows.items()
        ]
        scores_path = tmp_path / "cards.jsonl"
        write_scorecards(cards, scores_path)
        code = run_cli("report", "--scores", str(scores_path),
                       "--out", str(tmp_path / "report"))
        assert code == 0
        table = json.loads((tmp_path / "report" / "report.json").read_text())["rounded"]
        assert table["add"]["s"] == 8.23
        assert table["replace"]["s"] == 8.74
        assert table["remove"]["s"] == 7.00
        assert table["style"]["s"] == 9.17
        # delimited + figure outputs exist
        assert (tmp_path / "report" / "report.csv").exists()
        assert (tmp_path / "report" / "report.txt").exists()
        assert (tmp_path / "report" / "category_scores.png").exists()
        out = capsys.readouterr().out
        assert "8.23" in out and "9.17" in out

    def test_report_csv_has_rows(self, tmp_path):
        cards = [ScoreCard(sa=5, sp=5, cp=5, an=5, sn=5, mn=5, vf=5, ts=5, es=5,
                           task="add", sample_id="0")]
        scores_path = tmp_path / "cards.jsonl"
        write_scorecards(cards, scores_path)
        run_cli("report", "--scores", str(scores_path), "--out", str(tmp_path / "rep"))
        lines = (tmp_path / "rep" / "report.csv").read_text().splitlines()
        assert lines[0].startswith("task,count,sa")
        assert lines[1].startswith("add,1,5.00")
