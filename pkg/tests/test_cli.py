"""End-to-end CLI behavior: config handling, artifacts, exit codes."""

import json

import numpy as np
import pytest

from ssnn.cli import main, parse_config_file


def run_cli(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def tiny_train_args(tmp_path, out_name="run", **over):
    args = {
        "arch": "custom",
        "stage_timesteps": "3,2",
        "width_scale": "8",
        "epochs": "2",
        "batch": "8",
        "lr0": "0.05",
        "seed": "3",
        "out_dir": str(tmp_path / out_name),
        "synth_n": "24",
        "synth_size": "8",
        "synth_frames": "4",
    }
    args.update(over)
    argv = ["train", "--synth"]
    for k, v in args.items():
        argv += [f"--{k.replace('_', '-')}", v]
    return argv


class TestConfigFile:
    def test_roundtrip_and_override(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("arch = custom\nepochs = 1\nseed = 9\n")
        values = parse_config_file(cfg)
        assert values == {"arch": "custom", "epochs": 1, "seed": 9}

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("arch = custom\nbogus_key = 1\n")
        from ssnn.cli import ConfigError
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config_file(cfg)

    def test_flag_overrides_file(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs = 50\n")
        argv = tiny_train_args(tmp_path) + ["--config", str(cfg), "--epochs", "1"]
        code, out, _ = run_cli(argv, capsys)
        assert code == 0
        resolved = (tmp_path / "run" / "config.resolved").read_text()
        assert "epochs = 1\n" in resolved


class TestSynth:
    def test_creates_layout(self, tmp_path, capsys):
        code, out, _ = run_cli(
            ["synth", "--out-dir", str(tmp_path / "ds"), "--n", "20",
             "--size", "8", "--frames", "4", "--seed", "1"], capsys)
        assert code == 0
        assert (tmp_path / "ds" / "manifest.txt").exists()
        assert (tmp_path / "ds" / "train").is_dir()
        assert "manifest_sha256=" in out


class TestTrain:
    def test_smoke_run_writes_artifacts(self, tmp_path, capsys):
        code, out, err = run_cli(tiny_train_args(tmp_path), capsys)
        assert code == 0, err
        run_dir = tmp_path / "run"
        for name in ("metrics.csv", "timing.csv", "config.resolved",
                     "provenance.txt", "ckpt_best.ssnn", "ckpt_final.ssnn"):
            assert (run_dir / name).exists(), name
        header = (run_dir / "metrics.csv").read_text().splitlines()[0]
        assert header == ("epoch,lr,loss_stage_1,loss_stage_2,"
                          "acc_stage_1,acc_stage_2,acc_final_test")
        assert "average_timestep=2.5 w_add=6" in out
        assert "dataset_manifest_sha256=" in (run_dir / "provenance.txt").read_text()

    def test_vgg_header_reports_average_timestep(self, tmp_path, capsys):
        argv = tiny_train_args(
            tmp_path, out_name="vggrun", arch="vgg9",
            stage_timesteps="8,6,4,2", width_scale="64", epochs="1",
            synth_n="12", synth_size="12", synth_frames="8")
        code, out, _ = run_cli(argv, capsys)
        assert code == 0
        assert "average_timestep=5.0" in out
        assert "w_add=80" in out

    def test_non_shrinking_plan_exits_2(self, tmp_path, capsys):
        argv = tiny_train_args(tmp_path, stage_timesteps="4,6")
        code, _, err = run_cli(argv, capsys)
        assert code == 2
        assert "strictly shrink" in err

    def test_missing_dataset_exits_2(self, tmp_path, capsys):
        argv = [a for a in tiny_train_args(tmp_path) if a != "--synth"]
        code, _, err = run_cli(argv, capsys)
        assert code == 2
        assert "manifest" in err

    def test_lambda_final_only_arm(self, tmp_path, capsys):
        argv = tiny_train_args(tmp_path, out_name="arm", epochs="1")
        argv += ["--lambda", "0,1"]
        code, out, _ = run_cli(argv, capsys)
        assert code == 0
        assert "lambda=[0.0, 1.0]" in out

    def test_lambda_unconstrained_arm(self, tmp_path, capsys):
        argv = tiny_train_args(tmp_path, out_name="arm2", epochs="1")
        argv += ["--lambda", "0.15,1", "--lambda-unconstrained"]
        code, _, _ = run_cli(argv, capsys)
        assert code == 0

    def test_lambda_bad_sum_exits_2(self, tmp_path, capsys):
        argv = tiny_train_args(tmp_path, out_name="arm3")
        argv += ["--lambda", "0.5,0.9"]
        code, _, err = run_cli(argv, capsys)
        assert code == 2
        assert "sum to 1" in err

    def test_lambda_wrong_length_exits_2(self, tmp_path, capsys):
        argv = tiny_train_args(tmp_path, out_name="arm4")
        argv += ["--lambda", "0.2,0.2,0.6"]
        code, _, err = run_cli(argv, capsys)
        assert code == 2
        assert "stage heads" in err


class TestEval:
    @pytest.fixture()
    def trained(self, tmp_path, capsys):
        code, out, err = run_cli(tiny_train_args(tmp_path), capsys)
        assert code == 0, err
        return tmp_path / "run"

    def test_eval_reproduces_logged_accuracy(self, trained, capsys):
        last = (trained / "metrics.csv").read_text().splitlines()[-1]
        logged = float(last.split(",")[-1])
        code, out, _ = run_cli(
            ["eval", "--checkpoint", str(trained / "ckpt_final.ssnn"),
             "--data-dir", str(trained / "data"), "--batch", "8"], capsys)
        assert code == 0
        report = json.loads(out.strip().splitlines()[-1])
        assert report["final_head_acc"] == logged
        assert "stage1_spikes" in report and "stage1_synops" in report

    def test_eval_corrupt_checkpoint_exits_2(self, trained, tmp_path, capsys):
        bad = tmp_path / "bad.ssnn"
        bad.write_bytes((trained / "ckpt_final.ssnn").read_bytes()[:40])
        code, _, err = run_cli(
            ["eval", "--checkpoint", str(bad),
             "--data-dir", str(trained / "data")], capsys)
        assert code == 2
        assert "checkpoint" in err

    def test_eval_arch_mismatch_exits_2(self, trained, capsys):
        code, _, err = run_cli(
            ["eval", "--checkpoint", str(trained / "ckpt_final.ssnn"),
             "--data-dir", str(trained / "data"), "--arch", "vgg9"], capsys)
        assert code == 2
        assert "custom" in err

    def test_firing_rates_dump_bounded(self, trained, tmp_path, capsys):
        out_csv = tmp_path / "rates.csv"
        code, _, _ = run_cli(
            ["dump-firing-rates", "--checkpoint", str(trained / "ckpt_final.ssnn"),
             "--data-dir", str(trained / "data"), "--batch", "8",
             "--out", str(out_csv)], capsys)
        assert code == 0
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "layer,channel,row,col,rate"
        rates = [float(l.rsplit(",", 1)[1]) for l in lines[1:]]
        assert rates and all(0.0 <= r <= 1.0 for r in rates)


class TestVerifyCommand:
    def test_formulas_suite_passes(self, capsys):
        code, out, _ = run_cli(["verify", "formulas"], capsys)
        assert code == 0
        checks = [json.loads(line) for line in out.strip().splitlines()]
        assert all(c["pass"] for c in checks)
        names = {c["check"] for c in checks}
        assert "average_timestep_vgg9" in names

    def test_golden_suite_passes(self, capsys):
        code, out, _ = run_cli(["verify", "golden"], capsys)
        assert code == 0

    def test_unknown_suite_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["verify", "nonsense"])
        assert exc.value.code == 2


class TestDeterminism:
    def test_two_identical_runs_are_bitwise_identical(self, tmp_path, capsys):
        argv_a = tiny_train_args(tmp_path, out_name="run_a") + ["--threads", "1"]
        argv_b = tiny_train_args(tmp_path, out_name="run_b") + ["--threads", "1"]
        # point both runs at one dataset
        data = str(tmp_path / "shared_data")
        argv_a += ["--data-dir", data]
        argv_b += ["--data-dir", data]
        assert run_cli(argv_a, capsys)[0] == 0
        assert run_cli(argv_b, capsys)[0] == 0
        a, b = tmp_path / "run_a", tmp_path / "run_b"
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        assert (a / "ckpt_final.ssnn").read_bytes() == (b / "ckpt_final.ssnn").read_bytes()
        assert (a / "ckpt_best.ssnn").read_bytes() == (b / "ckpt_best.ssnn").read_bytes()
