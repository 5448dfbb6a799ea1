"""End-to-end tests of the command-line interface."""

import json
from pathlib import Path

import numpy as np
import pytest

from groupact.cli import main, parse_config_file, resolve_config
from groupact.data import load_clips
from groupact.pipeline import load_checkpoint, parameter_report

SMALL_CONFIG = """
# desk-scale smoke configuration
actors_per_clip=4
frames=2
feature_dim=16
train_clips=24
test_clips=8
noise_sigma=0.2
text_dim=8
encoder_layers=1
encoder_heads=2
epochs=2
batch_size=8
warmup_epochs=1
lr=0.001
"""

WIDE_CONFIG = """
# wide relation module for the adapter parameter ledger
actors_per_clip=2
frames=2
feature_dim=1024
train_clips=8
test_clips=8
text_dim=8
encoder_layers=0
encoder_heads=1
epochs=1
batch_size=8
warmup_epochs=1
"""


@pytest.fixture(autouse=True)
def quiet(monkeypatch):
    monkeypatch.setenv("GROUPACT_VERBOSE", "0")


@pytest.fixture(scope="module")
def small_env(tmp_path_factory):
    """Shared small dataset + phase-1 + phase-2 checkpoints."""
    root = tmp_path_factory.mktemp("cli_small")
    cfg = root / "run.cfg"
    cfg.write_text(SMALL_CONFIG)
    data = root / "data"
    assert main(["generate", str(data), "--config", str(cfg)]) == 0
    ck1 = root / "phase1.ckpt"
    assert main(["train", "--phase", "1", "--data", str(data),
                 "--ckpt-out", str(ck1), "--config", str(cfg)]) == 0
    ck2 = root / "phase2.ckpt"
    assert main(["train", "--phase", "2", "--data", str(data),
                 "--ckpt-in", str(ck1), "--ckpt-out", str(ck2),
                 "--config", str(cfg)]) == 0
    return {"root": root, "cfg": cfg, "data": data, "ck1": ck1, "ck2": ck2}


class TestConfig:
    def test_parse_config_file(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("epochs=3  # comment\n\n# full-line comment\nlr=0.01\n")
        assert parse_config_file(path) == {"epochs": "3", "lr": "0.01"}

    def test_resolve_with_overrides(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("epochs=3\nr=4\n")
        cfg = resolve_config(path, ["epochs=5", "dual_path=false"])
        assert cfg.train.epochs == 5
        assert cfg.train.r == 4
        assert cfg.model.dual_path is False

    def test_unknown_key_is_an_error(self, capsys):
        rc = main(["generate", "/tmp/never", "--set", "bogus_key=1"])
        assert rc == 2
        assert "bogus_key" in capsys.readouterr().err

    def test_defaults_match_training_recipe(self):
        cfg = resolve_config(None, None)
        assert cfg.train.epochs == 30
        assert cfg.train.batch_size == 8
        assert cfg.train.lr == pytest.approx(1e-4)
        assert cfg.train.warmup_epochs == 5
        assert cfg.train.alpha == 8.0
        assert cfg.train.r == 2


class TestGenerate:
    def test_default_split_line_counts(self, tmp_path, capsys):
        out = tmp_path / "default_data"
        assert main(["generate", str(out), "--regen-only"]) == 0
        train_lines = (out / "train.jsonl").read_text().splitlines()
        test_lines = (out / "test.jsonl").read_text().splitlines()
        assert len(train_lines) == 501 and len(test_lines) == 201  # header + clips
        summary = json.loads(capsys.readouterr().out)
        assert summary["train"]["clips"] == 500

    def test_same_seed_identical_files(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        base = ["--set", "train_clips=10", "--set", "test_clips=4",
                "--set", "actors_per_clip=3", "--set", "frames=2",
                "--set", "feature_dim=16", "--seed", "7"]
        assert main(["generate", str(a)] + base) == 0
        assert main(["generate", str(b)] + base) == 0
        capsys.readouterr()
        assert (a / "train.jsonl").read_bytes() == (b / "train.jsonl").read_bytes()
        assert (a / "test.jsonl").read_bytes() == (b / "test.jsonl").read_bytes()

    def test_noise_zero_reports_perfect_oracle(self, tmp_path, capsys):
        out = tmp_path / "clean"
        assert main(["generate", str(out), "--noise", "0",
                     "--set", "train_clips=16", "--set", "test_clips=8",
                     "--set", "actors_per_clip=3", "--set", "frames=2",
                     "--set", "feature_dim=16"]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["train"]["oracle_activity_accuracy"] == 1.0
        assert summary["train"]["oracle_action_accuracy"] == 1.0

    def test_embedded_config_in_header(self, small_env):
        _, _, header = load_clips(small_env["data"] / "train.jsonl")
        assert header["tool_version"]
        assert header["config"]["train"]["epochs"] == 2


class TestTrain:
    def test_phase1_writes_expected_metric_rows(self, small_env):
        csv_path = Path(str(small_env["ck1"]) + ".phase1.csv")
        lines = csv_path.read_text().splitlines()
        assert lines[0].startswith("# groupact")
        assert len(lines) == 2 + 2   # comment + header + one row per epoch

    def test_phase2_lambda_zero_still_reports_kd(self, small_env, tmp_path):
        ck = tmp_path / "p2.ckpt"
        metrics = tmp_path / "m.csv"
        assert main(["train", "--phase", "2", "--data", str(small_env["data"]),
                     "--ckpt-in", str(small_env["ck1"]), "--ckpt-out", str(ck),
                     "--config", str(small_env["cfg"]),
                     "--set", "lambda_kd=0", "--metrics", str(metrics)]) == 0
        lines = metrics.read_text().splitlines()
        header = lines[1].split(",")
        kd_col = header.index("loss_kd")
        for row in lines[2:]:
            assert float(row.split(",")[kd_col]) > 0.0

    def test_phase2_requires_checkpoint(self, small_env, capsys, tmp_path):
        rc = main(["train", "--phase", "2", "--data", str(small_env["data"]),
                   "--ckpt-out", str(tmp_path / "x.ckpt")])
        assert rc == 2
        assert "ckpt-in" in capsys.readouterr().err

    def test_trainable_line_matches_report(self, small_env, capsys, tmp_path):
        ck = tmp_path / "again.ckpt"
        assert main(["train", "--phase", "2", "--data", str(small_env["data"]),
                     "--ckpt-in", str(small_env["ck1"]), "--ckpt-out", str(ck),
                     "--config", str(small_env["cfg"])]) == 0
        out = capsys.readouterr().out
        line = [l for l in out.splitlines() if "phase-2 trainable parameters" in l][0]
        printed = int(line.rsplit(":", 1)[1])
        model = load_checkpoint(ck)
        assert printed == parameter_report(model)["phase2_trainable_total"]


class TestEval:
    def test_phase1_checkpoint_fused_equals_image(self, small_env, tmp_path, capsys):
        out = tmp_path / "eval1"
        assert main(["eval", "--ckpt", str(small_env["ck1"]),
                     "--data", str(small_env["data"]), "--out", str(out)]) == 0
        payload = json.loads((out / "metrics.json").read_text())
        assert payload["branches"]["image"]["mca"] == payload["branches"]["fused"]["mca"]

    def test_confusion_row_sums_match_supports(self, small_env, tmp_path):
        out = tmp_path / "eval2"
        assert main(["eval", "--ckpt", str(small_env["ck2"]),
                     "--data", str(small_env["data"]), "--out", str(out)]) == 0
        clips, scenario, _ = load_clips(small_env["data"] / "test.jsonl")
        supports = np.bincount([c.activity for c in clips],
                               minlength=len(scenario.activities))
        lines = (out / "confusion.csv").read_text().splitlines()
        for i, row in enumerate(lines[1:]):
            counts = [int(v) for v in row.split(",")[1:]]
            assert sum(counts) == supports[i]

    def test_baseline_against_itself_gives_zero_deltas(self, small_env, tmp_path):
        out = tmp_path / "eval3"
        assert main(["eval", "--ckpt", str(small_env["ck2"]),
                     "--data", str(small_env["data"]), "--out", str(out),
                     "--baseline", str(small_env["ck2"])]) == 0
        payload = json.loads((out / "metrics.json").read_text())
        assert payload["per_class_delta_vs_baseline"] == [0] * 8
        delta_rows = (out / "delta.csv").read_text().splitlines()[1:]
        assert all(row.endswith(",0") for row in delta_rows)

    def test_svg_and_maps_outputs(self, small_env, tmp_path):
        out = tmp_path / "eval4"
        assert main(["eval", "--ckpt", str(small_env["ck2"]),
                     "--data", str(small_env["data"]), "--out", str(out),
                     "--svg", "--dump-maps"]) == 0
        svg = (out / "confusion.svg").read_text()
        assert svg.startswith("<svg") and "<rect" in svg
        maps = json.loads((out / "maps.json").read_text())
        image_keys = [k for k in maps if k.startswith("image/")]
        text_keys = [k for k in maps if k.startswith("text/")]
        assert image_keys and text_keys
        first = np.asarray(maps[image_keys[0]])
        assert np.allclose(first.sum(axis=1), 1.0, atol=1e-6)

    def test_label_space_mismatch(self, small_env, tmp_path, capsys):
        other = tmp_path / "other_data"
        assert main(["generate", str(other), "--set", "key_actions=setting,spiking",
                     "--set", "train_clips=4", "--set", "test_clips=4",
                     "--set", "actors_per_clip=3", "--set", "frames=2",
                     "--set", "feature_dim=16"]) == 0
        capsys.readouterr()
        rc = main(["eval", "--ckpt", str(small_env["ck1"]),
                   "--data", str(other), "--out", str(tmp_path / "bad")])
        assert rc == 2


@pytest.fixture(scope="module")
def wide_env(tmp_path_factory):
    """Width-1024 relation module for the adapter ledger checks."""
    root = tmp_path_factory.mktemp("cli_wide")
    cfg = root / "wide.cfg"
    cfg.write_text(WIDE_CONFIG)
    data = root / "data"
    assert main(["generate", str(data), "--config", str(cfg)]) == 0
    ck1 = root / "phase1.ckpt"
    assert main(["train", "--phase", "1", "--data", str(data),
                 "--ckpt-out", str(ck1), "--config", str(cfg)]) == 0
    return {"root": root, "cfg": cfg, "data": data, "ck1": ck1}


class TestReport:
    def test_adapter_counts_at_width_1024(self, wide_env, capsys):
        assert main(["report", "--ckpt", str(wide_env["ck1"])]) == 0
        out = capsys.readouterr().out
        assert "12288" in out                      # r=2 default, 3 x 1024x1024
        assert "2*(1024+1024)" in out
        image_rows = [l for l in out.splitlines() if l.startswith("image.")]
        assert image_rows and all(l.split()[-1] == "0" for l in image_rows)

    def test_r1_reports_6144(self, wide_env, tmp_path, capsys):
        ck = tmp_path / "r1.ckpt"
        assert main(["train", "--phase", "2", "--data", str(wide_env["data"]),
                     "--ckpt-in", str(wide_env["ck1"]), "--ckpt-out", str(ck),
                     "--config", str(wide_env["cfg"]), "--set", "r=1"]) == 0
        capsys.readouterr()
        assert main(["report", "--ckpt", str(ck)]) == 0
        assert "6144" in capsys.readouterr().out


class TestAblate:
    def test_rank_sweep_reproduces_ledger(self, wide_env, tmp_path):
        out = tmp_path / "sweep_r.csv"
        assert main(["ablate", "--sweep", "r", "--values", "1,2,4,6,8,10",
                     "--data", str(wide_env["data"]), "--ckpt-in", str(wide_env["ck1"]),
                     "--out", str(out), "--config", str(wide_env["cfg"])]) == 0
        rows = [l.split(",") for l in out.read_text().splitlines()[2:]]
        assert [int(r[2]) for r in rows] == [6144, 12288, 24576, 36864, 49152, 61440]

    def test_alpha_sweep_constant_trainables(self, wide_env, tmp_path):
        out = tmp_path / "sweep_alpha.csv"
        assert main(["ablate", "--sweep", "alpha", "--values", "1,4,8",
                     "--data", str(wide_env["data"]), "--ckpt-in", str(wide_env["ck1"]),
                     "--out", str(out), "--config", str(wide_env["cfg"])]) == 0
        rows = [l.split(",") for l in out.read_text().splitlines()[2:]]
        assert [int(r[2]) for r in rows] == [12288, 12288, 12288]

    def test_layer_sweep_strictly_increasing_parameters(self, small_env, tmp_path):
        out = tmp_path / "sweep_layers.csv"
        assert main(["ablate", "--sweep", "layers", "--values", "0,2",
                     "--data", str(small_env["data"]), "--ckpt-in", str(small_env["ck1"]),
                     "--out", str(out), "--config", str(small_env["cfg"])]) == 0
        rows = [l.split(",") for l in out.read_text().splitlines()[2:]]
        totals = [int(r[3]) for r in rows]
        assert totals[0] < totals[1]

    def test_unknown_sweep_key(self, small_env, capsys, tmp_path):
        import pytest as _p
        with _p.raises(SystemExit):
            main(["ablate", "--sweep", "bogus", "--values", "1",
                  "--data", str(small_env["data"]),
                  "--ckpt-in", str(small_env["ck1"]),
                  "--out", str(tmp_path / "x.csv")])
