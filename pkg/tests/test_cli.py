"""End-to-end command-line tests: every subcommand plus the exit-code
contract (0 ok, 2 argument/config, 3 I/O, 4 format, 5 numeric)."""

import csv
import json
from pathlib import Path

import pytest
import torch

from kmaxseg.cli import EXIT_ARGUMENT, EXIT_FORMAT, EXIT_IO, main
from kmaxseg.config import ModelConfig
from kmaxseg.data import AugmentConfig
from kmaxseg.trainer import PhantomSpec, TrainConfig

torch.set_num_threads(1)


def write_config(path: Path, out_dir: Path, **overrides) -> Path:
    base = dict(
        out_dir=str(out_dir),
        phantom=PhantomSpec(count=4, val_count=1, shape=(16, 16, 16)),
        labeled_fraction=0.5,
        crop_shape=(16, 16, 16),
        model=ModelConfig(base_width=4, num_stages=2, num_queries=4,
                          query_channels=8, num_classes=3),
        augment=AugmentConfig(noise_sigma=0.05, gamma_log_range=0.2),
        lambda_max=0.1,
        ramp_frac=0.5,
        lr=1e-3,
        steps=2,
        batch_labeled=2,
        batch_unlabeled=2,
        eval_overlap=0.0,
        seed=0,
    )
    base.update(overrides)
    path.write_text(json.dumps(TrainConfig(**base).to_dict(), indent=2))
    return path


@pytest.fixture(scope="module")
def train_run(tmp_path_factory):
    """One shared tiny training run for the eval/plot tests."""
    root = tmp_path_factory.mktemp("cli_run")
    cfg_path = write_config(root / "config.json", root / "run")
    assert main(["train", "--config", str(cfg_path)]) == 0
    return root / "run"


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    out = root / "vols"
    assert main(["generate", "--out", str(out), "--count", "2",
                 "--shape", "16,16,16", "--seed", "5"]) == 0
    return out


class TestGenerate:
    def test_writes_pairs_and_manifest(self, data_dir):
        manifest = json.loads((data_dir / "manifest.json").read_text())
        assert manifest["volumes"] == ["vol000", "vol001"]
        assert manifest["count"] == 2
        assert manifest["shape"] == [16, 16, 16]
        for stem in manifest["volumes"]:
            assert (data_dir / f"{stem}_img.raw").exists()
            assert (data_dir / f"{stem}_seg.raw").exists()

    def test_rerun_bit_identical(self, data_dir, tmp_path):
        again = tmp_path / "again"
        assert main(["generate", "--out", str(again), "--count", "2",
                     "--shape", "16,16,16", "--seed", "5"]) == 0
        for name in ("vol000_img.raw", "vol001_seg.raw", "vol000_img.json"):
            assert (again / name).read_bytes() == (data_dir / name).read_bytes()

    def test_bad_class_count_is_argument_error(self, tmp_path, capsys):
        code = main(["generate", "--out", str(tmp_path / "x"),
                     "--count", "1", "--classes", "4"])
        assert code == EXIT_ARGUMENT
        assert "classes" in capsys.readouterr().err

    def test_bad_shape_is_argument_error(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path / "x"),
                     "--count", "1", "--shape", "16,16"]) == EXIT_ARGUMENT

    def test_unwritable_out_is_io_error(self, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("a plain file, not a directory")
        code = main(["generate", "--out", str(blocker / "sub"),
                     "--count", "1", "--shape", "16,16,16"])
        assert code == EXIT_IO

    def test_missing_required_arg_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["generate", "--count", "1"])
        assert exc.value.code == 2


class TestTrain:
    def test_run_artifacts(self, train_run):
        for name in ("config.json", "loss.csv", "checkpoint.pt",
                     "metrics.csv", "metrics.json", "manifest.json"):
            assert (train_run / name).exists(), name
        rows = list(csv.DictReader((train_run / "loss.csv").open()))
        assert len(rows) == 2

    def test_missing_config_is_io_error(self, tmp_path, capsys):
        code = main(["train", "--config", str(tmp_path / "none.json")])
        assert code == EXIT_IO
        assert "not found" in capsys.readouterr().err

    def test_malformed_json_is_format_error_with_position(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"steps": 2,\n  "oops"\n}')
        assert main(["train", "--config", str(bad)]) == EXIT_FORMAT
        err = capsys.readouterr().err
        assert "line" in err and "column" in err

    def test_unknown_config_field_is_argument_error(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path / "c.json", tmp_path / "run")
        d = json.loads(cfg_path.read_text())
        d["warmup_epochs"] = 3
        cfg_path.write_text(json.dumps(d))
        assert main(["train", "--config", str(cfg_path)]) == EXIT_ARGUMENT
        assert "warmup_epochs" in capsys.readouterr().err

    def test_out_flag_overrides_config(self, tmp_path):
        cfg_path = write_config(tmp_path / "c.json", tmp_path / "ignored",
                                steps=0, phantom=PhantomSpec(
                                    count=2, val_count=0, shape=(16, 16, 16)))
        dest = tmp_path / "actual"
        assert main(["train", "--config", str(cfg_path),
                     "--out", str(dest)]) == 0
        assert (dest / "checkpoint.pt").exists()
        assert not (tmp_path / "ignored").exists()


class TestEval:
    def test_scores_generated_volumes(self, train_run, data_dir, tmp_path):
        out = tmp_path / "report"
        preds = tmp_path / "preds"
        code = main(["eval", "--checkpoint", str(train_run / "checkpoint.pt"),
                     "--data", str(data_dir), "--out", str(out),
                     "--pred-dir", str(preds)])
        assert code == 0
        rows = list(csv.DictReader((out / "eval_metrics.csv").open()))
        # 2 volumes x 2 foreground classes
        assert len(rows) == 4
        assert {r["volume_id"] for r in rows} == {"vol000", "vol001"}
        manifest = json.loads((out / "eval_manifest.json").read_text())
        assert manifest["num_volumes"] == 2
        assert (preds / "vol000_pred.raw").exists()

    def test_out_defaults_to_checkpoint_dir(self, train_run, data_dir):
        code = main(["eval", "--checkpoint", str(train_run / "checkpoint.pt"),
                     "--data", str(data_dir)])
        assert code == 0
        assert (train_run / "eval_metrics.csv").exists()

    def test_tampered_checkpoint_is_format_error(self, train_run, tmp_path, capsys):
        blob = torch.load(train_run / "checkpoint.pt", weights_only=False)
        blob["config"]["lr"] = 0.999
        hacked = tmp_path / "hacked.pt"
        torch.save(blob, hacked)
        code = main(["eval", "--checkpoint", str(hacked),
                     "--data", str(tmp_path)])
        assert code == EXIT_FORMAT
        assert "hash" in capsys.readouterr().err

    def test_missing_checkpoint_is_io_error(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "no.pt"),
                     "--data", str(tmp_path)]) == EXIT_IO


class TestAblate:
    def test_grid_has_exactly_four_rows(self, tmp_path):
        cfg_path = write_config(tmp_path / "c.json", tmp_path / "grid", steps=1)
        assert main(["ablate", "--config", str(cfg_path)]) == 0
        with (tmp_path / "grid" / "ablation.csv").open(newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 4
        assert [(r["use_segc"], r["use_qdc"]) for r in rows] == [
            ("0", "0"), ("0", "1"), ("1", "0"), ("1", "1")]
        for r in rows:
            for key in ("dice", "jaccard", "hd95", "asd"):
                float(r[key])  # present and numeric ("nan" also parses)
        for tag in ("segc0_qdc0", "segc0_qdc1", "segc1_qdc0", "segc1_qdc1"):
            assert (tmp_path / "grid" / tag / "checkpoint.pt").exists()

    def test_requires_validation_pool(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path / "c.json", tmp_path / "grid", steps=1,
                                phantom=PhantomSpec(count=2, val_count=0,
                                                    shape=(16, 16, 16)))
        assert main(["ablate", "--config", str(cfg_path)]) == EXIT_ARGUMENT
        assert "validation" in capsys.readouterr().err


class TestPlot:
    def test_renders_png(self, train_run, tmp_path):
        out = tmp_path / "plots.png"
        assert main(["plot", "--run", str(train_run),
                     "--out", str(out)]) == 0
        assert out.stat().st_size > 0

    def test_rerun_idempotent(self, train_run, tmp_path):
        out = tmp_path / "plots.png"
        assert main(["plot", "--run", str(train_run), "--out", str(out)]) == 0
        assert main(["plot", "--run", str(train_run), "--out", str(out)]) == 0

    def test_missing_run_is_io_error(self, tmp_path):
        assert main(["plot", "--run", str(tmp_path),
                     "--out", str(tmp_path / "p.png")]) == EXIT_IO
