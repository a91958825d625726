import csv
import json
import shutil

import numpy as np
import pytest
import yaml
from filelock import FileLock

from tidemark import cli, metrics, report
from tidemark.config import load_config
from tidemark.phantom import PhantomSpec, write_dataset
from tidemark.volio import load_manifest

SPEC = PhantomSpec(shape=(46, 24, 24), radius=8, surface_z=3, tidemark_z=14, tidemark_amplitude=2, n_voids=1, center_jitter=1)


def make_config(tmp_path, data_dir, run="run", **overrides):
    doc = {
        "data": {"manifest": str(data_dir / "manifest.csv")},
        "run_dir": str(tmp_path / run),
        "seed": 0,
        "preprocess": {"canonical_shape": [32, 16, 16]},
        "split": {"k": 2},
        "unet": {"base_width": 2, "depth": 3},
        "train": {"epochs": 1, "batch_size": 8, "crop_to": [32, 16], "pad_to": [40, 24], "learning_rate": 1e-3},
        "eval": {"batch_size": 16},
        **overrides,
    }
    path = tmp_path / f"{run}.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("raw")
    write_dataset(root, n_samples=8, n_subjects=4, seed=3, spec=SPEC)
    return root


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, dataset):
    tmp = tmp_path_factory.mktemp("pipe")
    cfg_path = make_config(tmp, dataset)
    codes = {}
    for cmd in ("preprocess", "split", "train", "predict", "evaluate", "report"):
        codes[cmd] = cli.main([cmd, "--config", str(cfg_path)])
    return cfg_path, load_config(cfg_path), codes


def test_full_pipeline_exit_codes(pipeline):
    _, _, codes = pipeline
    assert codes == dict.fromkeys(codes, 0)


def test_pipeline_layout(pipeline):
    _, cfg, _ = pipeline
    run = cfg.run_dir
    with open(run / "preprocess_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8 and {r["status"] for r in rows} == {"done"}
    assert (run / "folds.csv").exists()
    assert sorted(p.name for p in (run / "checkpoints/bce_log_jaccard").iterdir()) == ["fold_0.pt", "fold_1.pt"]
    assert len(list((run / "predictions/bce_log_jaccard").iterdir())) == 8
    assert len(metrics.read_report(run / "metrics/bce_log_jaccard.csv")) == 8 * 10
    for name in ("iou.png", "dice.png", "vs.png", "summary_table.csv"):
        assert (run / "report" / name).stat().st_size > 0
    assert (run / "config.yaml").exists()
    for marker in ("preprocess", "split", "train_bce_log_jaccard", "predict_bce_log_jaccard", "evaluate_bce_log_jaccard", "report"):
        assert json.loads((run / "markers" / f"{marker}.json").read_text())["config_hash"] == cfg.hash()


def test_summary_table_format(pipeline):
    _, cfg, _ = pipeline
    with open(cfg.run_dir / "report/summary_table.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["loss_kind"] + [f"{p:g}" for p in metrics.PADS_UM]
    assert rows[1][0] == "bce_log_jaccard"
    for cell in rows[1][1:]:
        med, std = cell.split("±")
        assert 0 <= float(med) <= 1 and float(std) >= 0


def test_preprocess_is_idempotent(pipeline):
    cfg_path, cfg, _ = pipeline
    vol_dir = cfg.preprocessed_dir / "S00" / "volume"
    stamp = sorted(p.stat().st_mtime_ns for p in vol_dir.iterdir())
    assert cli.main(["preprocess", "--config", str(cfg_path)]) == 0
    assert sorted(p.stat().st_mtime_ns for p in vol_dir.iterdir()) == stamp
    with open(cfg.run_dir / "preprocess_log.csv") as fh:
        assert {r["status"] for r in csv.DictReader(fh)} == {"skipped"}


def test_evaluate_and_report_are_deterministic(pipeline):
    cfg_path, cfg, _ = pipeline
    before = (cfg.run_dir / "metrics/bce_log_jaccard.csv").read_bytes()
    table = (cfg.run_dir / "report/summary_table.csv").read_bytes()
    assert cli.main(["evaluate", "--config", str(cfg_path)]) == 0
    assert cli.main(["report", "--config", str(cfg_path)]) == 0
    assert (cfg.run_dir / "metrics/bce_log_jaccard.csv").read_bytes() == before
    assert (cfg.run_dir / "report/summary_table.csv").read_bytes() == table


def test_perfect_predictions_score_one(tmp_path, pipeline):
    _, cfg, _ = pipeline
    run = tmp_path / "perfect"
    shutil.copytree(cfg.run_dir / "preprocessed", run / "preprocessed")
    for sample in (run / "preprocessed").iterdir():
        shutil.copytree(sample / "mask", run / "predictions/bce" / sample.name)
    cfg_path = make_config(tmp_path, cfg.data.manifest.parent, run="perfect")
    assert cli.main(["evaluate", "--config", str(cfg_path), "--loss", "bce"]) == 0
    summary = report.read_summary(run / "metrics/summary_bce.csv")
    assert all(summary[("bce", float(p), "iou")][1] == 1.0 for p in metrics.PADS_UM)


def test_corrupt_stack_is_partial_failure(tmp_path, caplog):
    data = tmp_path / "raw"
    write_dataset(data, n_samples=4, n_subjects=2, seed=1, spec=SPEC)
    bad = load_manifest(data / "manifest.csv")[2]
    for f in bad.volume_path.iterdir():
        f.write_bytes(b"not an image")
    cfg_path = make_config(tmp_path, data)
    assert cli.main(["preprocess", "--config", str(cfg_path)]) == 1
    assert bad.sample_id in caplog.text
    with open(tmp_path / "run/preprocess_log.csv") as fh:
        status = {r["sample_id"]: r["status"] for r in csv.DictReader(fh)}
    assert status.pop(bad.sample_id) == "failed"
    assert set(status.values()) == {"done"}
    assert not (tmp_path / "run/markers/preprocess.json").exists()


def test_predict_before_train(tmp_path, dataset, caplog):
    cfg_path = make_config(tmp_path, dataset)
    assert cli.main(["preprocess", "--config", str(cfg_path)]) == 0
    assert cli.main(["split", "--config", str(cfg_path)]) == 0
    assert cli.main(["predict", "--config", str(cfg_path)]) == 2
    assert "missing checkpoints" in caplog.text


def test_train_before_split(tmp_path, dataset, caplog):
    cfg_path = make_config(tmp_path, dataset)
    assert cli.main(["train", "--config", str(cfg_path)]) == 2
    assert "fold assignment" in caplog.text


def test_configuration_errors(tmp_path, dataset):
    assert cli.main(["split", "--config", str(tmp_path / "missing.yaml")]) == 2
    cfg_path = make_config(tmp_path, dataset)
    assert cli.main(["train", "--config", str(cfg_path), "--loss", "dice"]) == 2
    bad = make_config(tmp_path, tmp_path / "nowhere", run="bad")
    assert cli.main(["split", "--config", str(bad)]) == 2
    assert cli.main(["report", "--config", str(cfg_path)]) == 2


def test_locked_run_dir(tmp_path, dataset):
    cfg_path = make_config(tmp_path, dataset)
    (tmp_path / "run").mkdir()
    with FileLock(str(tmp_path / "run/.lock")):
        assert cli.main(["split", "--config", str(cfg_path)]) == 2


def test_report_three_losses(tmp_path, dataset):
    cfg_path = make_config(tmp_path, dataset)
    rng = np.random.default_rng(0)
    for kind in ("bce", "focal", "bce_log_jaccard"):
        rows = [
            metrics.MetricRow(f"S{i}", f"P{i}", kind, float(p), 1, 1, 1, 1, 1, *rng.random(3), False)
            for i in range(5) for p in metrics.PADS_UM
        ]
        metrics.write_report(rows, tmp_path / "run/metrics" / f"{kind}.csv")
    assert cli.main(["report", "--config", str(cfg_path)]) == 0
    summary = report.read_summary(tmp_path / "run/report/summary.csv")
    for metric, lines in report.curves(summary).items():
        assert sorted(lines) == ["bce", "bce_log_jaccard", "focal"]
        assert all(len(pads) == len(med) == 10 for pads, med in lines.values())
    assert cli.main(["report", "--config", str(cfg_path), "--loss", "focal"]) == 0
    one = report.read_summary(tmp_path / "run/report/summary.csv")
    assert {k for k, _, _ in one} == {"focal"}


def test_synth_command(tmp_path, capsys):
    assert cli.main(["synth", "--out", str(tmp_path / "s"), "--samples", "2", "--subjects", "1"]) == 0
    assert capsys.readouterr().out.strip().endswith("manifest.csv")
    assert len(load_manifest(tmp_path / "s/manifest.csv")) == 2


def test_folds_flag(tmp_path, dataset):
    cfg_path = make_config(tmp_path, dataset)
    for cmd in ("preprocess", "split"):
        assert cli.main([cmd, "--config", str(cfg_path)]) == 0
    assert cli.main(["train", "--config", str(cfg_path), "--folds", "1", "--loss", "focal"]) == 0
    assert [p.name for p in (tmp_path / "run/checkpoints/focal").iterdir()] == ["fold_1.pt"]
    with pytest.raises(SystemExit):
        cli.main(["train", "--config", str(cfg_path), "--folds", "a,b"])
