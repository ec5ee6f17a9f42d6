import csv
import json
import subprocess
import sys
import time
from pathlib import Path

import pytest

from mbse3.cli import CSV_COLUMNS, ConfigError, build_config, main

SRC = str(Path(__file__).resolve().parents[1] / "src")


def _sets(root: Path, train=4, test=2, epochs=1, n_points=128):
    return ["--quiet",
            "--set", f"counts.train={train}", "--set", f"counts.test={test}", "--set", "counts.val=0",
            "--set", f"trainer.epochs={epochs}", "--set", f"scene.n_points={n_points}",
            "--set", "scene.min_points_per_part=30",
            "--set", f"paths.data_root={root / 'data'}",
            "--set", f"paths.checkpoint={root / 'run' / 'model.json'}",
            "--set", f"paths.record={root / 'run' / 'record.jsonl'}",
            "--set", f"paths.report={root / 'run' / 'report.json'}",
            "--set", f"paths.csv={root / 'run' / 'report.csv'}"]


def test_config_defaults_and_overrides():
    cfg = build_config({"trainer": {"epochs": 3}}, ["scene.flow_noise=0.05", "backbone.layer_dims=[8,8]"])
    assert cfg.trainer.epochs == 3 and cfg.scene.flow_noise == 0.05 and cfg.backbone.layer_dims == (8, 8)
    json.dumps(cfg.to_dict())


@pytest.mark.parametrize("doc,overrides", [({"scene": {"colour": 1}}, []), ({"extras": {}}, []),
                                           ({}, ["trainer.lr=1"]), ({}, ["noequals"])])
def test_unknown_keys_rejected(doc, overrides):
    with pytest.raises(ConfigError):
        build_config(doc, overrides)


def test_gen_writes_files_and_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen"] + _sets(a, train=10, test=0)) == 0
    assert main(["gen"] + _sets(b, train=10, test=0)) == 0
    files = sorted((a / "data" / "train").iterdir())
    assert len(files) == 10
    for f in files:
        assert f.read_bytes() == (b / "data" / "train" / f.name).read_bytes()


def test_gen_invalid_spec_exit_2(tmp_path, capsys):
    assert main(["gen"] + _sets(tmp_path, n_points=60)) == 2
    assert "min_points_per_part" in capsys.readouterr().err


def test_bad_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{broken")
    assert main(["gen", "--config", str(p)]) == 2
    assert main(["gen", "--config", str(tmp_path / "missing.json")]) == 2


def test_train_without_data_is_io_error(tmp_path):
    assert main(["train"] + _sets(tmp_path)) == 3


def test_toy_pipeline(tmp_path):
    sets = _sets(tmp_path, train=10, test=3, epochs=2)
    assert main(["gen"] + sets) == 0
    t0 = time.perf_counter()
    assert main(["train"] + sets) == 0
    assert time.perf_counter() - t0 < 60
    run = tmp_path / "run"
    records = [json.loads(x) for x in (run / "record.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [0, 1]

    # identical seed -> identical checkpoint bytes
    other = tmp_path / "again"
    sets2 = _sets(other, train=10, test=3, epochs=2)
    assert main(["gen"] + sets2) == 0 and main(["train"] + sets2) == 0
    assert (run / "model.json").read_bytes() == (other / "run" / "model.json").read_bytes()

    assert main(["train", "--resume"] + _sets(tmp_path, train=10, test=3, epochs=1)) == 0
    records = [json.loads(x) for x in (run / "record.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [0, 1, 2]

    assert main(["eval"] + sets) == 0
    report = json.loads((run / "report.json").read_text())
    rows = list(csv.reader((run / "report.csv").open()))
    assert tuple(rows[0]) == CSV_COLUMNS and all(len(r) == 10 for r in rows)
    assert len(rows) == 4 and len(report["per_scene"]) == 3
    for key in ("AP", "mIoU", "EPE3D"):
        vals = [v[key] for v in report["per_scene"].values()]
        assert report["aggregate"][key] == pytest.approx(sum(vals) / len(vals))

    first = (run / "report.json").read_bytes()
    assert main(["eval"] + sets) == 0
    assert (run / "report.json").read_bytes() == first


def test_eval_oracle_mode(tmp_path):
    sets = _sets(tmp_path, train=0, test=3)
    assert main(["gen"] + sets) == 0
    assert main(["eval", "--oracle"] + sets) == 0
    agg = json.loads((tmp_path / "run" / "report.json").read_text())["aggregate"]
    for k in ("AP", "PQ", "F1", "Pre", "Rec", "mIoU", "RI"):
        assert agg[k] == 1.0
    assert agg["EPE3D"] < 1e-12


def test_eval_checkpoint_mismatch_exit_5(tmp_path):
    sets = _sets(tmp_path, train=2, test=1)
    assert main(["gen"] + sets) == 0 and main(["train"] + sets) == 0
    assert main(["eval"] + sets + ["--set", "backbone.layer_dims=[8,8]"]) == 5


def test_numeric_failure_exit_4(tmp_path, monkeypatch):
    import mbse3.cli as cli

    def boom(*a, **k):
        raise cli.NonFiniteLoss("epoch 0, scene x: l_seg=nan")

    sets = _sets(tmp_path, train=1, test=0)
    assert main(["gen"] + sets) == 0
    monkeypatch.setattr(cli, "train", boom)
    assert main(["train"] + sets) == 4


def test_threads_env_validation(tmp_path, monkeypatch):
    monkeypatch.setenv("MBSE3_THREADS", "zero")
    assert main(["gen"] + _sets(tmp_path, train=1, test=0)) == 2


def test_check_passes_and_fault_injection_fails():
    env = {"PYTHONPATH": SRC, "PATH": "/usr/bin:/bin"}
    t0 = time.perf_counter()
    ok = subprocess.run([sys.executable, "-m", "mbse3", "check"], capture_output=True, text=True, env=env)
    assert time.perf_counter() - t0 < 120
    assert ok.returncode == 0, ok.stdout + ok.stderr
    assert "FAIL" not in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "mbse3", "check", "--inject-fault"], capture_output=True, text=True,
                         env=env)
    assert bad.returncode == 1
    assert "kabsch mirrored points" in bad.stderr
