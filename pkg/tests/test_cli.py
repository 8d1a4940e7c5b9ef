import hashlib
import json
import subprocess
import sys
from collections import Counter
from pathlib import Path

import pytest
import yaml

from bevocc.cli import main
from bevocc.config import ConfigError, layout_sequence, resolve_config

SMALL = ["--scenes", "3", "--frames", "2", "--image-size", "64", "36", "--vehicles", "2", "4",
         "--pedestrians", "1", "2"]
GRID = ["--grid-size", "24", "--resolution", "2.0", "--grid-max-range", "60"]
MODEL = ["--channels", "8", "--bottleneck", "8", "--head-channels", "8", "--deform-heads", "2",
         "--deform-points", "2"]


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["synth", "--data-root", str(root), "--seed", "3", *SMALL]) == 0
    return root


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    argv = ["train", "--data-root", str(dataset), "--out", str(out), "--aggregator", "avgpool", "--background",
            "--epochs", "1", "--lr", "0.01", "--heldout", "1", *GRID, *MODEL]
    assert main(argv) == 0
    return out / "model.pt"


# ---------------------------------------------------------------- config


def test_layout_mix_apportions_8_6_6():
    seq = layout_sequence("standard", 20, seed=0)
    assert Counter(seq) == {"three_way": 8, "four_way": 6, "segment": 6}
    assert seq != sorted(seq)
    assert Counter(layout_sequence("standard", 10, seed=0)) == {"three_way": 4, "four_way": 3, "segment": 3}
    assert layout_sequence("segment", 3, seed=0) == ["segment"] * 3
    assert layout_sequence("standard", 20, seed=5) == layout_sequence("standard", 20, seed=5)


def test_layout_mix_alias(tmp_path):
    root = tmp_path / "ds"
    assert main(["synth", "--data-root", str(root), "--layout-mix", "paper", "--scenes", "20", "--frames", "1",
                 "--image-size", "16", "9", "--cameras", "1", "--vehicles", "0", "0", "--pedestrians", "0", "0"]) == 0
    manifest = json.loads((root / "manifest.json").read_text())
    assert Counter(s["layout"] for s in manifest["scenes"]) == {"three_way": 8, "four_way": 6, "segment": 6}
    archived = yaml.safe_load((root / "synth_config.yaml").read_text())
    assert archived["scene"]["layout_mix"] == "standard"


def test_precedence_flag_over_env_over_file(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text(yaml.safe_dump({"data_root": "/from/file", "seed": 4, "grid": {"size": 100}}))
    cfg = resolve_config(f, {}, env={})
    assert (cfg.data_root, cfg.seed, cfg.grid.size, cfg.grid.resolution) == ("/from/file", 4, 100, 0.31)
    cfg = resolve_config(f, {}, env={"BEVOCC_DATA_ROOT": "/from/env"})
    assert cfg.data_root == "/from/env"
    cfg = resolve_config(f, {"data_root": "/from/flag", "grid": {"size": 7}}, env={"BEVOCC_DATA_ROOT": "/from/env"})
    assert (cfg.data_root, cfg.grid.size, cfg.seed) == ("/from/flag", 7, 4)


def test_unknown_and_invalid_keys_rejected(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text(yaml.safe_dump({"grid": {"sise": 10}}))
    with pytest.raises(ConfigError, match="sise"):
        resolve_config(f, {}, env={})
    with pytest.raises(ConfigError):
        resolve_config(None, {"grid": {"resolution": -1.0}}, env={})
    with pytest.raises(ConfigError, match="not found"):
        resolve_config(tmp_path / "missing.yaml", {}, env={})
    assert main(["train", "--config", str(f), "--data-root", str(tmp_path)]) == 1


# ---------------------------------------------------------------- exit codes


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert main(["train", "--help"]) == 0
    assert "synth" in capsys.readouterr().out


def test_usage_errors_exit_one(capsys, tmp_path):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["train", "--aggregator", "mlp"]) == 1
    assert main(["train", "--epochs", "many"]) == 1
    assert main(["eval", "--data-root", str(tmp_path)]) == 1  # needs --checkpoint or --oracle
    assert "error" in capsys.readouterr().err


def test_missing_data_root_exit_one(monkeypatch, capsys):
    monkeypatch.delenv("BEVOCC_DATA_ROOT", raising=False)
    assert main(["eval", "--oracle"]) == 1
    assert "BEVOCC_DATA_ROOT" in capsys.readouterr().err


def test_missing_dataset_exit_two_names_path(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["eval", "--oracle", "--data-root", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "bevocc", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "predict" in res.stdout


# ---------------------------------------------------------------- synth


def test_synth_is_deterministic(dataset, tmp_path):
    again = tmp_path / "again"
    assert main(["synth", "--data-root", str(again), "--seed", "3", *SMALL]) == 0
    assert tree_digest(again) == tree_digest(dataset)
    other = tmp_path / "other"
    assert main(["synth", "--data-root", str(other), "--seed", "4", *SMALL]) == 0
    assert tree_digest(other) != tree_digest(dataset)


def test_synth_layout_and_archived_config(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert [s["scene_id"] for s in manifest["scenes"]] == ["scene000", "scene001", "scene002"]
    archived = yaml.safe_load((dataset / "synth_config.yaml").read_text())
    assert set(archived) == {"seed", "scene"}
    assert archived["scene"]["num_frames"] == 2 and archived["seed"] == 3


def test_synth_env_data_root(monkeypatch, tmp_path):
    root = tmp_path / "envds"
    monkeypatch.setenv("BEVOCC_DATA_ROOT", str(root))
    assert main(["synth", "--scenes", "1", "--frames", "1", "--image-size", "32", "18"]) == 0
    assert (root / "manifest.json").exists()


def test_synth_refuses_to_overwrite(tmp_path, capsys):
    root = tmp_path / "ds"
    argv = ["synth", "--data-root", str(root), "--scenes", "1", "--frames", "1", "--image-size", "32", "18"]
    assert main(argv) == 0
    assert main(argv) == 1
    assert "--force" in capsys.readouterr().err
    assert main([*argv, "--force"]) == 0
    stranger = tmp_path / "notes"
    stranger.mkdir()
    (stranger / "keep.txt").write_text("x")
    assert main(["synth", "--data-root", str(stranger), "--force", "--scenes", "1", "--frames", "1"]) == 1
    assert (stranger / "keep.txt").exists()


# ---------------------------------------------------------------- train / eval / predict / ablate


def test_train_outputs(checkpoint):
    out = checkpoint.parent
    assert checkpoint.exists()
    recs = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["split"] for r in recs] == ["train", "heldout"]
    report = json.loads((out / "eval_heldout.json").read_text())
    assert list(report["per_scene"]) == ["scene002"]
    archived = yaml.safe_load((out / "run_config.yaml").read_text())
    assert set(archived) == {"seed", "grid", "model", "train"}
    assert "data_root" not in archived


def test_train_with_seed_is_reproducible(dataset, tmp_path):
    logs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        argv = ["train", "--data-root", str(dataset), "--out", str(out), "--seed", "9", "--aggregator", "conv",
                "--epochs", "1", "--lr", "0.01", "--heldout", "1", *GRID, *MODEL]
        assert main(argv) == 0
        logs.append((out / "metrics.jsonl").read_bytes())
    assert logs[0] == logs[1]


def test_eval_oracle_scores_one(dataset, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--oracle", "--data-root", str(dataset), "--out", str(out), "--split", "all", *GRID]) == 0
    report = json.loads((out / "eval.json").read_text())
    assert report["aggregate"]["iou_vehicle"] == 1.0 and len(report["per_scene"]) == 3


def test_eval_checkpoint_and_mismatch(dataset, checkpoint, tmp_path, capsys):
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(checkpoint), "--data-root", str(dataset), "--out", str(out),
                 "--heldout", "1"]) == 0
    assert json.loads((out / "eval.json").read_text())["model_id"] == "avgpool+bg"
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(checkpoint), "--data-root", str(dataset), "--out", str(out),
                 "--aggregator", "conv"]) == 1
    err = capsys.readouterr().err
    assert "aggregator" in err and "avgpool" in err and "conv" in err


def test_predict_writes_heatmaps(dataset, checkpoint, tmp_path):
    out = tmp_path / "pred"
    assert main(["predict", "--checkpoint", str(checkpoint), "--data-root", str(dataset), "--out", str(out),
                 "--scene", "scene001", "--frame", "0", "1", "--scale", "2"]) == 0
    names = sorted(p.name for p in out.glob("*.png"))
    assert names == sorted(f"scene001_frame{f:04d}_{k}.png" for f in (0, 1) for k in ("pred", "gt", "compare"))


def test_ablate_single_camera(dataset, checkpoint, tmp_path):
    out = tmp_path / "ab"
    assert main(["ablate", "--mode", "single-camera", "--camera", "1", "--checkpoint", str(checkpoint),
                 "--data-root", str(dataset), "--out", str(out), "--heldout", "1"]) == 0
    res = json.loads((out / "single_camera.json").read_text())
    assert res["single"]["tag"] == "camera1-only" and res["all"]["tag"] == "all-cameras"
    assert main(["ablate", "--mode", "single-camera", "--camera", "9", "--checkpoint", str(checkpoint),
                 "--data-root", str(dataset), "--out", str(out)]) == 1


def test_ablate_grid_size(dataset, tmp_path):
    out = tmp_path / "sweep"
    assert main(["ablate", "--mode", "grid-size", "--sizes", "12", "24", "--extent", "48", "--data-root",
                 str(dataset), "--out", str(out), "--heldout", "1", "--epochs", "1", "--lr", "0.01",
                 *GRID, *MODEL]) == 0
    rows = json.loads((out / "grid_sweep.json").read_text())
    assert [(r["size"], r["resolution"]) for r in rows] == [(12, 4.0), (24, 2.0)]
    assert "24x24" in (out / "grid_sweep.txt").read_text()


def test_finetune_reports_both(dataset, checkpoint, tmp_path):
    out = tmp_path / "ft"
    assert main(["finetune", "--checkpoint", str(checkpoint), "--data-root", str(dataset), "--out", str(out),
                 "--heldout", "1", "--samples", "3", "--ft-epochs", "1", "--freeze", "agg_head"]) == 0
    rep = json.loads((out / "finetune_report.json").read_text())
    assert rep["freeze"] == "agg_head" and len(rep["samples"]) == 3
    assert {"zero_shot", "finetuned"} <= set(rep)
    assert main(["finetune", "--checkpoint", str(checkpoint), "--data-root", str(dataset), "--out", str(out),
                 "--heldout", "1", "--samples", "500"]) == 2
