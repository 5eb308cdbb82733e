import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from rendergan.cli import main
from rendergan.config import (ExperimentConfig, build_dataclass,
                              load_experiment_config)
from rendergan.errors import ConfigurationError


def tiny_config_dict():
    """Desk-minimum configuration for fast CLI round trips."""
    return {
        "seed": 5,
        "scene": {
            "height": 64,
            "width": 64,
            "styles": {
                "source": {"gamma": 1.0},
                "target": {"gamma": 0.75, "tint": [0.06, 0.02, -0.05],
                           "noise_amp": 0.02},
            },
        },
        "enhancer": {"rad_blocks": 2},
        "discriminator": {"stem_widths": [16, 32, 32, 64, 256]},
        "sampler": {"crop": 16, "pool_patches_per_image": 4},
        "train": {"total_iters": 2, "checkpoint_every": 0},
        "metrics": {"subset_size": 8, "n_subsets": 3, "patches_per_image": 6},
    }


@pytest.fixture()
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_config_dict()))
    return path


def artifact_hashes(run_dir: Path) -> dict:
    out = {}
    for p in sorted((run_dir / "artifacts").rglob("*")):
        if p.is_file():
            out[str(p.relative_to(run_dir / "artifacts"))] = hashlib.sha256(
                p.read_bytes()).hexdigest()
    return out


def single_run_dir(out: Path) -> Path:
    runs = [p for p in out.iterdir() if p.is_dir()]
    assert len(runs) == 1
    return runs[0]


# ---------------------------------------------------------------------------
# config schema


def test_strict_schema_rejects_unknown_keys():
    with pytest.raises(ConfigurationError) as err:
        build_dataclass(ExperimentConfig, {"sede": 1})
    assert "sede" in str(err.value)
    with pytest.raises(ConfigurationError) as err:
        build_dataclass(ExperimentConfig, {"train": {"lr_zero": 1}})
    assert "train.lr_zero" in str(err.value)


def test_nested_values_and_tuples_parse():
    cfg = build_dataclass(ExperimentConfig, tiny_config_dict())
    assert cfg.scene.styles["target"].tint == (0.06, 0.02, -0.05)
    assert cfg.train.total_iters == 2
    assert cfg.discriminator.stem_widths == (16, 32, 32, 64, 256)


def test_type_errors_name_the_path():
    with pytest.raises(ConfigurationError) as err:
        build_dataclass(ExperimentConfig, {"train": {"lr0": "fast"}})
    assert "train.lr0" in str(err.value)


def test_load_rejects_bad_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{nope")
    with pytest.raises(ConfigurationError):
        load_experiment_config(path)


def test_unknown_config_key_exits_2(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"seeed": 3}))
    code = main(["generate-scenes", "--config", str(path),
                 "--out", str(tmp_path / "out"), "--n", "1"])
    assert code == 2


def test_unknown_condition_exits_2(config_file, tmp_path):
    gen = tmp_path / "gen"
    assert main(["generate-scenes", "--config", str(config_file), "--out",
                 str(gen), "--n", "2", "--style", "source"]) == 0
    ds = single_run_dir(gen) / "artifacts" / "dataset"
    code = main(["train", "--config", str(config_file), "--out",
                 str(tmp_path / "t"), "--condition", "bogus",
                 "--source", str(ds), "--target", str(ds)])
    assert code == 2


def test_missing_dataset_exits_1(config_file, tmp_path):
    code = main(["precompute-features", "--config", str(config_file),
                 "--out", str(tmp_path / "out"), "--dataset",
                 str(tmp_path / "nowhere")])
    assert code == 1


# ---------------------------------------------------------------------------
# verbs


def test_generate_scenes_is_hash_deterministic(config_file, tmp_path):
    for tag in ("a", "b"):
        assert main(["generate-scenes", "--config", str(config_file), "--out",
                     str(tmp_path / tag), "--n", "3", "--seed", "9",
                     "--style", "target"]) == 0
    ha = artifact_hashes(single_run_dir(tmp_path / "a"))
    hb = artifact_hashes(single_run_dir(tmp_path / "b"))
    assert ha == hb and len(ha) > 0


def test_full_pipeline_smoke(config_file, tmp_path):
    """generate -> precompute -> match -> train -> enhance -> evaluate ->
    layout-stats, all through the CLI with finite outputs."""
    def run(args):
        assert main(args) == 0

    gen_src = tmp_path / "gen_src"
    gen_tgt = tmp_path / "gen_tgt"
    run(["generate-scenes", "--config", str(config_file), "--out",
         str(gen_src), "--n", "10", "--seed", "1", "--style", "source"])
    run(["generate-scenes", "--config", str(config_file), "--out",
         str(gen_tgt), "--n", "10", "--seed", "2", "--style", "target"])
    src = single_run_dir(gen_src) / "artifacts" / "dataset"
    tgt = single_run_dir(gen_tgt) / "artifacts" / "dataset"

    feat_src = tmp_path / "feat_src"
    feat_tgt = tmp_path / "feat_tgt"
    run(["precompute-features", "--config", str(config_file), "--out",
         str(feat_src), "--dataset", str(src)])
    run(["precompute-features", "--config", str(config_file), "--out",
         str(feat_tgt), "--dataset", str(tgt)])

    labels_out = tmp_path / "labels"
    run(["precompute-labels", "--config", str(config_file), "--out",
         str(labels_out), "--dataset", str(src)])

    match_out = tmp_path / "match"
    run(["match-patches", "--config", str(config_file), "--out",
         str(match_out),
         "--synthetic", str(single_run_dir(feat_src) / "artifacts" / "features"),
         "--real", str(single_run_dir(feat_tgt) / "artifacts" / "features")])
    with open(single_run_dir(match_out) / "artifacts" / "matches.json") as f:
        matches = json.load(f)
    assert matches["total"] > 0

    train_out = tmp_path / "train"
    run(["train", "--config", str(config_file), "--out", str(train_out),
         "--condition", "full", "--iters", "2",
         "--source", str(src), "--target", str(tgt)])
    ckpt = single_run_dir(train_out) / "artifacts" / "ckpt_final.pt"
    assert ckpt.exists()
    log = (single_run_dir(train_out) / "artifacts" / "log.csv").read_text()
    assert "g_total" in log.splitlines()[0]

    enh_out = tmp_path / "enh"
    run(["enhance", "--config", str(config_file), "--out", str(enh_out),
         "--checkpoint", str(ckpt), "--dataset", str(src)])
    enh_dir = single_run_dir(enh_out) / "artifacts" / "enhanced"
    imgs = sorted(enh_dir.glob("enhanced_*.npy"))
    assert len(imgs) == 10
    first = np.load(imgs[0])
    assert first.shape == (64, 64, 3)
    assert np.isfinite(first).all()

    eval_out = tmp_path / "eval"
    run(["evaluate", "--config", str(config_file), "--out", str(eval_out),
         "--a", str(enh_dir), "--b", str(tgt), "--taps", "1", "2"])
    with open(single_run_dir(eval_out) / "artifacts" / "report.json") as f:
        report = json.load(f)
    assert {"kid", "skvd_l1", "skvd_l2"} <= set(report)
    for entry in report.values():
        assert np.isfinite(entry["value_x1000"])

    stats_out = tmp_path / "stats"
    run(["layout-stats", "--config", str(config_file), "--out",
         str(stats_out), "--dataset", str(tgt), "--grid-h", "8",
         "--grid-w", "8"])
    density_dir = single_run_dir(stats_out) / "artifacts" / "density"
    pgms = sorted(density_dir.glob("class_*.pgm"))
    assert len(pgms) == 5
    assert pgms[0].read_bytes().startswith(b"P5\n8 8\n255\n")


def test_evaluate_dataset_against_itself_is_null(config_file, tmp_path):
    gen = tmp_path / "gen"
    assert main(["generate-scenes", "--config", str(config_file), "--out",
                 str(gen), "--n", "10", "--seed", "4", "--style",
                 "target"]) == 0
    ds = single_run_dir(gen) / "artifacts" / "dataset"
    eval_out = tmp_path / "eval"
    assert main(["evaluate", "--config", str(config_file), "--out",
                 str(eval_out), "--a", str(ds), "--b", str(ds)]) == 0
    with open(single_run_dir(eval_out) / "artifacts" / "report.json") as f:
        report = json.load(f)
    for name, entry in report.items():
        if name.startswith("skvd"):
            assert abs(entry["value_x1000"]) <= 3.0 * entry["std_x1000"], name


def test_config_snapshot_written(config_file, tmp_path):
    assert main(["generate-scenes", "--config", str(config_file), "--out",
                 str(tmp_path / "o"), "--n", "1"]) == 0
    run_dir = single_run_dir(tmp_path / "o")
    snap = json.loads((run_dir / "config.snapshot").read_text())
    assert snap["seed"] == 5
    assert (run_dir / "log.csv").exists()


def test_config_snapshot_reruns_identically(config_file, tmp_path):
    assert main(["generate-scenes", "--config", str(config_file), "--out",
                 str(tmp_path / "first"), "--n", "2", "--seed", "3"]) == 0
    first = single_run_dir(tmp_path / "first")
    assert main(["generate-scenes", "--config", str(first / "config.snapshot"),
                 "--out", str(tmp_path / "second"), "--n", "2",
                 "--seed", "3"]) == 0
    second = single_run_dir(tmp_path / "second")
    assert artifact_hashes(first) == artifact_hashes(second)
