"""Command-line entry point binding the modules into reproducible runs.

Each verb writes its artifacts under `<out>/<verb>-<timestamp>-<seed>/`
containing a config snapshot, an `artifacts/` directory, and a `log.csv`.
Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .backbone import FrozenBackbone, pooled_features
from .config import ExperimentConfig, load_experiment_config, save_config_snapshot
from .container import read_dataset, write_dataset
from .discriminator import CachedLabelProvider
from .errors import ConfigurationError
from .metrics import MetricProtocol, kid, layout_density, skvd_family
from .sampler import (MatchIndex, build_patch_pool, read_embedding_store,
                      write_embedding_store)
from .scenegen import CLASS_NAMES, generate_dataset
from .trainer import (DatasetArrays, Trainer, enhance_dataset,
                      resolve_condition)

VERBS = ("generate-scenes", "precompute-features", "precompute-labels",
         "match-patches", "train", "enhance", "evaluate", "layout-stats")


def _make_run_dir(out: str, verb: str, seed: int) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run = Path(out) / f"{verb}-{stamp}-{seed}"
    # Keep run directories unique even for back-to-back invocations.
    suffix = 0
    candidate = run
    while candidate.exists():
        suffix += 1
        candidate = Path(str(run) + f"-{suffix}")
    (candidate / "artifacts").mkdir(parents=True)
    return candidate


def _write_log(run_dir: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(run_dir / "log.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _load_eval_side(path: str) -> tuple[np.ndarray, np.ndarray]:
    """A side of an evaluation: either a dataset directory or an `enhance`
    output directory (enhanced images plus the source dataset's labels)."""
    p = Path(path)
    if (p / "enhanced_manifest.json").exists():
        with open(p / "enhanced_manifest.json", encoding="utf-8") as f:
            meta = json.load(f)
        images = np.stack([np.load(p / name) for name in meta["files"]])
        labels = np.stack([s.labels for s in read_dataset(meta["source_dataset"])])
        return images, labels.astype(np.int64)
    samples = read_dataset(p)
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.labels for s in samples]).astype(np.int64)
    return images, labels


def _dataset_arrays(path: str) -> DatasetArrays:
    return DatasetArrays.from_samples(read_dataset(path))


# ---------------------------------------------------------------------------
# Verb implementations


def verb_generate_scenes(cfg: ExperimentConfig, args, run_dir: Path) -> list[dict]:
    samples = generate_dataset(cfg.scene, args.n, args.seed, args.style)
    out = run_dir / "artifacts" / "dataset"
    write_dataset(samples, out, config=cfg.scene, dataset_seed=args.seed)
    return [{"verb": "generate-scenes", "n": len(samples), "style": args.style,
             "out": str(out)}]


def verb_precompute_features(cfg: ExperimentConfig, args, run_dir: Path) -> list[dict]:
    samples = read_dataset(args.dataset)
    backbone = FrozenBackbone(cfg.backbone)
    rng = np.random.default_rng([args.seed, 0xFEA7])
    refs = build_patch_pool(samples, Path(args.dataset).name, backbone,
                            cfg.sampler.crop, cfg.sampler.pool_patches_per_image,
                            rng, embed=True)
    out = run_dir / "artifacts" / "features"
    write_embedding_store(out, refs)
    return [{"verb": "precompute-features", "patches": len(refs), "out": str(out)}]


def verb_precompute_labels(cfg: ExperimentConfig, args, run_dir: Path) -> list[dict]:
    samples = read_dataset(args.dataset)
    out = run_dir / "artifacts" / "labels"
    provider = CachedLabelProvider(out)
    written = provider.precompute(samples)
    return [{"verb": "precompute-labels", "cached": written, "out": str(out)}]


def verb_match_patches(cfg: ExperimentConfig, args, run_dir: Path) -> list[dict]:
    syn_refs = read_embedding_store(args.synthetic)
    real_refs = read_embedding_store(args.real)
    index = MatchIndex(real_refs, np.stack([r.embedding for r in real_refs]),
                       threshold=args.threshold)
    matches = {str(i): index.query(ref.embedding).tolist()
               for i, ref in enumerate(syn_refs)}
    matched = sum(1 for v in matches.values() if v)
    out = run_dir / "artifacts" / "matches.json"
    with open(out, "w", encoding="utf-8") as f:
        json.dump({"threshold": args.threshold, "matched": matched,
                   "total": len(syn_refs), "matches": matches}, f)
    return [{"verb": "match-patches", "matched": matched,
             "total": len(syn_refs), "out": str(out)}]


def verb_train(cfg: ExperimentConfig, args, run_dir: Path) -> list[dict]:
    source = _dataset_arrays(args.source or cfg.source_dir)
    target = _dataset_arrays(args.target or cfg.target_dir)
    backbone = FrozenBackbone(cfg.backbone)
    trainer = Trainer(source=source, target=target, condition=args.condition,
                      train_cfg=cfg.train, sampler_cfg=cfg.sampler,
                      encoder_cfg=cfg.encoder, enhancer_cfg=cfg.enhancer,
                      disc_cfg=cfg.discriminator, backbone=backbone,
                      seed=args.seed, n_classes=cfg.scene.n_classes)
    iters = args.iters if args.iters is not None else cfg.train.total_iters
    trainer.run(total_iters=iters, out_dir=run_dir / "artifacts")
    return [{"verb": "train", "condition": args.condition, "iters": iters,
             "out": str(run_dir / "artifacts")}]


def verb_enhance(cfg: ExperimentConfig, args, run_dir: Path) -> list[dict]:
    data = _dataset_arrays(args.dataset)
    ckpt = torch.load(args.checkpoint, weights_only=False)
    spec = resolve_condition(ckpt["condition"])
    backbone = FrozenBackbone(cfg.backbone)
    torch.manual_seed(ckpt["seed"])
    from .trainer import build_networks
    nets = build_networks(spec, cfg.encoder, cfg.enhancer, cfg.discriminator,
                          backbone, cfg.scene.n_classes)
    nets.enhancer.load_state_dict(ckpt["enhancer"])
    if nets.encoder is not None:
        nets.encoder.load_state_dict(ckpt["encoder"])
    enhanced = enhance_dataset(nets, spec, data)
    out = run_dir / "artifacts" / "enhanced"
    out.mkdir(parents=True)
    files = []
    for i in range(enhanced.shape[0]):
        name = f"enhanced_{i:05d}.npy"
        np.save(out / name, enhanced[i])
        files.append(name)
    with open(out / "enhanced_manifest.json", "w", encoding="utf-8") as f:
        json.dump({"kind": "enhanced", "files": files,
                   "source_dataset": str(Path(args.dataset).resolve())}, f, indent=1)
    return [{"verb": "enhance", "n": len(files), "out": str(out)}]


def verb_evaluate(cfg: ExperimentConfig, args, run_dir: Path) -> list[dict]:
    images_a, labels_a = _load_eval_side(args.a)
    images_b, labels_b = _load_eval_side(args.b)
    backbone = FrozenBackbone(cfg.backbone)
    proto = MetricProtocol(subset_size=cfg.metrics.subset_size,
                           n_subsets=cfg.metrics.n_subsets,
                           patches_per_image=cfg.metrics.patches_per_image,
                           seed=args.seed)
    feats_a = pooled_features(backbone, images_a)
    feats_b = pooled_features(backbone, images_b)
    reports = [kid(feats_a, feats_b, proto.subset_size, proto.n_subsets,
                   seed=proto.seed)]
    taps = tuple(int(t) for t in args.taps)
    family = skvd_family(images_a, labels_a, images_b, labels_b, backbone,
                         taps, proto)
    reports.extend(family[t] for t in taps)
    out = run_dir / "artifacts"
    payload = {r.name: r.as_dict() for r in reports}
    with open(out / "report.json", "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["name", "value_x1000", "std_x1000", "subset_size",
                         "n_subsets"])
        for r in reports:
            writer.writerow([r.name, r.value_x1000, r.std_x1000,
                             r.subset_size, r.n_subsets])
    return [{"verb": "evaluate", **{r.name: r.value_x1000 for r in reports}}]


def _write_pgm(path: Path, gray: np.ndarray) -> None:
    data = np.clip(np.round(gray * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def verb_layout_stats(cfg: ExperimentConfig, args, run_dir: Path) -> list[dict]:
    samples = read_dataset(args.dataset)
    labels = np.stack([s.labels for s in samples]).astype(np.int64)
    density = layout_density(labels, (args.grid_h, args.grid_w),
                             n_classes=cfg.scene.n_classes)
    out = run_dir / "artifacts" / "density"
    out.mkdir(parents=True)
    for c, name in enumerate(CLASS_NAMES):
        _write_pgm(out / f"class_{name}.pgm", density[c])
    np.save(out / "density.npy", density)
    check = float(np.abs(density.sum(axis=0) - 1.0).max())
    return [{"verb": "layout-stats", "classes": density.shape[0],
             "partition_residual": check, "out": str(out)}]


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rendergan",
        description="G-buffer-conditioned image enhancement experiments")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None,
                       help="overrides the config seed")

    p = sub.add_parser("generate-scenes")
    common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--style", choices=("source", "target"), default="source")

    p = sub.add_parser("precompute-features")
    common(p)
    p.add_argument("--dataset", required=True)

    p = sub.add_parser("precompute-labels")
    common(p)
    p.add_argument("--dataset", required=True)

    p = sub.add_parser("match-patches")
    common(p)
    p.add_argument("--synthetic", required=True)
    p.add_argument("--real", required=True)
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("train")
    common(p)
    p.add_argument("--condition", default="full")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--source", default=None)
    p.add_argument("--target", default=None)

    p = sub.add_parser("enhance")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)

    p = sub.add_parser("evaluate")
    common(p)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--taps", nargs="+", default=["1", "2", "3", "4", "5"])

    p = sub.add_parser("layout-stats")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--grid-h", type=int, default=16)
    p.add_argument("--grid-w", type=int, default=16)
    return parser


_VERB_FUNCS = {
    "generate-scenes": verb_generate_scenes,
    "precompute-features": verb_precompute_features,
    "precompute-labels": verb_precompute_labels,
    "match-patches": verb_match_patches,
    "train": verb_train,
    "enhance": verb_enhance,
    "evaluate": verb_evaluate,
    "layout-stats": verb_layout_stats,
}


def run_verb(verb: str, cfg: ExperimentConfig, args, run_dir: Path) -> list[dict]:
    if verb not in _VERB_FUNCS:
        raise ConfigurationError(f"unknown verb '{verb}'")
    return _VERB_FUNCS[verb](cfg, args, run_dir)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_experiment_config(args.config)
        if args.seed is None:
            args.seed = cfg.seed
        run_dir = _make_run_dir(args.out, args.verb, args.seed)
        save_config_snapshot(cfg, run_dir / "config.snapshot")
        rows = run_verb(args.verb, cfg, args, run_dir)
        _write_log(run_dir, rows)
        print(f"[{args.verb}] run dir: {run_dir}")
        for row in rows:
            print(f"[{args.verb}] " + ", ".join(f"{k}={v}" for k, v in row.items()
                                                if k != "verb"))
        return 0
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
