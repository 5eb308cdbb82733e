"""Adversarial training loop.

Least-squares GAN objectives with targets 1 (real) and 0 (fake), a
structure-retention perceptual term comparing the enhanced patch to its own
rendered input, an R1-style gradient penalty on real data, per-network
global-norm gradient clipping, a halving learning-rate schedule, and
adaptive per-level throttling that randomly skips a discriminator's update
as its running accuracy pulls ahead of the target.

Named conditions reconfigure the pipeline for controlled experiments
(sampling policy and crop, G-buffer ingestion, discriminator variants).
"""

from __future__ import annotations

import copy
import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import FrozenBackbone, normalized_feature_distance
from .discriminator import (DiscriminatorConfig, PatchGANEnsemble,
                            PerceptualEnsemble)
from .encoder import EncoderConfig, GBufferEncoder
from .enhancer import Enhancer, EnhancerConfig
from .errors import ConfigurationError
from .sampler import (MatchedPairSampler, MatchIndex, PatchRef,
                      build_patch_pool, crop_patches)
from .scenegen import STACK_CHANNELS, SceneSample


@dataclass
class TrainConfig:
    lpips_weight: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0001
    lr0: float = 0.0001
    lr_halving_period: int = 100_000
    grad_clip: float = 1000.0
    gp_weight: float = 0.06
    batch_size: int = 1
    total_iters: int = 1_000_000      # controlled experiments use 600_000
    r_target: float = 0.8
    throttle_gain: float = 2.0
    p_max: float = 0.9
    ema_decay: float = 0.99
    checkpoint_every: int = 500
    log_every: int = 1

    def validate(self) -> None:
        if self.total_iters < 1:
            raise ConfigurationError("total_iters must be >= 1")
        for name in ("lpips_weight", "weight_decay", "gp_weight", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")


@dataclass
class SamplerSettings:
    policy: str = "matched"
    crop: int = 24
    pool_patches_per_image: int = 24
    threshold: float = 0.5


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Learning rate at an iteration: halved every lr_halving_period."""
    if iteration < 0:
        raise ConfigurationError("iteration must be >= 0")
    return config.lr0 * 2.0 ** (-(iteration // config.lr_halving_period))


def throttle_probability(r: float, config: TrainConfig) -> float:
    """Probability of skipping a discriminator's backward pass given its
    running accuracy r."""
    return float(min(max(config.throttle_gain * (r - config.r_target), 0.0),
                     config.p_max))


def clip_gradients_(parameters, max_norm: float) -> float:
    """Scale gradients so their global norm is at most max_norm; gradients
    already within the bound pass through unchanged. Returns the pre-clip
    norm."""
    grads = [p.grad for p in parameters if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum(g.pow(2).sum() for g in grads))
    total_f = float(total)
    if total_f > max_norm and total_f > 0.0:
        scale = max_norm / total
        for g in grads:
            g.mul_(scale)
    return total_f


def r1_penalty(score_map: torch.Tensor, real_input: torch.Tensor) -> torch.Tensor:
    """Squared gradient norm of the summed score map w.r.t. the real input,
    averaged over the batch; differentiable for the regularizer update."""
    grad, = torch.autograd.grad(score_map.sum(), real_input,
                                create_graph=True, retain_graph=True)
    return grad.pow(2).sum() / real_input.shape[0]


def perceptual_distance_from_taps(taps_a: list[torch.Tensor],
                                  taps_b: list[torch.Tensor]) -> torch.Tensor:
    total = taps_a[0].new_zeros(())
    for fa, fb in zip(taps_a, taps_b):
        total = total + normalized_feature_distance(fa, fb)
    return total / len(taps_a)


def adversarial_generator_loss(scores: dict[int, torch.Tensor]) -> torch.Tensor:
    """Least-squares generator objective: every fake score is pushed toward
    the real target 1."""
    first = next(iter(scores.values()))
    total = first.new_zeros(())
    for s in scores.values():
        total = total + (s - 1.0).pow(2).mean()
    return total


# ---------------------------------------------------------------------------
# Conditions


@dataclass(frozen=True)
class ConditionSpec:
    name: str
    modulation: str = "rad"          # rad | instance | spade
    use_encoder: bool = True
    concat_input: bool = False
    zero_gbuffers: bool = False
    sampler_policy: str = "matched"
    crop: int | None = None          # None -> sampler settings crop
    discriminator: str = "perceptual"
    use_projection: bool = True
    adaptive: bool = True


_CONDITIONS = {
    "full": ConditionSpec("full"),
    "no-gbuffer": ConditionSpec("no-gbuffer", modulation="instance",
                                use_encoder=False, concat_input=True,
                                zero_gbuffers=True),
    "concat": ConditionSpec("concat", modulation="instance",
                            use_encoder=False, concat_input=True),
    "spade": ConditionSpec("spade", modulation="spade", use_encoder=False),
    "patchgan": ConditionSpec("patchgan", discriminator="patchgan",
                              use_projection=False),
    "no-projection": ConditionSpec("no-projection", use_projection=False),
    "no-adaptive-backprop": ConditionSpec("no-adaptive-backprop", adaptive=False),
}


def condition_names() -> list[str]:
    return sorted(_CONDITIONS) + ["uniform-crop-<N>"]


def resolve_condition(name: str) -> ConditionSpec:
    if name in _CONDITIONS:
        return _CONDITIONS[name]
    m = re.fullmatch(r"uniform-crop-(\d+)", name)
    if m:
        return ConditionSpec(name, sampler_policy="uniform", crop=int(m.group(1)))
    raise ConfigurationError(
        f"unknown condition '{name}'; registered: {', '.join(condition_names())}")


# ---------------------------------------------------------------------------
# Data plumbing


@dataclass
class DatasetArrays:
    images: np.ndarray    # N x H x W x 3 float32
    labels: np.ndarray    # N x H x W int64
    stacks: np.ndarray    # N x H x W x C float32
    masks: np.ndarray     # N x C_obj x H x W float32

    @classmethod
    def from_samples(cls, samples: list[SceneSample]) -> "DatasetArrays":
        return cls(
            images=np.stack([s.image for s in samples]),
            labels=np.stack([s.labels for s in samples]).astype(np.int64),
            stacks=np.stack([s.gbuffers.stack() for s in samples]),
            masks=np.stack([s.gbuffers.object_masks for s in samples]).astype(np.float32),
        )

    @property
    def size(self) -> tuple[int, int]:
        return self.labels.shape[1], self.labels.shape[2]

    def __len__(self) -> int:
        return self.images.shape[0]


def _to_t(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr))


def synthetic_patch_tensors(data: DatasetArrays, ref: PatchRef) -> dict:
    sl_y = slice(ref.y, ref.y + ref.side)
    sl_x = slice(ref.x, ref.x + ref.side)
    i = ref.image_id
    return {
        "image": _to_t(data.images[i, sl_y, sl_x]).permute(2, 0, 1).unsqueeze(0),
        "stack": _to_t(data.stacks[i, sl_y, sl_x]).permute(2, 0, 1).unsqueeze(0),
        "masks": _to_t(data.masks[i, :, sl_y, sl_x]).unsqueeze(0),
        "labels": _to_t(data.labels[i, sl_y, sl_x]).unsqueeze(0),
    }


def real_patch_tensors(data: DatasetArrays, ref: PatchRef) -> dict:
    sl_y = slice(ref.y, ref.y + ref.side)
    sl_x = slice(ref.x, ref.x + ref.side)
    i = ref.image_id
    return {
        "image": _to_t(data.images[i, sl_y, sl_x]).permute(2, 0, 1).unsqueeze(0),
        "labels": _to_t(data.labels[i, sl_y, sl_x]).unsqueeze(0),
    }


# ---------------------------------------------------------------------------
# Network assembly


@dataclass
class TrainingNetworks:
    backbone: FrozenBackbone
    enhancer: Enhancer
    encoder: GBufferEncoder | None
    discriminator: nn.Module    # PerceptualEnsemble or PatchGANEnsemble

    def generator_modules(self) -> list[nn.Module]:
        mods = [self.enhancer]
        if self.encoder is not None:
            mods.append(self.encoder)
        return mods

    def train_mode(self) -> None:
        for m in self.generator_modules():
            m.train()
        self.discriminator.train()

    def eval_mode(self) -> None:
        for m in self.generator_modules():
            m.eval()
        self.discriminator.eval()


def build_networks(spec: ConditionSpec, encoder_cfg: EncoderConfig,
                   enhancer_cfg: EnhancerConfig, disc_cfg: DiscriminatorConfig,
                   backbone: FrozenBackbone, n_classes: int) -> TrainingNetworks:
    raw_channels = STACK_CHANNELS + n_classes
    encoder = None
    enh_kwargs: dict = {}
    e_cfg = EnhancerConfig(**{**enhancer_cfg.__dict__})
    e_cfg.modulation = spec.modulation
    if spec.modulation == "rad":
        encoder = GBufferEncoder(encoder_cfg)
        if tuple(encoder_cfg.scales) != tuple(e_cfg.scales):
            raise ConfigurationError(
                f"encoder scales {encoder_cfg.scales} must equal trunk scales "
                f"{e_cfg.scales}")
        enh_kwargs["gbuf_channels"] = encoder_cfg.channel_map()
    if spec.modulation == "spade":
        enh_kwargs["raw_channels"] = raw_channels
    if spec.concat_input:
        e_cfg.in_channels = 3 + raw_channels
    enhancer = Enhancer(e_cfg, **enh_kwargs)
    d_cfg = DiscriminatorConfig(**{**disc_cfg.__dict__})
    d_cfg.n_classes = n_classes
    d_cfg.use_projection = spec.use_projection
    if spec.discriminator == "patchgan":
        discriminator = PatchGANEnsemble(d_cfg)
    else:
        discriminator = PerceptualEnsemble(backbone, d_cfg)
    return TrainingNetworks(backbone, enhancer, encoder, discriminator)


def enhance_forward(nets: TrainingNetworks, spec: ConditionSpec,
                    image: torch.Tensor, stack: torch.Tensor,
                    masks: torch.Tensor) -> torch.Tensor:
    if spec.use_encoder:
        pyramid = nets.encoder(stack, masks)
        return nets.enhancer(image, pyramid)
    raw = torch.cat([stack, masks], dim=1)
    if spec.zero_gbuffers:
        raw = torch.zeros_like(raw)
    if spec.modulation == "spade":
        return nets.enhancer(image, raw)
    if spec.concat_input:
        return nets.enhancer(torch.cat([image, raw], dim=1), None)
    return nets.enhancer(image, None)


# ---------------------------------------------------------------------------
# Trainer


class Trainer:
    """Owns all mutable training state; checkpoints capture it completely,
    so a resumed single-threaded run is bit-identical to an uninterrupted
    one."""

    def __init__(self, *, source: DatasetArrays, target: DatasetArrays,
                 condition: str | ConditionSpec, train_cfg: TrainConfig,
                 sampler_cfg: SamplerSettings, encoder_cfg: EncoderConfig,
                 enhancer_cfg: EnhancerConfig, disc_cfg: DiscriminatorConfig,
                 backbone: FrozenBackbone | None = None, seed: int = 0,
                 n_classes: int = 5):
        self.spec = (condition if isinstance(condition, ConditionSpec)
                     else resolve_condition(condition))
        self.cfg = train_cfg
        self.cfg.validate()
        self.sampler_cfg = sampler_cfg
        self.seed = seed
        self.source = source
        self.target = target
        self.crop = self.spec.crop or sampler_cfg.crop
        h, w = source.size
        if self.crop > min(h, w):
            raise ConfigurationError(f"crop {self.crop} exceeds image size")

        torch.manual_seed(seed)
        self.backbone = backbone or FrozenBackbone()
        self.nets = build_networks(self.spec, encoder_cfg, enhancer_cfg,
                                   disc_cfg, self.backbone, n_classes)
        self.rng = np.random.default_rng(seed)
        self._build_optimizers()
        self._build_sampler()
        self.iteration = 0

    # -- setup ------------------------------------------------------------

    def _build_optimizers(self) -> None:
        cfg = self.cfg

        def adam(params):
            params = list(params)
            try:
                return torch.optim.Adam(params, lr=cfg.lr0,
                                        betas=(cfg.beta1, cfg.beta2),
                                        weight_decay=cfg.weight_decay, fused=True)
            except (RuntimeError, ValueError):
                return torch.optim.Adam(params, lr=cfg.lr0,
                                        betas=(cfg.beta1, cfg.beta2),
                                        weight_decay=cfg.weight_decay, foreach=True)
        self.opt_enhancer = adam(self.nets.enhancer.parameters())
        self.opt_encoder = (adam(self.nets.encoder.parameters())
                            if self.nets.encoder is not None else None)
        disc = self.nets.discriminator
        level_modules = disc.levels if hasattr(disc, "levels") else disc.nets
        self.level_modules = list(level_modules)
        self.opt_levels = [adam(m.parameters()) for m in self.level_modules]

    def _build_sampler(self) -> None:
        # The pool rng is separate from the training rng so a resumed run
        # rebuilds the identical pool without disturbing the training stream.
        if self.spec.sampler_policy != "matched":
            self.pair_sampler = None
            return
        pool_rng = np.random.default_rng([self.seed, 0x9001])
        syn_refs = build_patch_pool(
            _as_sample_views(self.source), "source", self.backbone, self.crop,
            self.sampler_cfg.pool_patches_per_image, pool_rng, embed=True)
        real_refs = build_patch_pool(
            _as_sample_views(self.target), "target", self.backbone, self.crop,
            self.sampler_cfg.pool_patches_per_image, pool_rng, embed=True)
        index = MatchIndex(real_refs,
                           np.stack([r.embedding for r in real_refs]),
                           threshold=self.sampler_cfg.threshold)
        self.pair_sampler = MatchedPairSampler(syn_refs, index)

    # -- per-iteration pieces ----------------------------------------------

    def _draw_pair(self) -> tuple[PatchRef, PatchRef]:
        if self.pair_sampler is not None:
            return self.pair_sampler.sample_training_pair(self.rng)
        syn_img = int(self.rng.integers(0, len(self.source)))
        syn = crop_patches(_SampleView(self.source, syn_img), 1, self.rng,
                           "uniform", self.crop, dataset_id="source",
                           image_id=syn_img)[0]
        real_img = int(self.rng.integers(0, len(self.target)))
        real = crop_patches(_SampleView(self.target, real_img), 1, self.rng,
                            "uniform", self.crop, dataset_id="target",
                            image_id=real_img)[0]
        return syn, real

    def _skip_draws(self) -> np.ndarray:
        return self.rng.uniform(size=len(self.level_modules))

    def _score_fake(self, taps_fake: list[torch.Tensor],
                    enhanced: torch.Tensor, labels: torch.Tensor
                    ) -> dict[int, torch.Tensor]:
        disc = self.nets.discriminator
        if isinstance(disc, PatchGANEnsemble):
            return disc.score_image(enhanced, None).scores
        lab = labels if self.spec.use_projection else None
        return disc.score_taps(taps_fake, lab)

    def generator_step(self, syn: dict) -> dict:
        cfg = self.cfg
        lr = lr_at(self.iteration, cfg)
        for opt in filter(None, [self.opt_enhancer, self.opt_encoder]):
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
        for opt in self.opt_levels:
            opt.zero_grad(set_to_none=True)

        enhanced = enhance_forward(self.nets, self.spec, syn["image"],
                                   syn["stack"], syn["masks"])
        taps_fake = self.backbone(enhanced)
        # Freeze discriminator parameters while scoring the fake so the
        # generator backward skips their weight-gradient kernels.
        disc_params = list(self.nets.discriminator.parameters())
        for p in disc_params:
            p.requires_grad_(False)
        scores = self._score_fake(taps_fake, enhanced, syn["labels"])
        adv = adversarial_generator_loss(scores)
        with torch.no_grad():
            taps_input = self.backbone(syn["image"])
        percep = perceptual_distance_from_taps(taps_fake, taps_input)
        loss = adv + cfg.lpips_weight * percep
        if not math.isfinite(float(loss.detach())):
            raise RuntimeError(
                f"non-finite generator loss at iteration {self.iteration}: "
                f"adv={float(adv.detach())}, percep={float(percep.detach())}")
        loss.backward()
        for p in disc_params:
            p.requires_grad_(True)
        for module, opt in [(self.nets.enhancer, self.opt_enhancer),
                            (self.nets.encoder, self.opt_encoder)]:
            if module is None:
                continue
            clip_gradients_(list(module.parameters()), cfg.grad_clip)
            opt.step()
        return {
            "g_adv": float(adv.detach()),
            "g_percep": float(percep.detach()),
            "g_total": float(loss.detach()),
            "enhanced": enhanced.detach(),
            "taps_fake": [t.detach() for t in taps_fake],
            "fake_scores": {k: s.detach() for k, s in scores.items()},
        }

    def discriminator_step(self, real: dict, syn_labels: torch.Tensor,
                           g_out: dict, skip_draws: np.ndarray) -> dict:
        cfg = self.cfg
        disc = self.nets.discriminator
        lr = lr_at(self.iteration, cfg)
        for opt in self.opt_levels:
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
        for mod in self.nets.generator_modules():
            for p in mod.parameters():
                p.grad = None

        p_skips = []
        for k in range(len(self.level_modules)):
            r = float(disc.running_accuracy[k])
            p_skips.append(throttle_probability(r, cfg) if self.spec.adaptive else 0.0)
        active = [k for k in range(len(self.level_modules))
                  if skip_draws[k] >= p_skips[k]]
        active_set = set(active)

        patchgan = isinstance(disc, PatchGANEnsemble)
        x_real = real["image"].clone().requires_grad_(bool(active))
        lab_real = real["labels"] if self.spec.use_projection else None
        lab_syn = syn_labels if self.spec.use_projection else None
        with torch.set_grad_enabled(bool(active)):
            taps_real = None if patchgan else self.backbone(x_real)

        def score_real(k: int) -> torch.Tensor:
            if patchgan:
                s = disc.scales[k]
                x = torch.nn.functional.avg_pool2d(x_real, s) if s > 1 else x_real
                return self.level_modules[k](x, None)
            return self.level_modules[k](taps_real[k], lab_real)

        def score_fake(k: int) -> torch.Tensor:
            if patchgan:
                s = disc.scales[k]
                x = (torch.nn.functional.avg_pool2d(g_out["enhanced"], s)
                     if s > 1 else g_out["enhanced"])
                return self.level_modules[k](x, None)
            return self.level_modules[k](g_out["taps_fake"][k], lab_syn)

        losses = {}
        total = None
        real_scores_all: dict[int, torch.Tensor] = {}
        fake_scores_all: dict[int, torch.Tensor] = {}
        for k in range(len(self.level_modules)):
            if k in active_set:
                s_real = score_real(k)
                s_fake = score_fake(k)
                loss_k = (s_real - 1.0).pow(2).mean() + s_fake.pow(2).mean()
                if cfg.gp_weight > 0:
                    pen = r1_penalty(s_real, x_real)
                    if not math.isfinite(float(pen.detach())):
                        raise RuntimeError(
                            f"non-finite gradient penalty at iteration "
                            f"{self.iteration}, level {k}")
                    loss_k = loss_k + cfg.gp_weight * pen
                if not math.isfinite(float(loss_k.detach())):
                    raise RuntimeError(
                        f"non-finite discriminator loss at iteration "
                        f"{self.iteration}, level {k}")
                losses[k] = float(loss_k.detach())
                total = loss_k if total is None else total + loss_k
                real_scores_all[k] = s_real.detach()
                fake_scores_all[k] = s_fake.detach()
            else:
                # Throttled: no update, but the running-accuracy statistics
                # still see this level's scores.
                with torch.no_grad():
                    real_scores_all[k] = score_real(k)
                    fake_scores_all[k] = (g_out["fake_scores"][k] if not patchgan
                                          else score_fake(k))
        if total is not None:
            total.backward()
            for k in active:
                clip_gradients_(list(self.level_modules[k].parameters()),
                                cfg.grad_clip)
                self.opt_levels[k].step()

        # Running accuracy sees both real and fake samples at every level,
        # whether or not the level was updated.
        disc.update_accuracy_from(real_scores_all, truth_real=True,
                                  decay=cfg.ema_decay)
        disc.update_accuracy_from(fake_scores_all, truth_real=False,
                                  decay=cfg.ema_decay)
        return {"losses": losses, "p_skips": p_skips, "active": active}

    def step(self) -> dict:
        """One alternating generator/discriminator iteration."""
        syn_ref, real_ref = self._draw_pair()
        skip_draws = self._skip_draws()
        syn = synthetic_patch_tensors(self.source, syn_ref)
        real = real_patch_tensors(self.target, real_ref)
        g_out = self.generator_step(syn)
        d_out = self.discriminator_step(real, syn["labels"], g_out, skip_draws)
        disc = self.nets.discriminator
        row = {
            "iteration": self.iteration,
            "lr": lr_at(self.iteration, self.cfg),
            "g_adv": g_out["g_adv"],
            "g_percep": g_out["g_percep"],
            "g_total": g_out["g_total"],
        }
        for k in range(len(self.level_modules)):
            row[f"d_loss_{k}"] = d_out["losses"].get(k, float("nan"))
            row[f"r_{k}"] = float(disc.running_accuracy[k])
            row[f"p_skip_{k}"] = d_out["p_skips"][k]
        self.iteration += 1
        return row

    # -- checkpointing -----------------------------------------------------

    def checkpoint(self) -> dict:
        # state_dict() returns references to live tensors (and the optimizer
        # load path aliases same-dtype tensors instead of copying), so the
        # record is deep-copied to stay a true snapshot.
        return copy.deepcopy({
            "iteration": self.iteration,
            "condition": self.spec.name,
            "seed": self.seed,
            "enhancer": self.nets.enhancer.state_dict(),
            "encoder": (self.nets.encoder.state_dict()
                        if self.nets.encoder is not None else None),
            "discriminator": self.nets.discriminator.state_dict(),
            "opt_enhancer": self.opt_enhancer.state_dict(),
            "opt_encoder": (self.opt_encoder.state_dict()
                            if self.opt_encoder is not None else None),
            "opt_levels": [opt.state_dict() for opt in self.opt_levels],
            "numpy_rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        })

    def load_checkpoint(self, ckpt: dict) -> None:
        if ckpt["condition"] != self.spec.name:
            raise ConfigurationError(
                f"checkpoint was trained under condition '{ckpt['condition']}', "
                f"not '{self.spec.name}'")
        # Guard the caller's record against optimizer state aliasing.
        ckpt = copy.deepcopy(ckpt)
        self.iteration = ckpt["iteration"]
        self.nets.enhancer.load_state_dict(ckpt["enhancer"])
        if self.nets.encoder is not None:
            self.nets.encoder.load_state_dict(ckpt["encoder"])
        self.nets.discriminator.load_state_dict(ckpt["discriminator"])
        self.opt_enhancer.load_state_dict(ckpt["opt_enhancer"])
        if self.opt_encoder is not None:
            self.opt_encoder.load_state_dict(ckpt["opt_encoder"])
        for opt, sd in zip(self.opt_levels, ckpt["opt_levels"]):
            opt.load_state_dict(sd)
        self.rng.bit_generator.state = ckpt["numpy_rng"]
        torch.set_rng_state(ckpt["torch_rng"])

    def save_checkpoint(self, path: str | Path) -> None:
        torch.save(self.checkpoint(), path)

    def load_checkpoint_file(self, path: str | Path) -> None:
        self.load_checkpoint(torch.load(path, weights_only=False))

    # -- driver -------------------------------------------------------------

    def run(self, total_iters: int | None = None, out_dir: str | Path | None = None,
            log_name: str = "log.csv") -> dict:
        """Train for total_iters; writes checkpoints and a loss log when
        out_dir is given. Returns the final checkpoint record."""
        iters = total_iters if total_iters is not None else self.cfg.total_iters
        self.nets.train_mode()
        writer = None
        log_file = None
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            log_file = open(out / log_name, "w", newline="", encoding="utf-8")
        try:
            while self.iteration < iters:
                try:
                    row = self.step()
                except RuntimeError:
                    # Abort with a diagnostics snapshot of the full state.
                    if out_dir is not None:
                        self.save_checkpoint(Path(out_dir) / "ckpt_diagnostic.pt")
                    raise
                if log_file is not None and row["iteration"] % self.cfg.log_every == 0:
                    if writer is None:
                        writer = csv.DictWriter(log_file, fieldnames=list(row))
                        writer.writeheader()
                    writer.writerow(row)
                if (out_dir is not None and self.cfg.checkpoint_every > 0
                        and self.iteration % self.cfg.checkpoint_every == 0):
                    self.save_checkpoint(Path(out_dir) / f"ckpt_{self.iteration:07d}.pt")
        finally:
            if log_file is not None:
                log_file.close()
        record = self.checkpoint()
        if out_dir is not None:
            torch.save(record, Path(out_dir) / "ckpt_final.pt")
        return record


# ---------------------------------------------------------------------------
# Dataset views for the sampler helpers (which expect .image/.labels objects)


class _SampleView:
    def __init__(self, data: DatasetArrays, index: int):
        self.image = data.images[index]
        self.labels = data.labels[index]


def _as_sample_views(data: DatasetArrays) -> list[_SampleView]:
    return [_SampleView(data, i) for i in range(len(data))]


@torch.no_grad()
def enhance_dataset(nets: TrainingNetworks, spec: ConditionSpec,
                    data: DatasetArrays, batch_size: int = 4) -> np.ndarray:
    """Enhance full frames; returns N x H x W x 3 float32 in [0, 1]."""
    nets.eval_mode()
    outs = []
    n = len(data)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        image = _to_t(data.images[start:stop]).permute(0, 3, 1, 2)
        stack = _to_t(data.stacks[start:stop]).permute(0, 3, 1, 2)
        masks = _to_t(data.masks[start:stop])
        out = enhance_forward(nets, spec, image, stack, masks)
        outs.append(out.permute(0, 2, 3, 1).cpu().numpy())
    nets.train_mode()
    return np.concatenate(outs, axis=0)
