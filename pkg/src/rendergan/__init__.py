"""Adversarial enhancement of rendered images conditioned on deferred-shading
G-buffers, with kernel-distance evaluation metrics and a procedural toy
dataset generator for desk-scale experiments."""

__version__ = "0.1.0"

from .backbone import BackboneConfig, FrozenBackbone
from .config import ExperimentConfig, load_experiment_config
from .container import read_dataset, write_dataset
from .encoder import EncoderConfig, GBufferEncoder, fuse_streams
from .enhancer import Enhancer, EnhancerConfig, ModulatedGroupNorm
from .metrics import MetricReport, kid, mmd2_unbiased, pair_patches, skvd_family
from .sampler import MatchIndex, PatchRef, embed_patch, query_matches
from .scenegen import GBufferSet, LayoutConfig, SceneSample, generate_dataset
from .trainer import TrainConfig, Trainer, lr_at, throttle_probability

__all__ = [
    "BackboneConfig", "FrozenBackbone", "ExperimentConfig",
    "load_experiment_config", "read_dataset", "write_dataset",
    "EncoderConfig", "GBufferEncoder", "fuse_streams", "Enhancer",
    "EnhancerConfig", "ModulatedGroupNorm", "MetricReport", "kid",
    "mmd2_unbiased", "pair_patches", "skvd_family", "MatchIndex", "PatchRef",
    "embed_patch", "query_matches", "GBufferSet", "LayoutConfig",
    "SceneSample", "generate_dataset", "TrainConfig", "Trainer", "lr_at",
    "throttle_probability",
]
