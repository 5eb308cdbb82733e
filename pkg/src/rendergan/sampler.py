"""Patch sampling and cross-dataset matching.

Training crops are small (about 7% of the frame at the reference scale) and,
in the matched policy, synthetic patches are paired with real patches whose
deep-feature cosine similarity exceeds 0.5. The match index is an exhaustive
exact scan over unit-normalized embeddings; any acceleration would have to
reproduce its results bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .backbone import FrozenBackbone
from .errors import ConfigurationError, SamplingExhaustedError, ShapeError

POLICIES = ("uniform", "matched")
MATCH_THRESHOLD = 0.5


@dataclass(frozen=True)
class PatchRef:
    dataset_id: str
    image_id: int
    x: int            # left column
    y: int            # top row
    side: int
    embedding: np.ndarray | None = None

    def crop(self, array: np.ndarray) -> np.ndarray:
        return array[self.y:self.y + self.side, self.x:self.x + self.side]


def crop_area_ratio(crop: int, width: int, height: int) -> float:
    return (crop * crop) / float(width * height)


def crop_patches(sample, n: int, rng: np.random.Generator,
                 policy: str = "uniform", crop: int | None = None,
                 backbone: FrozenBackbone | None = None,
                 dataset_id: str = "", image_id: int = 0) -> list[PatchRef]:
    """Sample n crop positions i.i.d. uniformly over valid placements.

    The policy tag only validates intent (matched-policy refs are embedded
    and matched downstream); positions are drawn the same way. When `crop`
    is None it defaults to the backbone's deepest-tap receptive field.
    """
    if policy not in POLICIES:
        raise ConfigurationError(f"unknown sampling policy '{policy}'")
    h, w = sample.labels.shape
    if crop is None:
        if backbone is None:
            raise ConfigurationError("crop size or backbone required")
        crop = backbone.deepest_receptive_field
    if crop > min(h, w):
        raise ConfigurationError(
            f"crop {crop} exceeds image size {min(h, w)}")
    xs = rng.integers(0, w - crop + 1, size=n)
    ys = rng.integers(0, h - crop + 1, size=n)
    return [PatchRef(dataset_id, image_id, int(x), int(y), int(crop))
            for x, y in zip(xs, ys)]


def embed_patch(patch: np.ndarray, backbone: FrozenBackbone) -> np.ndarray:
    """Deepest-tap feature of one patch, pooled to a single unit vector.

    At a patch side equal to the backbone's receptive field the deepest tap
    is (nearly) a single spatial cell; global average pooling restores a
    1 x 1 vector for any other side.
    """
    if patch.ndim != 3 or patch.shape[2] != 3:
        raise ShapeError(f"patch must be H x W x 3, got {patch.shape}")
    if patch.shape[0] != patch.shape[1]:
        raise ShapeError("patches are square")
    with torch.no_grad():
        t = torch.from_numpy(np.ascontiguousarray(patch)).float()
        t = t.permute(2, 0, 1).unsqueeze(0)
        feat = backbone(t)[-1].mean(dim=(2, 3)).squeeze(0).double().numpy()
    norm = np.linalg.norm(feat)
    if norm == 0.0:
        raise ValueError("degenerate patch embedding with zero norm")
    return feat / norm


class MatchIndex:
    """Immutable store of unit-normalized real-patch embeddings."""

    def __init__(self, refs: list[PatchRef], embeddings: np.ndarray,
                 threshold: float = MATCH_THRESHOLD):
        if len(refs) != embeddings.shape[0]:
            raise ShapeError("one embedding row per patch ref required")
        self.refs = list(refs)
        matrix = np.asarray(embeddings, dtype=np.float64)
        if matrix.size:
            norms = np.linalg.norm(matrix, axis=1, keepdims=True)
            if np.any(norms == 0.0):
                raise ValueError("zero-norm embedding in index")
            matrix = matrix / norms
        self.matrix = matrix
        self.matrix.setflags(write=False)
        self.threshold = threshold

    def __len__(self) -> int:
        return len(self.refs)

    def query(self, phi: np.ndarray) -> np.ndarray:
        """Indices of all rows with cosine similarity strictly above the
        threshold (exhaustive scan). Empty index gives an empty result."""
        if len(self.refs) == 0:
            return np.empty(0, dtype=np.int64)
        phi = np.asarray(phi, dtype=np.float64)
        norm = np.linalg.norm(phi)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError("query embedding must be unit length")
        sims = self.matrix @ phi
        return np.nonzero(sims > self.threshold)[0]


def query_matches(index: MatchIndex, phi: np.ndarray) -> list[PatchRef]:
    return [index.refs[i] for i in index.query(phi)]


class MatchedPairSampler:
    """Synthetic patch pool with precomputed match sets over a real index.

    Patches without any match are excluded from sampling entirely (a counter
    tracks how many were dropped); if nothing matches, sampling fails loudly.
    """

    def __init__(self, synthetic_refs: list[PatchRef], index: MatchIndex):
        self.index = index
        self.synthetic_refs = list(synthetic_refs)
        self.match_lists: list[np.ndarray] = []
        for ref in self.synthetic_refs:
            if ref.embedding is None:
                raise ValueError("synthetic refs must carry embeddings")
            self.match_lists.append(index.query(ref.embedding))
        self.eligible = [i for i, m in enumerate(self.match_lists) if len(m) > 0]
        self.n_unmatched = len(self.synthetic_refs) - len(self.eligible)

    def sample_training_pair(self, rng: np.random.Generator
                             ) -> tuple[PatchRef, PatchRef]:
        """Uniform synthetic draw among matched patches, then a uniform draw
        from that patch's match set."""
        if not self.eligible:
            raise SamplingExhaustedError(
                f"no synthetic patch has any match (pool={len(self.synthetic_refs)}, "
                f"index={len(self.index)}, threshold={self.index.threshold})")
        i = self.eligible[int(rng.integers(0, len(self.eligible)))]
        matches = self.match_lists[i]
        j = int(matches[int(rng.integers(0, len(matches)))])
        return self.synthetic_refs[i], self.index.refs[j]


def sample_training_pair(sampler: MatchedPairSampler, rng: np.random.Generator
                         ) -> tuple[PatchRef, PatchRef]:
    return sampler.sample_training_pair(rng)


def build_patch_pool(samples, dataset_id: str, backbone: FrozenBackbone,
                     crop: int, patches_per_image: int,
                     rng: np.random.Generator, embed: bool = True
                     ) -> list[PatchRef]:
    """Uniform patch refs over a dataset, optionally embedded."""
    refs: list[PatchRef] = []
    for image_id, sample in enumerate(samples):
        for ref in crop_patches(sample, patches_per_image, rng, "uniform",
                                crop, dataset_id=dataset_id, image_id=image_id):
            if embed:
                phi = embed_patch(ref.crop(sample.image), backbone)
                ref = replace(ref, embedding=phi)
            refs.append(ref)
    return refs


def write_embedding_store(directory: str | Path, refs: list[PatchRef]) -> None:
    """Binary embedding matrix plus a JSON row manifest."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    matrix = np.stack([np.asarray(r.embedding, dtype=np.float32) for r in refs]) \
        if refs else np.empty((0, 0), dtype=np.float32)
    matrix.astype("<f4").tofile(out / "embeddings.bin")
    rows = [{"dataset_id": r.dataset_id, "image_id": r.image_id,
             "x": r.x, "y": r.y, "side": r.side} for r in refs]
    meta = {"rows": rows, "dim": int(matrix.shape[1]) if matrix.size else 0,
            "count": len(refs), "dtype": "<f4"}
    with open(out / "embeddings.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def read_embedding_store(directory: str | Path) -> list[PatchRef]:
    root = Path(directory)
    with open(root / "embeddings.json", encoding="utf-8") as f:
        meta = json.load(f)
    if meta["count"] == 0:
        return []
    matrix = np.fromfile(root / "embeddings.bin", dtype=np.dtype(meta["dtype"]))
    matrix = matrix.reshape(meta["count"], meta["dim"]).astype(np.float64)
    refs = []
    for row, emb in zip(meta["rows"], matrix):
        refs.append(PatchRef(row["dataset_id"], row["image_id"], row["x"],
                             row["y"], row["side"], embedding=emb))
    return refs
