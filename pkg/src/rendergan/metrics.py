"""Evaluation metrics: unbiased squared MMD with the cubic polynomial
kernel, its subsampled image-level form (KID), the per-tap patch-pair form
over semantically matched patches (sKVD), and layout density maps.

Patch pairing encodes label-map patches as 256-d class-ID vectors (16 x 16
mode-pooled); a synthetic patch's nearest neighbor is the real patch with
the most matching entries, and pairs are retained only above 50% agreement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backbone import FrozenBackbone, tap_features_for_patches
from .errors import ConfigurationError, MetricUndefinedError, ShapeError

ENCODING_GRID = 16
ENCODING_LEN = ENCODING_GRID * ENCODING_GRID
RETAIN_MIN_MATCHES = ENCODING_LEN // 2      # retained iff matches > this


@dataclass
class MetricReport:
    name: str
    value_x1000: float
    std_x1000: float
    subset_size: int
    n_subsets: int

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "value_x1000": self.value_x1000,
            "std_x1000": self.std_x1000,
            "subset_size": self.subset_size,
            "n_subsets": self.n_subsets,
        }


@dataclass
class MetricProtocol:
    subset_size: int = 100
    n_subsets: int = 10
    patches_per_image: int = 8
    seed: int = 0


def polynomial_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """k(x, y) = (x . y / d + 1)^3 on rows of a and b."""
    d = a.shape[1]
    return (a @ b.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased squared maximum mean discrepancy; may be negative.

    Reductions use math.fsum (correctly rounded independent of summation
    order), so permuting rows of either set leaves the value exactly
    unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"feature shapes {x.shape} and {y.shape} are incompatible")
    n, m = x.shape[0], y.shape[0]
    if n < 2 or m < 2:
        raise ConfigurationError("mmd2_unbiased needs at least 2 rows per set")
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    sum_xx = (math.fsum(kxx.ravel()) - math.fsum(np.diag(kxx))) / (n * (n - 1))
    sum_yy = (math.fsum(kyy.ravel()) - math.fsum(np.diag(kyy))) / (m * (m - 1))
    sum_xy = math.fsum(kxy.ravel()) / (n * m)
    return float(sum_xx + sum_yy - 2.0 * sum_xy)


def kid(features_a: np.ndarray, features_b: np.ndarray, subset_size: int = 100,
        n_subsets: int = 10, seed: int = 0, name: str = "kid") -> MetricReport:
    """Mean and std of mmd2_unbiased over random subsets, reported x1000.

    Subsets are drawn without replacement, independently from each feature
    set; same-dataset nulls should therefore pass disjoint feature pools.
    Absolute values depend entirely on the feature provider: with pretrained
    deep features on full-scale unpaired driving datasets this statistic
    lands in the tens (x1000), while the desk-scale frozen pyramid yields
    values on its own scale. Compare like against like only.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.shape[0] < subset_size or b.shape[0] < subset_size:
        raise ConfigurationError(
            f"need at least subset_size={subset_size} features per set, "
            f"got {a.shape[0]} and {b.shape[0]}")
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(n_subsets):
        ia = rng.choice(a.shape[0], size=subset_size, replace=False)
        ib = rng.choice(b.shape[0], size=subset_size, replace=False)
        values.append(mmd2_unbiased(a[ia], b[ib]))
    values = np.asarray(values)
    return MetricReport(name, float(values.mean() * 1000.0),
                        float(values.std() * 1000.0), subset_size, n_subsets)


def encode_label_patch(patch: np.ndarray) -> np.ndarray:
    """Class-ID vector of a square label patch: a 16 x 16 grid of per-cell
    modes, flattened to length 256. For patches smaller than the grid the
    covering pixel is replicated."""
    patch = np.asarray(patch)
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1]:
        raise ShapeError(f"label patch must be square, got {patch.shape}")
    side = patch.shape[0]
    bounds = [(side * i) // ENCODING_GRID for i in range(ENCODING_GRID + 1)]
    n_classes = int(patch.max()) + 1
    out = np.empty(ENCODING_LEN, dtype=np.int64)
    for r in range(ENCODING_GRID):
        r0, r1 = bounds[r], max(bounds[r + 1], bounds[r] + 1)
        for c in range(ENCODING_GRID):
            c0, c1 = bounds[c], max(bounds[c + 1], bounds[c] + 1)
            cell = patch[r0:r1, c0:c1].ravel()
            # bincount argmax breaks ties toward the lowest class id
            out[r * ENCODING_GRID + c] = np.bincount(cell, minlength=n_classes).argmax()
    return out


def pair_patches(synthetic: np.ndarray, real: np.ndarray,
                 min_matches: int = RETAIN_MIN_MATCHES) -> list[tuple[int, int]]:
    """Nearest-neighbor pairing by count of matching encoding entries.

    For every synthetic encoding the real encoding with the highest match
    count wins (ties resolved toward the lowest index); the pair is retained
    only if the count strictly exceeds `min_matches`.
    """
    syn = np.asarray(synthetic)
    rea = np.asarray(real)
    if syn.ndim != 2 or rea.ndim != 2 or syn.shape[1] != rea.shape[1]:
        raise ShapeError("encodings must be 2-d with equal vector length")
    if syn.shape[0] == 0 or rea.shape[0] == 0:
        raise ConfigurationError("both encoding sets must be nonempty")
    pairs = []
    for i in range(syn.shape[0]):
        counts = (rea == syn[i][None, :]).sum(axis=1)
        j = int(np.argmax(counts))
        if counts[j] > min_matches:
            pairs.append((i, j))
    return pairs


def sample_label_patches(images: np.ndarray, labels: np.ndarray,
                         patches_per_image: int, rng: np.random.Generator
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Random square patches of 1/8 image size: (image patches, label patches)."""
    n, h, w = labels.shape
    side = min(h, w) // 8
    if side < 1:
        raise ConfigurationError("images are too small for 1/8-size patches")
    img_patches = []
    lab_patches = []
    for i in range(n):
        xs = rng.integers(0, w - side + 1, size=patches_per_image)
        ys = rng.integers(0, h - side + 1, size=patches_per_image)
        for x, y in zip(xs, ys):
            img_patches.append(images[i, y:y + side, x:x + side])
            lab_patches.append(labels[i, y:y + side, x:x + side])
    return np.stack(img_patches), np.stack(lab_patches)


def skvd_family(images_a: np.ndarray, labels_a: np.ndarray,
                images_b: np.ndarray, labels_b: np.ndarray,
                backbone: FrozenBackbone,
                taps: tuple[int, ...] = (1, 2, 3, 4, 5),
                protocol: MetricProtocol | None = None
                ) -> dict[int, MetricReport]:
    """Per-tap kernel distance over semantically matched patch pairs.

    One backbone pass serves all requested taps. Subset rounds draw disjoint
    index blocks for the two sides from a shared permutation of the retained
    pairs, so identical inputs stay an honest null.
    """
    proto = protocol or MetricProtocol()
    rng = np.random.default_rng(proto.seed)
    pa, la = sample_label_patches(images_a, labels_a, proto.patches_per_image, rng)
    pb, lb = sample_label_patches(images_b, labels_b, proto.patches_per_image, rng)
    enc_a = np.stack([encode_label_patch(p) for p in la])
    enc_b = np.stack([encode_label_patch(p) for p in lb])
    pairs = pair_patches(enc_a, enc_b)
    if not pairs:
        raise MetricUndefinedError(
            f"no retained patch pairs (sampled {len(enc_a)} x {len(enc_b)}, "
            f"retention threshold > {RETAIN_MIN_MATCHES} of {ENCODING_LEN})")
    n_pairs = len(pairs)
    if n_pairs < 2 * proto.subset_size:
        raise ConfigurationError(
            f"{n_pairs} retained pairs < 2 * subset_size = {2 * proto.subset_size}; "
            f"sample more patches per image")
    idx_a = np.array([i for i, _ in pairs])
    idx_b = np.array([j for _, j in pairs])
    feats_a = tap_features_for_patches(backbone, pa[idx_a], list(taps))
    feats_b = tap_features_for_patches(backbone, pb[idx_b], list(taps))
    perms = [rng.permutation(n_pairs) for _ in range(proto.n_subsets)]
    reports = {}
    for t in taps:
        values = []
        for perm in perms:
            sel_a = perm[:proto.subset_size]
            sel_b = perm[proto.subset_size:2 * proto.subset_size]
            values.append(mmd2_unbiased(feats_a[t][sel_a], feats_b[t][sel_b]))
        values = np.asarray(values)
        reports[t] = MetricReport(f"skvd_l{t}", float(values.mean() * 1000.0),
                                  float(values.std() * 1000.0),
                                  proto.subset_size, proto.n_subsets)
    return reports


def skvd(images_a: np.ndarray, labels_a: np.ndarray, images_b: np.ndarray,
         labels_b: np.ndarray, backbone: FrozenBackbone, tap: int,
         protocol: MetricProtocol | None = None) -> MetricReport:
    return skvd_family(images_a, labels_a, images_b, labels_b, backbone,
                       (tap,), protocol)[tap]


def layout_density(label_maps: np.ndarray, grid: tuple[int, int],
                   n_classes: int | None = None) -> np.ndarray:
    """Per-class occupancy maps: fraction of images whose (nearest-resampled)
    label at each grid cell is that class. Shape: C x H' x W'; cells sum to 1
    over classes."""
    maps = np.asarray(label_maps)
    if maps.ndim != 3 or maps.shape[0] < 1:
        raise ShapeError("need at least one H x W label map")
    n, h, w = maps.shape
    gh, gw = grid
    if n_classes is None:
        n_classes = int(maps.max()) + 1
    rows = np.floor((np.arange(gh) + 0.5) * h / gh).astype(int)
    cols = np.floor((np.arange(gw) + 0.5) * w / gw).astype(int)
    resampled = maps[:, rows][:, :, cols]            # N x gh x gw
    counts = np.zeros((n_classes, gh, gw), dtype=np.int64)
    for c in range(n_classes):
        counts[c] = (resampled == c).sum(axis=0)
    return counts.astype(np.float64) / n
