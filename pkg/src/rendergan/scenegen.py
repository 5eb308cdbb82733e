"""Procedural deferred-shading toy renderer.

Produces paired (image, G-buffers, label map) samples in two configurable
visual styles standing in for a synthetic source dataset and a real target
dataset. Scenes are composed in image space from five object groups: a sky
band, a ground/road plane, building fronts, vehicle boxes, and vegetation
blobs. Geometry buffers are computed analytically from a fixed pinhole
camera, so every sample is bit-reproducible from (config, seed, index).

World frame: y up, camera at (0, cam_height, 0) looking along +z. The ground
is the plane y = 0, so ground normals are exactly (0, 1, 0).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ShapeError

CLASS_NAMES = ("sky", "road", "building", "vehicle", "vegetation")
SKY, ROAD, BUILDING, VEHICLE, VEGETATION = range(5)

STYLE_CODES = {"source": 0, "target": 1}


@dataclass
class StyleParams:
    """Photometric style knobs applied to the shaded image."""

    gamma: float = 1.0
    tint: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_amp: float = 0.0
    texture_amp: float = 0.0
    texture_freq: float = 8.0


@dataclass
class LayoutBias:
    """Per-class placement priors; differences between styles emulate the
    scene-layout mismatch between datasets."""

    building_count: tuple[int, int] = (2, 4)
    building_height: tuple[float, float] = (0.15, 0.35)  # fraction of H
    vehicle_count: tuple[int, int] = (1, 3)
    vegetation_count: tuple[int, int] = (2, 4)
    vegetation_band: tuple[float, float] = (0.25, 0.45)  # row fraction of H
    vegetation_radius: tuple[int, int] = (4, 9)


@dataclass
class CameraModel:
    focal_frac: float = 0.9       # focal length as a fraction of image width
    horizon_frac: float = 0.45    # principal point row as a fraction of H
    cam_height: float = 1.6
    far: float = 1000.0

    def intrinsics(self, height: int, width: int) -> dict:
        return {
            "focal_px": self.focal_frac * width,
            "cx": width / 2.0,
            "cy": self.horizon_frac * height,
            "cam_height": self.cam_height,
            "far": self.far,
        }


@dataclass
class LayoutConfig:
    height: int = 64
    width: int = 64
    camera: CameraModel = field(default_factory=CameraModel)
    light_dir: tuple[float, float, float] = (0.3, 0.8, -0.5)
    styles: dict[str, StyleParams] = field(
        default_factory=lambda: {"source": StyleParams(), "target": StyleParams()}
    )
    layout: dict[str, LayoutBias] = field(
        default_factory=lambda: {"source": LayoutBias(), "target": LayoutBias()}
    )
    # Expected minimum L2 distance between mean-RGB statistics of the two
    # styles; the style-separation check reads this, not a magic number.
    style_margin: float = 0.0

    def validate(self) -> None:
        for name, value in (("height", self.height), ("width", self.width)):
            if value < 64 or value % 8 != 0:
                raise ConfigurationError(
                    f"{name} must be >= 64 and divisible by 8, got {value}"
                )
        for tag in ("source", "target"):
            if tag not in self.styles or tag not in self.layout:
                raise ConfigurationError(f"missing style or layout entry for '{tag}'")

    @property
    def n_classes(self) -> int:
        return len(CLASS_NAMES)


@dataclass
class GBufferSet:
    """Per-pixel geometry/material/lighting channels for one frame."""

    normal: np.ndarray        # H x W x 3, unit where sky_mask == 0
    depth: np.ndarray         # H x W, > 0
    albedo: np.ndarray        # H x W x 3 in [0, 1]
    glossiness: np.ndarray    # H x W in [0, 1]
    emission: np.ndarray      # H x W in [0, 1]
    sky_mask: np.ndarray      # H x W in {0, 1}
    reflection: np.ndarray    # H x W x 3, unit (view vector reflected at normal)
    ndotr: np.ndarray         # H x W in [-1, 1]
    object_masks: np.ndarray  # C x H x W in {0, 1}, partition of the image

    CHANNEL_NAMES = (
        "normal", "depth", "albedo", "glossiness", "emission",
        "sky_mask", "reflection", "ndotr", "object_masks",
    )

    def channel_items(self):
        return [(name, getattr(self, name)) for name in self.CHANNEL_NAMES]

    def stack(self) -> np.ndarray:
        """All continuous channels as one H x W x 14 float32 array (the
        per-stream input of the G-buffer encoder; masks are kept separate).

        Depth enters as inverse depth 1/(1+d) so the stack stays O(1);
        the stored depth channel itself remains raw.
        """
        h, w = self.depth.shape
        parts = [
            self.normal,
            1.0 / (1.0 + self.depth[..., None]),
            self.albedo,
            self.glossiness[..., None],
            self.emission[..., None],
            self.sky_mask[..., None].astype(np.float32),
            self.reflection,
            self.ndotr[..., None],
        ]
        return np.concatenate(parts, axis=-1).astype(np.float32).reshape(h, w, -1)

    def validate(self) -> None:
        h, w = self.depth.shape
        for name, arr in self.channel_items():
            if arr.shape[-2:] != (h, w) and arr.shape[:2] != (h, w):
                raise ShapeError(f"channel {name} has inconsistent spatial size")
        if not np.all(self.depth > 0):
            raise ValueError("depth must be positive everywhere")
        norms = np.linalg.norm(self.normal, axis=-1)
        surf = self.sky_mask == 0
        if not np.allclose(norms[surf], 1.0, atol=1e-5):
            raise ValueError("surface normals must be unit length")
        if not np.array_equal(self.object_masks.sum(axis=0), np.ones((h, w), dtype=self.object_masks.dtype)):
            raise ValueError("object masks must partition the image")


STACK_CHANNELS = 14  # normal 3 + depth 1 + albedo 3 + gloss 1 + emission 1 + sky 1 + reflection 3 + ndotr 1


@dataclass
class SceneSample:
    image: np.ndarray     # H x W x 3 float32 in [0, 1]
    gbuffers: GBufferSet
    labels: np.ndarray    # H x W uint8 class map
    style_tag: str
    seed: int


def view_directions(height: int, width: int, cam: dict) -> np.ndarray:
    """Unit view direction per pixel in the y-up world frame, float64."""
    u = np.arange(width, dtype=np.float64)[None, :]
    v = np.arange(height, dtype=np.float64)[:, None]
    dx = (u - cam["cx"]) / cam["focal_px"] * np.ones((height, 1))
    dy = -(v - cam["cy"]) / cam["focal_px"] * np.ones((1, width))
    dz = np.ones((height, width))
    d = np.stack([dx, dy, dz], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def reflect(view: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Reflect view vectors at surface normals: r = v - 2 (v . n) n."""
    vn = np.sum(view * normal, axis=-1, keepdims=True)
    return view - 2.0 * vn * normal


def sample_seed_for(dataset_seed: int, index: int, style_tag: str) -> int:
    """Fold (dataset seed, sample index, style) into one 64-bit sample seed."""
    code = STYLE_CODES[style_tag]
    mixed = np.random.SeedSequence([dataset_seed, index, code]).generate_state(1)[0]
    return int(mixed)


def generate_sample(config: LayoutConfig, style_tag: str, sample_seed: int) -> SceneSample:
    """Render one sample. Pure in (config, style_tag, sample_seed)."""
    config.validate()
    if style_tag not in STYLE_CODES:
        raise ConfigurationError(f"unknown style tag '{style_tag}'")
    h, w = config.height, config.width
    cam = config.camera.intrinsics(h, w)
    bias = config.layout[style_tag]
    style = config.styles[style_tag]
    rng = np.random.default_rng(sample_seed)

    d = view_directions(h, w, cam)
    labels = np.zeros((h, w), dtype=np.uint8)
    depth = np.full((h, w), cam["far"], dtype=np.float64)
    normal = np.zeros((h, w, 3), dtype=np.float64)
    albedo = np.zeros((h, w, 3), dtype=np.float64)
    gloss = np.zeros((h, w), dtype=np.float64)
    emission = np.zeros((h, w), dtype=np.float64)

    # Sky base: emission gradient, class 0.
    rows = np.arange(h, dtype=np.float64)[:, None] / max(h - 1, 1)
    emission[:] = np.clip(0.95 - 0.35 * rows, 0.0, 1.0)

    # Ground plane (class road): pixels whose ray points below the horizon.
    ground = d[..., 1] < 0
    t_ground = np.where(ground, cam["cam_height"] / np.maximum(-d[..., 1], 1e-9), cam["far"])
    labels[ground] = ROAD
    depth[ground] = t_ground[ground]
    normal[ground] = (0.0, 1.0, 0.0)
    road_shade = rng.uniform(0.30, 0.42)
    albedo[ground] = (road_shade, road_shade, road_shade * 1.05)
    gloss[ground] = rng.uniform(0.25, 0.4)
    emission[ground] = 0.0

    cy = cam["cy"]
    f = cam["focal_px"]

    def paint_rect(rows_slice, cols_slice, cls, z_plane, n_vec, alb, gl):
        rs = slice(max(rows_slice[0], 0), min(rows_slice[1], h))
        cs = slice(max(cols_slice[0], 0), min(cols_slice[1], w))
        if rs.start >= rs.stop or cs.start >= cs.stop:
            return
        labels[rs, cs] = cls
        dz = d[rs, cs, 2]
        depth[rs, cs] = z_plane / np.maximum(dz, 1e-9)
        normal[rs, cs] = n_vec
        albedo[rs, cs] = alb
        gloss[rs, cs] = gl
        emission[rs, cs] = 0.0

    # Building fronts, far to near so nearer ones overwrite.
    n_build = int(rng.integers(bias.building_count[0], bias.building_count[1] + 1))
    builds = []
    for _ in range(n_build):
        z = rng.uniform(20.0, 45.0)
        height_m = rng.uniform(*bias.building_height) * h * z / f
        width_px = int(rng.uniform(0.12, 0.3) * w)
        u0 = int(rng.uniform(0, w - width_px))
        shade = rng.uniform(0.35, 0.6)
        tint_b = rng.uniform(-0.08, 0.08)
        builds.append((z, height_m, u0, width_px, shade, tint_b))
    for z, height_m, u0, width_px, shade, tint_b in sorted(builds, key=lambda b: -b[0]):
        v_base = int(cy + f * cam["cam_height"] / z)
        v_top = int(cy - f * (height_m - cam["cam_height"]) / z)
        paint_rect((v_top, v_base), (u0, u0 + width_px), BUILDING, z,
                   (0.0, 0.0, -1.0), (shade + tint_b, shade, shade - tint_b), 0.1)

    # Vegetation blobs with spherical normals, placed in the style's band.
    n_veg = int(rng.integers(bias.vegetation_count[0], bias.vegetation_count[1] + 1))
    for _ in range(n_veg):
        r_px = int(rng.integers(bias.vegetation_radius[0], bias.vegetation_radius[1] + 1))
        vc = int(rng.uniform(bias.vegetation_band[0], bias.vegetation_band[1]) * h)
        uc = int(rng.uniform(r_px, w - r_px))
        z = rng.uniform(10.0, 30.0)
        vv, uu = np.mgrid[0:h, 0:w]
        off_u = (uu - uc) / r_px
        off_v = (vv - vc) / r_px
        inside = off_u**2 + off_v**2 <= 1.0
        if not inside.any():
            continue
        nz = -np.sqrt(np.maximum(1.0 - off_u**2 - off_v**2, 0.0))
        n_blob = np.stack([off_u, -off_v, nz], axis=-1)
        n_blob /= np.maximum(np.linalg.norm(n_blob, axis=-1, keepdims=True), 1e-9)
        labels[inside] = VEGETATION
        depth[inside] = (z / np.maximum(d[..., 2], 1e-9))[inside]
        normal[inside] = n_blob[inside]
        g_shade = rng.uniform(0.25, 0.5)
        albedo[inside] = (0.1 * g_shade, g_shade, 0.2 * g_shade)
        gloss[inside] = 0.05
        emission[inside] = 0.0

    # Vehicles on the ground, nearest painted last.
    n_veh = int(rng.integers(bias.vehicle_count[0], bias.vehicle_count[1] + 1))
    zs = sorted(rng.uniform(6.0, 18.0, size=n_veh), reverse=True)
    for z in zs:
        v_base = int(cy + f * cam["cam_height"] / z)
        veh_h = rng.uniform(1.2, 1.8)
        veh_w = rng.uniform(1.6, 2.4)
        v_top = int(cy + f * (cam["cam_height"] - veh_h) / z)
        width_px = max(int(f * veh_w / z), 2)
        u0 = int(rng.uniform(0, max(w - width_px, 1)))
        color = rng.uniform(0.2, 0.9, size=3)
        paint_rect((v_top, v_base), (u0, u0 + width_px), VEHICLE, z,
                   (0.0, 0.0, -1.0), tuple(color), rng.uniform(0.7, 0.9))

    sky_mask = (labels == SKY).astype(np.uint8)

    # Derived buffers from the fixed camera model.
    refl = reflect(d, normal)
    refl /= np.maximum(np.linalg.norm(refl, axis=-1, keepdims=True), 1e-12)
    ndotr = np.clip(np.sum(normal * refl, axis=-1), -1.0, 1.0)

    # Shading: ambient + Lambert diffuse + glossy highlight, emission for sky.
    light = np.asarray(config.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    diffuse = np.maximum(np.sum(normal * light, axis=-1), 0.0)
    highlight = gloss * np.maximum(np.sum(refl * light, axis=-1), 0.0) ** 8
    img = albedo * (0.35 + 0.65 * diffuse[..., None]) + 0.25 * highlight[..., None]
    sky_color = np.stack([0.55 * emission, 0.65 * emission, 0.9 * emission], axis=-1)
    img = np.where(sky_mask[..., None].astype(bool), sky_color, img)
    img = np.clip(img, 0.0, 1.0)

    # Style transform: gamma curve, tint, high-frequency texture, sensor noise.
    img = img ** style.gamma
    img = img + np.asarray(style.tint, dtype=np.float64)
    if style.texture_amp != 0.0:
        uu = np.arange(w, dtype=np.float64)[None, :]
        vv = np.arange(h, dtype=np.float64)[:, None]
        pattern = np.sin(2 * np.pi * style.texture_freq * uu / w) * \
            np.sin(2 * np.pi * style.texture_freq * vv / h)
        img = img + style.texture_amp * pattern[..., None]
    if style.noise_amp != 0.0:
        img = img + style.noise_amp * rng.standard_normal((h, w, 3))
    img = np.clip(img, 0.0, 1.0)

    masks = np.stack([(labels == c) for c in range(len(CLASS_NAMES))]).astype(np.uint8)
    gbuf = GBufferSet(
        normal=normal.astype(np.float32),
        depth=depth.astype(np.float32),
        albedo=np.clip(albedo, 0.0, 1.0).astype(np.float32),
        glossiness=np.clip(gloss, 0.0, 1.0).astype(np.float32),
        emission=np.clip(emission, 0.0, 1.0).astype(np.float32),
        sky_mask=sky_mask,
        reflection=refl.astype(np.float32),
        ndotr=ndotr.astype(np.float32),
        object_masks=masks,
    )
    return SceneSample(
        image=img.astype(np.float32),
        gbuffers=gbuf,
        labels=labels,
        style_tag=style_tag,
        seed=int(sample_seed),
    )


def generate_dataset(config: LayoutConfig, n: int, seed: int,
                     style_tag: str = "source") -> list[SceneSample]:
    """Render n samples. Each sample is pure in (config, seed, index), so
    the dataset is reproducible bit for bit."""
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    config.validate()
    return [
        generate_sample(config, style_tag, sample_seed_for(seed, i, style_tag))
        for i in range(n)
    ]


def mean_rgb(samples: list[SceneSample]) -> np.ndarray:
    return np.mean([s.image.reshape(-1, 3).mean(axis=0) for s in samples], axis=0)


def style_separation(source: list[SceneSample], target: list[SceneSample]) -> float:
    """L2 distance between mean-RGB statistics of two sample sets."""
    return float(np.linalg.norm(mean_rgb(source) - mean_rgb(target)))


def layout_config_to_dict(config: LayoutConfig) -> dict:
    return dataclasses.asdict(config)


def layout_config_from_dict(data: dict) -> LayoutConfig:
    from .config import build_dataclass  # local import to avoid a cycle
    return build_dataclass(LayoutConfig, data, "scene")
