"""Synthetic training data: refractive flow fields by exact 2-D ray tracing.

Three object categories are modelled in an orthographic camera looking down
the z axis at a background plane ``z_bg`` pixels behind the object:

* ``glass``: a solid cylinder with a vertical axis. Each image column is a
  ray hitting the circular cross-section at offset ``u`` from the axis.
* ``glass_with_water``: the same cylinder above a waterline; below it a thin
  glass shell around a water core.
* ``lens``: a thin radial magnifier, ``R(p) = k (p - c)`` inside a disk.

Ground truth is generated in a canonical frame and then pushed through the
random affine augmentation, so flow vectors rotate and scale with the image.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import io
from .errors import DataError, ParameterError
from .matte import Matte, composite

CATEGORIES = ("glass", "glass_with_water", "lens")
SHELL_FRACTION = 0.1
MENISCUS_HALF_WIDTH = 2.0
MENISCUS_SCALE = 0.15
FILTER_RANGE = (0.3, 1.0)
MIN_OBJECT_PIXELS = 16

# training split sizes per (coloredness, category)
FULL_TRAIN_COUNTS = {
    (True, "glass"): 52_000,
    (True, "glass_with_water"): 26_000,
    (True, "lens"): 20_000,
    (False, "glass"): 10_000,
    (False, "glass_with_water"): 10_000,
    (False, "lens"): 10_000,
}
FULL_TEST_COUNTS = {key: 400 for key in FULL_TRAIN_COUNTS}


def group_name(colored: bool, category: str) -> str:
    return f"{'colored' if colored else 'colorless'}_{category}"


def parse_group(name: str) -> tuple[bool, str]:
    kind, _, category = name.partition("_")
    if kind not in ("colored", "colorless") or category not in CATEGORIES:
        raise ParameterError(f"unknown group {name!r}")
    return kind == "colored", category


ALL_GROUPS = [group_name(c, cat) for c in (True, False) for cat in CATEGORIES]


def reference_counts(scale: float = 0.01) -> dict[str, dict[str, int]]:
    """Full-size dataset split counts, scaled and rounded."""
    return {
        "train": {group_name(c, cat): int(round(n * scale)) for (c, cat), n in FULL_TRAIN_COUNTS.items()},
        "test": {group_name(c, cat): int(round(n * scale)) for (c, cat), n in FULL_TEST_COUNTS.items()},
    }


def balanced_counts(total: int) -> dict[str, int]:
    """Split ``total`` samples as evenly as possible over the six groups."""
    base, extra = divmod(total, len(ALL_GROUPS))
    return {g: base + (i < extra) for i, g in enumerate(ALL_GROUPS)}


# -- scene description --------------------------------------------------------


@dataclass
class AugRecord:
    rotation: float = 0.0  # degrees
    scale: float = 1.0
    shear: float = 0.0
    crop: tuple[float, float, int, int] = (0.0, 0.0, 0, 0)  # x, y, w, h of the output window
    color_gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    color_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    border_feather_px: int = 0

    def __post_init__(self):
        if not 0.5 <= self.scale <= 1.5:
            raise ParameterError("augmentation scale outside [0.5, 1.5]", scale=self.scale)
        if not 0 <= self.border_feather_px <= 5:
            raise ParameterError("border feathering must be 0..5 px", px=self.border_feather_px)

    def matrix(self) -> np.ndarray:
        t = math.radians(self.rotation)
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        return self.scale * rot @ np.array([[1.0, self.shear], [0.0, 1.0]])


@dataclass
class SceneSpec:
    category: str
    colored: bool
    geometry: dict
    filter_color: tuple[float, float, float]
    refractive_index: float
    width: int
    height: int
    background_id: str = ""
    seed: int = 0
    augmentation: AugRecord = field(default_factory=AugRecord)

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ParameterError(f"unknown category {self.category!r}")
        if not 1.0 <= self.refractive_index <= 2.0:
            raise ParameterError("refractive index outside [1, 2]", eta=self.refractive_index)
        if not self.colored and tuple(self.filter_color) != (1.0, 1.0, 1.0):
            raise ParameterError("colorless objects need a white filter")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        aug = d.pop("augmentation", {}) or {}
        aug = {k: tuple(v) if isinstance(v, list) else v for k, v in aug.items()}
        d["filter_color"] = tuple(d["filter_color"])
        return cls(augmentation=AugRecord(**aug), **d)


@dataclass
class Sample:
    input: np.ndarray
    background: np.ndarray
    gt: Matte
    spec: SceneSpec


# -- ray optics ------------------------------------------------------------------


def cylinder_deviation(u, r: float, eta: float) -> np.ndarray:
    """Angular deviation of a ray crossing a circle of index ``eta`` at offset ``u``.

    Entry and exit are symmetric, so the ray turns by (incidence - refraction)
    twice.
    """
    s = np.clip(np.abs(np.asarray(u, dtype=np.float64)) / r, 0.0, 1.0)
    return 2.0 * (np.arcsin(s) - np.arcsin(s / eta))


def shell_deviation(u, r: float, eta_glass: float, eta_water: float, shell: float = SHELL_FRACTION):
    """Deviation through a glass shell of thickness ``shell * r`` around a water core.

    Returns ``(deviation, tir)``. Rays that would be totally internally
    reflected at the glass/water interface are clamped to the last refracted
    direction, i.e. the grazing-refraction limit.
    """
    a = np.clip(np.abs(np.asarray(u, dtype=np.float64)), 0.0, r)
    r_in = (1.0 - shell) * r
    # n * (distance of the ray line from the axis) is conserved between interfaces
    outer = 2.0 * (np.arcsin(a / r) - np.arcsin(a / (r * eta_glass)))
    b_glass = a / eta_glass
    hits_core = b_glass < r_in
    sin_core = a / (eta_water * r_in)
    tir = hits_core & (sin_core > 1.0)
    phi = np.arcsin(np.clip(b_glass / r_in, 0.0, 1.0))
    psi = np.arcsin(np.clip(sin_core, 0.0, 1.0))
    inner = np.where(hits_core, 2.0 * (phi - psi), 0.0)
    return outer + inner, tir


def deviation_to_flow(deviation, u, z_bg: float, limit: float) -> np.ndarray:
    """Horizontal background displacement for a ray deviated by ``deviation``.

    Rays bend toward the axis, so the sign opposes ``u``. Deviations at or
    beyond 90 degrees never reach the background plane; those saturate at
    ``limit`` along with any displacement larger than it.
    """
    deviation = np.asarray(deviation, dtype=np.float64)
    safe = np.where(deviation < math.pi / 2, deviation, 0.0)
    mag = np.where(deviation < math.pi / 2, z_bg * np.tan(safe), np.inf)
    return -np.sign(u) * np.minimum(mag, limit)


def _check_cylinder(r: float, eta: float, z_bg: float) -> None:
    if not r > 2:
        raise ParameterError("radius must exceed 2 px", r=r)
    if not eta >= 1.0:
        raise ParameterError("refractive index must be >= 1", eta=eta)
    if not z_bg > 0:
        raise ParameterError("background distance must be positive", z_bg=z_bg)


def _cylinder_field(qx, qy, x0, r, eta, z_bg, limit):
    u = qx - x0
    inside = np.abs(u) <= r
    fx = np.where(inside, deviation_to_flow(cylinder_deviation(u, r, eta), u, z_bg, limit), 0.0)
    return fx, np.zeros_like(fx), inside.astype(np.float64)


def _water_field(qx, qy, x0, r, eta_glass, eta_water, waterline_y, z_bg, limit):
    fx_top, fy, mask = _cylinder_field(qx, qy, x0, r, eta_glass, z_bg, limit)
    u = qx - x0
    inside = mask > 0
    dev, _ = shell_deviation(u, r, eta_glass, eta_water)
    fx_bottom = np.where(inside, deviation_to_flow(dev, u, z_bg, limit), 0.0)
    below = qy > waterline_y
    fx = np.where(below, fx_bottom, fx_top)
    if eta_water > 1.0:
        # both bands have zero vertical flow, so only the meniscus offset remains
        band = inside & (np.abs(qy - waterline_y) <= MENISCUS_HALF_WIDTH)
        fy = np.where(band, MENISCUS_SCALE * r, 0.0)
    return fx, fy, mask


def _lens_field(qx, qy, cx, cy, r, k):
    dx, dy = qx - cx, qy - cy
    inside = dx * dx + dy * dy <= r * r
    return np.where(inside, k * dx, 0.0), np.where(inside, k * dy, 0.0), inside.astype(np.float64)


def _grid(width: int, height: int):
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return xs, ys


def _pack(fx, fy, mask) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([fx, fy], axis=-1), mask


def trace_cylinder_flow(x0: float, r: float, eta: float, z_bg: float, width: int, height: int):
    """Flow (H x W x 2) and silhouette mask (H x W) of an upright glass cylinder."""
    _check_cylinder(r, eta, z_bg)
    xs, ys = _grid(width, height)
    return _pack(*_cylinder_field(xs, ys, x0, r, eta, z_bg, float(width)))


def glass_with_water_flow(
    x0: float,
    r: float,
    eta_glass: float,
    eta_water: float,
    waterline_y: float,
    z_bg: float,
    width: int,
    height: int,
):
    _check_cylinder(r, eta_glass, z_bg)
    if eta_water < 1.0:
        raise ParameterError("water index must be >= 1", eta_water=eta_water)
    if not 0 < waterline_y < height:
        raise ParameterError("waterline must lie inside the image", waterline_y=waterline_y)
    xs, ys = _grid(width, height)
    return _pack(*_water_field(xs, ys, x0, r, eta_glass, eta_water, waterline_y, z_bg, float(width)))


def lens_flow(cx: float, cy: float, r: float, k: float, width: int, height: int):
    if not r > 2:
        raise ParameterError("radius must exceed 2 px", r=r)
    if not -0.9 <= k <= 0.9:
        raise ParameterError("magnification coefficient outside [-0.9, 0.9]", k=k)
    xs, ys = _grid(width, height)
    return _pack(*_lens_field(xs, ys, cx, cy, r, k))


# -- filter and border smoothing ---------------------------------------------------


def synthesize_filter(mask: np.ndarray, color, colored: bool) -> np.ndarray:
    out = np.ones((*mask.shape, 3))
    if not colored:
        return out
    color = np.asarray(color, dtype=np.float64)
    inside = np.asarray(mask) > 0.5
    out[inside] = color
    return out


def _box_blur(img: np.ndarray, px: int) -> np.ndarray:
    size = 2 * px + 1
    pad = [(px, px), (px, px)] + [(0, 0)] * (img.ndim - 2)
    padded = np.pad(img, pad, mode="edge")
    c = np.cumsum(np.cumsum(padded, axis=0), axis=1)
    c = np.pad(c, [(1, 0), (1, 0)] + [(0, 0)] * (img.ndim - 2))
    h, w = img.shape[:2]
    total = c[size : size + h, size : size + w] - c[:h, size : size + w] - c[size : size + h, :w] + c[:h, :w]
    return total / (size * size)


def feather_border(matte: Matte, px: int) -> Matte:
    """Soften the mask edge with a box filter and fade the filter to white with it.

    Blurring ``1 - filter`` instead of the mask alone keeps per-pixel color
    variation; for a uniformly colored object it reduces to
    ``m' * C + (1 - m') * white``.
    """
    if px < 0:
        raise ParameterError("feather width must be >= 0", px=px)
    if px == 0:
        return matte
    mask = np.clip(_box_blur(matte.mask.astype(np.float64), px), 0.0, 1.0)
    absorb = _box_blur(1.0 - matte.filter.astype(np.float64), px)
    filt = np.clip(1.0 - absorb, 0.0, 1.0)
    return Matte(mask, filt, matte.flow.copy())


# -- backgrounds -----------------------------------------------------------------


def procedural_background(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    """Smooth RGB texture: plane waves with amplitude falling off as 1/frequency.

    The 1/f falloff mimics the spectrum of natural photographs, so most of
    the energy sits at periods of 4 to 100 pixels.
    """
    xs, ys = _grid(width, height)
    img = np.zeros((height, width, 3))
    f_lo, f_hi = 0.01, 0.25  # cycles per pixel
    for ch in range(3):
        for _ in range(6):
            freq = math.exp(rng.uniform(math.log(f_lo), math.log(f_hi)))
            theta = rng.uniform(0, math.pi)
            phase = rng.uniform(0, 2 * math.pi)
            amp = rng.uniform(0.5, 1.0) * f_lo / freq
            img[..., ch] += amp * np.sin(2 * math.pi * freq * (xs * math.cos(theta) + ys * math.sin(theta)) + phase)
    img -= img.min(axis=(0, 1))
    img /= np.maximum(img.max(axis=(0, 1)), 1e-9)
    return io.quantize(img)


def write_procedural_backgrounds(out_dir, count: int, width: int, height: int, seed: int) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        path = out_dir / f"bg_{i:04d}.png"
        io.write_image(path, procedural_background(rng, width, height))
        paths.append(path)
    return paths


def load_background(path, width: int, height: int) -> np.ndarray:
    """Center-crop to the target aspect ratio and resize."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            w, h = im.size
            target = width / height
            if w / h > target:
                cw, ch = int(round(h * target)), h
            else:
                cw, ch = w, int(round(w / target))
            left, top = (w - cw) // 2, (h - ch) // 2
            im = im.crop((left, top, left + cw, top + ch)).resize((width, height), Image.BILINEAR)
            return np.asarray(im, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError("cannot decode background image", path=str(path), reason=str(exc)) from None


# -- sample generation -------------------------------------------------------------


def _canonical_coords(aug: AugRecord, width: int, height: int):
    xs, ys = _grid(width, height)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    a = aug.matrix()
    inv = np.linalg.inv(a)
    px = xs + aug.crop[0] - cx
    py = ys + aug.crop[1] - cy
    qx = inv[0, 0] * px + inv[0, 1] * py + cx
    qy = inv[1, 0] * px + inv[1, 1] * py + cy
    return qx, qy, a


def _geometry_matte(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    w, h = spec.width, spec.height
    g = spec.geometry
    qx, qy, a = _canonical_coords(spec.augmentation, w, h)
    if spec.category == "glass":
        fx, fy, mask = _cylinder_field(qx, qy, g["x0"], g["r"], spec.refractive_index, g["z_bg"], float(w))
    elif spec.category == "glass_with_water":
        fx, fy, mask = _water_field(
            qx, qy, g["x0"], g["r"], spec.refractive_index, g["eta_water"], g["waterline_y"], g["z_bg"], float(w)
        )
    else:
        fx, fy, mask = _lens_field(qx, qy, g["cx"], g["cy"], g["r"], g["k"])
    # displacements live in the canonical frame; map them into the image frame
    flow = np.stack([a[0, 0] * fx + a[0, 1] * fy, a[1, 0] * fx + a[1, 1] * fy], axis=-1)
    flow[..., 0] = np.clip(flow[..., 0], -w, w)
    flow[..., 1] = np.clip(flow[..., 1], -h, h)
    return flow, mask


def _draw_geometry(rng: np.random.Generator, category: str, w: int, h: int) -> tuple[dict, float]:
    if category == "lens":
        geom = {
            "cx": float(rng.uniform(0.35, 0.65) * w),
            "cy": float(rng.uniform(0.35, 0.65) * h),
            "r": float(rng.uniform(0.15, 0.3) * min(w, h)),
            "k": float(rng.choice([-1.0, 1.0]) * rng.uniform(0.2, 0.7)),
        }
        return geom, 1.5
    geom = {
        "x0": float(rng.uniform(0.35, 0.65) * w),
        "r": float(rng.uniform(0.1, 0.22) * w),
        "z_bg": float(rng.uniform(0.1, 0.3) * w),
    }
    eta = float(rng.uniform(1.4, 1.6))
    if category == "glass_with_water":
        geom["eta_water"] = 1.33
        geom["waterline_y"] = float(rng.uniform(0.3, 0.7) * h)
    return geom, eta


def _draw_augmentation(rng: np.random.Generator, w: int, h: int) -> AugRecord:
    return AugRecord(
        rotation=float(rng.uniform(-20, 20)),
        scale=float(rng.uniform(0.85, 1.15)),
        shear=float(rng.uniform(-0.1, 0.1)),
        crop=(float(rng.uniform(-0.1, 0.1) * w), float(rng.uniform(-0.1, 0.1) * h), w, h),
        color_gain=tuple(float(v) for v in rng.uniform(0.85, 1.15, size=3)),
        color_offset=tuple(float(v) for v in rng.uniform(-0.05, 0.05, size=3)),
        border_feather_px=int(rng.integers(0, 3)),
    )


def random_scene_spec(
    seed: int, category: str, colored: bool, width: int = 64, height: int = 64, background_id: str = ""
) -> SceneSpec:
    """Draw a random scene for one group; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    geom, eta = _draw_geometry(rng, category, width, height)
    color = tuple(float(v) for v in rng.uniform(*FILTER_RANGE, size=3)) if colored else (1.0, 1.0, 1.0)
    spec = SceneSpec(category, colored, geom, color, eta, width, height, background_id, seed)
    for _ in range(10):
        spec.augmentation = _draw_augmentation(rng, width, height)
        if _geometry_matte(spec)[1].sum() >= MIN_OBJECT_PIXELS:
            return spec
    spec.augmentation = AugRecord(crop=(0.0, 0.0, width, height))
    return spec


def sample_group(rng: np.random.Generator, weights: dict | None = None) -> tuple[bool, str]:
    """Pick (colored, category) with probabilities proportional to ``weights``."""
    weights = weights or FULL_TRAIN_COUNTS
    keys = list(weights)
    p = np.array([weights[k] for k in keys], dtype=np.float64)
    return keys[rng.choice(len(keys), p=p / p.sum())]


def generate_sample(spec: SceneSpec, background: np.ndarray, swap_flow_axes: bool = False) -> Sample:
    """Render one sample. ``swap_flow_axes`` stores the ground-truth flow planes
    in (row, column) order while rendering stays physical; it exists to measure
    how much the x = column convention matters."""
    w, h = spec.width, spec.height
    background = np.asarray(background, dtype=np.float64)
    if background.shape != (h, w, 3):
        raise ParameterError("background is not at the target resolution", shape=list(background.shape))
    aug = spec.augmentation
    flow, mask = _geometry_matte(spec)
    filt = synthesize_filter(mask, spec.filter_color, spec.colored)
    gt = feather_border(Matte(mask, filt, flow), aug.border_feather_px).astype(np.float32)
    bg = io.quantize(np.asarray(aug.color_gain) * background + np.asarray(aug.color_offset))
    rendered = composite(gt, bg, binarize=False)
    if swap_flow_axes:
        gt = Matte(gt.mask, gt.filter, np.ascontiguousarray(gt.flow[..., ::-1]))
    return Sample(rendered, bg, gt, spec)


# -- datasets ------------------------------------------------------------------------


def list_backgrounds(bg_dir) -> list[Path]:
    bg_dir = Path(bg_dir)
    if not bg_dir.is_dir():
        raise DataError("background directory not found", path=str(bg_dir))
    paths = sorted(p for p in bg_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not paths:
        raise DataError("background directory contains no images", path=str(bg_dir))
    return paths


def generate_dataset(
    counts: dict[str, dict[str, int]],
    bg_dir,
    out_dir,
    seed: int,
    width: int = 64,
    height: int = 64,
    swap_flow_axes: bool = False,
) -> list[dict]:
    """Render every configured sample and write files plus ``manifest.jsonl``.

    ``counts`` maps split name to ``{group: n}`` where a group is e.g.
    ``colored_glass``. Sample ``i`` (global order) uses seed ``seed ^ i``.
    """
    for split, groups in counts.items():
        for g, n in groups.items():
            parse_group(g)
            if n < 0:
                raise ParameterError("sample counts must be >= 0", split=split, group=g)
    bg_paths = list_backgrounds(bg_dir)
    backgrounds: dict[int, np.ndarray] = {}
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "samples").mkdir(exist_ok=True)
    except OSError as exc:
        raise DataError("output directory is not writable", path=str(out_dir), reason=str(exc)) from None

    records = []
    index = 0
    for split in sorted(counts):
        for group in sorted(counts[split]):
            colored, category = parse_group(group)
            for _ in range(counts[split][group]):
                sample_seed = seed ^ index
                pick = int(np.random.default_rng([sample_seed, 1]).integers(len(bg_paths)))
                if pick not in backgrounds:
                    backgrounds[pick] = load_background(bg_paths[pick], width, height)
                spec = random_scene_spec(sample_seed, category, colored, width, height, bg_paths[pick].name)
                sample = generate_sample(spec, backgrounds[pick], swap_flow_axes)
                sid = f"{split}_{index:06d}"
                rel = {
                    "input_path": f"samples/{sid}_input.png",
                    "background_path": f"samples/{sid}_background.png",
                    "matte_path": f"samples/{sid}_matte.ctom",
                }
                try:
                    io.write_image(out_dir / rel["input_path"], sample.input)
                    io.write_image(out_dir / rel["background_path"], sample.background)
                    io.write_matte(out_dir / rel["matte_path"], sample.gt)
                except OSError as exc:
                    raise DataError("cannot write sample", path=str(out_dir), reason=str(exc)) from None
                records.append(
                    {
                        "id": sid,
                        "split": split,
                        "group": group,
                        "category": category,
                        "colored": colored,
                        "seed": sample_seed,
                        "spec": spec.to_dict(),
                        **rel,
                    }
                )
                index += 1
    io.write_manifest(out_dir / "manifest.jsonl", records)
    return records


def manifest_digest(out_dir) -> str:
    """SHA-256 over the manifest and every file it references."""
    out_dir = Path(out_dir)
    h = hashlib.sha256((out_dir / "manifest.jsonl").read_bytes())
    for rec in io.read_manifest(out_dir / "manifest.jsonl"):
        for path in io.iter_manifest_paths(out_dir / "manifest.jsonl", rec):
            h.update(path.read_bytes())
    return h.hexdigest()
