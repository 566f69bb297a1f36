"""Procedural synthetic dataset: textured plates with typed surface defects.

Each image is a brushed, vignetted gray plate with mild low-frequency and
grain noise, rendered at a configurable square size. Anomalous images carry
exactly one defect drawn from up to four visually distinct families:

    AK  pit            small dark disc with a soft rim
    HS  scratch        thin bright polyline
    ZW  contamination  large low-contrast star-convex blob
    QS  missing part   flat erased rectangle (texture removed)

Every defect mask is one 8-connected component by construction. The train
split mixes in anomalous images according to the noise ratio alpha
(anomalous fraction of the training split); the remaining anomalous images
go to the test split with exact masks. Optionally a separate manifest of
two-defect composite images is produced for multi-type explanation checks.
Generation is fully deterministic: the same config yields byte-identical
files.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .data import DatasetManifest, SampleRecord, save_manifest
from .errors import ConfigError

FAMILY_ORDER = ["AK", "HS", "ZW", "QS"]  # preference order when M < 4

CATEGORY = "synthetic-plate"


@dataclass
class SynthConfig:
    out_dir: str
    image_size: int = 64
    num_types: int = 3
    normal_count: int = 500
    per_type_count: int = 67
    alpha: float = 0.2
    train_normal_fraction: float = 0.8
    composite_count: int = 0
    seed: int = 0

    def classes(self):
        return sorted(FAMILY_ORDER[: self.num_types])

    def validate(self):
        if not 1 <= self.num_types <= 4:
            raise ConfigError("num_types must be in 1..4")
        if self.image_size < 32:
            raise ConfigError("image_size must be >= 32")
        if self.normal_count < 2 or self.per_type_count < 1:
            raise ConfigError("need at least 2 normal and 1 per-type image")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError("alpha must lie in [0, 1)")
        if not 0.0 < self.train_normal_fraction < 1.0:
            raise ConfigError("train_normal_fraction must lie in (0, 1)")
        if self.composite_count > 0 and self.num_types < 2:
            raise ConfigError("composites need at least two anomaly types")

    def split_counts(self):
        """(train_normal, train_per_type list, test_normal, test_per_type list)."""
        b = int(round(self.normal_count * self.train_normal_fraction))
        a = int(np.floor(self.alpha * b / (1.0 - self.alpha)))
        m = self.num_types
        train_per_type = [a // m + (1 if k < a % m else 0) for k in range(m)]
        for k, t in enumerate(train_per_type):
            if self.per_type_count - t < 1:
                raise ConfigError(
                    f"counts incompatible with alpha={self.alpha}: type"
                    f" {self.classes()[k]} would keep no test images"
                )
        test_per_type = [self.per_type_count - t for t in train_per_type]
        return b, train_per_type, self.normal_count - b, test_per_type


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _base_plate(size, rng):
    """Brushed plate texture in [0, 1]; returns (gray image, base level)."""
    level = rng.uniform(0.55, 0.65)
    coarse = rng.standard_normal((size // 8, size // 8))
    low = ndimage.zoom(coarse, 8, order=3)[:size, :size]
    low = ndimage.gaussian_filter(low, 2.0)
    streaks = ndimage.gaussian_filter(rng.standard_normal((size, size)), (0.6, 4.0))
    grain = rng.standard_normal((size, size)) * 0.015
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cc = (size - 1) / 2.0
    vignette = 0.06 * (((yy - cc) ** 2 + (xx - cc) ** 2) / (2 * cc * cc))
    img = level + 0.035 * low + 0.03 * streaks + grain - vignette
    return np.clip(img, 0.0, 1.0), level


def _pick_center(size, margin, rng, x_range=None):
    lo, hi = (0.0, 1.0) if x_range is None else x_range
    cy = rng.uniform(margin, size - 1 - margin)
    x_lo = max(margin, lo * (size - 1))
    x_hi = min(size - 1 - margin, hi * (size - 1))
    cx = rng.uniform(x_lo, x_hi)
    return cy, cx


def _render_pit(img, rng, x_range=None):
    size = img.shape[0]
    r = rng.uniform(2.5, 5.0)
    cy, cx = _pick_center(size, r + 3.0, rng, x_range)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d = np.hypot(yy - cy, xx - cx)
    depth = rng.uniform(0.28, 0.45)
    img -= depth * _smoothstep((r - d) / 1.5 + 0.5)
    return d <= r


def _render_scratch(img, rng, x_range=None):
    size = img.shape[0]
    width = rng.uniform(0.9, 1.4)
    margin = 5.0
    cy, cx = _pick_center(size, margin, rng, x_range)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    points = [np.array([cy, cx])]
    for _ in range(int(rng.integers(2, 5))):
        angle += rng.uniform(-0.6, 0.6)
        step = rng.uniform(7.0, 13.0)
        nxt = points[-1] + step * np.array([np.sin(angle), np.cos(angle)])
        lo, hi = (0.0, 1.0) if x_range is None else x_range
        nxt[0] = np.clip(nxt[0], margin, size - 1 - margin)
        nxt[1] = np.clip(nxt[1], max(margin, lo * (size - 1)),
                         min(size - 1 - margin, hi * (size - 1)))
        points.append(nxt)
    # stamp the polyline densely so the mask stays one connected piece
    stamps = []
    for a, b in zip(points[:-1], points[1:]):
        n = max(2, int(np.ceil(np.linalg.norm(b - a) / 0.5)) + 1)
        ts = np.linspace(0.0, 1.0, n)[:, None]
        stamps.append(a[None] + ts * (b - a)[None])
    stamps = np.concatenate(stamps)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d = np.min(np.hypot(yy[None] - stamps[:, 0, None, None],
                        xx[None] - stamps[:, 1, None, None]), axis=0)
    gain = rng.uniform(0.22, 0.35)
    img += gain * _smoothstep((width - d) / 1.2 + 0.5)
    return d <= width


def _render_contamination(img, rng, x_range=None):
    size = img.shape[0]
    r0 = rng.uniform(5.0, 8.5)
    cy, cx = _pick_center(size, 1.35 * r0 + 2.0, rng, x_range)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    d = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    mod = np.zeros_like(theta)
    for j in (2, 3, 4):
        mod += rng.uniform(-1.0, 1.0) * np.cos(j * theta + rng.uniform(0.0, 2 * np.pi))
    peak = np.max(np.abs(mod)) or 1.0
    rad = r0 * (1.0 + 0.3 * mod / peak)  # star-convex, connected by construction
    delta = rng.choice([-1.0, 1.0]) * rng.uniform(0.07, 0.13)
    img += delta * _smoothstep((rad - d) / 2.0 + 0.5)
    return d <= rad


def _render_missing(img, rng, x_range=None):
    size = img.shape[0]
    hh = rng.uniform(8.0, 15.0)
    ww = rng.uniform(8.0, 15.0)
    margin = max(hh, ww) / 2.0 + 2.0
    cy, cx = _pick_center(size, margin, rng, x_range)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    inside_y = _smoothstep((hh / 2.0 - np.abs(yy - cy)) / 1.0 + 0.5)
    inside_x = _smoothstep((ww / 2.0 - np.abs(xx - cx)) / 1.0 + 0.5)
    m = inside_y * inside_x
    fill = rng.uniform(0.38, 0.46)  # flat, texture-free cavity
    img *= 1.0 - m
    img += fill * m
    return (np.abs(yy - cy) <= hh / 2.0) & (np.abs(xx - cx) <= ww / 2.0)


_RENDERERS = {
    "AK": _render_pit,
    "HS": _render_scratch,
    "ZW": _render_contamination,
    "QS": _render_missing,
}


def render_image(size, defects, rng, channels=3):
    """Render one plate with the given defect codes; returns (image, masks).

    ``defects`` is a list of (code, x_range) pairs applied in order; masks
    come back as a dict code -> bool array. The image is (h, w, channels)
    float in [0, 1].
    """
    gray, _ = _base_plate(size, rng)
    masks = {}
    for code, x_range in defects:
        masks[code] = _RENDERERS[code](gray, rng, x_range)
    gray = np.clip(gray, 0.0, 1.0)
    if channels == 1:
        return gray[..., None], masks
    tint = np.array([1.0, 0.985, 0.96])
    return np.clip(gray[..., None] * tint[None, None], 0.0, 1.0), masks


def _to_png(arr) -> Image.Image:
    u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if u8.shape[-1] == 1:
        return Image.fromarray(u8[..., 0], mode="L")
    return Image.fromarray(u8, mode="RGB")


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------


def generate_synthetic(config: SynthConfig):
    """Render the dataset to disk and return (manifest_path, stats).

    Layout: ``out_dir/{images,masks}/*.png`` plus ``manifest.json`` and,
    when composites are requested, ``composites.json``. stats carries the
    class histogram (including normal), the achieved alpha and the
    composite manifest path (or None).
    """
    config.validate()
    classes = config.classes()
    train_n, train_per_type, test_n, test_per_type = config.split_counts()
    img_dir = os.path.join(config.out_dir, "images")
    mask_dir = os.path.join(config.out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)

    records = []
    histogram = {code: 0 for code in classes}
    histogram["OK"] = 0
    serial = itertools.count()

    def make(split, codes, with_masks, x_ranges=None):
        idx = next(serial)
        rng = np.random.default_rng((config.seed, idx))
        ranges = x_ranges if x_ranges is not None else [None] * len(codes)
        image, masks = render_image(config.image_size, list(zip(codes, ranges)),
                                    rng, channels=3)
        stem = f"{split}_{idx:04d}_" + ("-".join(codes) if codes else "OK")
        image_path = os.path.join(img_dir, stem + ".png")
        _to_png(image).save(image_path)
        mask_paths = {}
        if with_masks:
            for code in codes:
                mp = os.path.join(mask_dir, f"{stem}_{code}.png")
                Image.fromarray(masks[code].astype(np.uint8) * 255, mode="L").save(mp)
                mask_paths[code] = mp
        for code in codes:
            histogram[code] += 1
        if not codes:
            histogram["OK"] += 1
        return SampleRecord(image_path=image_path, labels=list(codes),
                            mask_paths=mask_paths, split=split, category=CATEGORY)

    for _ in range(train_n):
        records.append(make("train", [], with_masks=False))
    for k, code in enumerate(classes):
        for _ in range(train_per_type[k]):
            records.append(make("train", [code], with_masks=False))
    for _ in range(test_n):
        records.append(make("test", [], with_masks=False))
    for k, code in enumerate(classes):
        for _ in range(test_per_type[k]):
            records.append(make("test", [code], with_masks=True))

    n_anom_train = sum(train_per_type)
    achieved_alpha = n_anom_train / max(1, train_n + n_anom_train)
    manifest = DatasetManifest(records=records, classes=classes,
                               image_size=(config.image_size, config.image_size),
                               channels=3, alpha=achieved_alpha, category=CATEGORY,
                               root=config.out_dir)
    manifest_path = os.path.join(config.out_dir, "manifest.json")
    save_manifest(manifest, manifest_path)

    composite_path = None
    if config.composite_count > 0:
        pairs = list(itertools.combinations(range(len(classes)), 2))
        chosen = [pairs[i % len(pairs)] for i in range(config.composite_count)]
        covered = {classes[k] for pair in chosen for k in pair}
        if covered != set(classes):
            raise ConfigError(
                "composite_count too small to cover every class at least once"
            )
        comp_records = []
        for a, b in chosen:
            comp_records.append(make("test", [classes[a], classes[b]],
                                     with_masks=True,
                                     x_ranges=[(0.0, 0.38), (0.62, 1.0)]))
        comp_manifest = DatasetManifest(records=comp_records, classes=classes,
                                        image_size=(config.image_size, config.image_size),
                                        channels=3, alpha=0.0, category=CATEGORY,
                                        root=config.out_dir)
        composite_path = os.path.join(config.out_dir, "composites.json")
        save_manifest(comp_manifest, composite_path)

    stats = {
        "histogram": histogram,
        "achieved_alpha": achieved_alpha,
        "train_images": train_n + n_anom_train,
        "test_images": test_n + sum(test_per_type),
        "composite_manifest": composite_path,
    }
    return manifest_path, stats
