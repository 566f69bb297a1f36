"""Dataset plumbing: manifests, image decoding, augmentation, batch streams.

A dataset is a directory with a JSON manifest listing image records. Each
record carries an image path, the set of positive anomaly-type codes (empty
for normal images), optional per-type mask paths for evaluation, a split
tag and an object category. Training is weakly supervised: the batch stream
exposes only images and image-level labels, masks are read exclusively by
the evaluation path.

Manifest schema (version 1):

    {
      "schema_version": 1,
      "image_size": [h, w],
      "channels": 1 or 3,
      "alpha": float,
      "classes": ["AK", ...],
      "category": str,
      "records": [
        {"image": "images/x.png", "labels": ["AK"],
         "masks": {"AK": "masks/x.png"}, "split": "train"},
        ...
      ]
    }

Paths are relative to the manifest's directory. Nonzero mask pixels mark
anomalous ground truth.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError
from .sampler import BalancedSampler

SCHEMA_VERSION = 1

# Industrial defect code vocabulary. Codes are unique two-letter tags; the
# normal (defect-free) code carries no mask.
DEFECT_CODES = {
    "AK": "Pit",
    "BX": "Deformation",
    "CH": "Abrasion",
    "HS": "Scratch",
    "PS": "Damage",
    "QS": "Missing Parts",
    "YW": "Foreign Objects",
    "ZW": "Contamination",
}
NORMAL_CODE = "OK"

REFERENCE_SIZE = 256  # translation bounds below are stated at this size
MAX_ROTATION_DEG = 15.0
MAX_TRANSLATION_PX = 20.0
BRIGHTNESS_RANGE = (-0.1, 0.1)
CONTRAST_RANGE = (0.8, 1.2)


@dataclass
class SampleRecord:
    """One image: path, positive type codes, optional masks, split tag."""

    image_path: str
    labels: list  # positive defect codes; empty for normal images
    mask_paths: dict = field(default_factory=dict)  # code -> path
    split: str = "train"
    category: str = ""

    def is_normal(self):
        return len(self.labels) == 0


@dataclass
class DatasetManifest:
    records: list
    classes: list  # ordered anomaly-type vocabulary (M codes)
    image_size: tuple  # (h, w)
    channels: int
    alpha: float
    category: str = ""
    root: str = ""

    @property
    def num_types(self):
        return len(self.classes)

    def split_records(self, split):
        return [r for r in self.records if r.split == split]

    def one_hot(self, record) -> np.ndarray:
        y = np.zeros(len(self.classes), dtype=np.float32)
        for code in record.labels:
            y[self.classes.index(code)] = 1.0
        return y


def _require(cond, message):
    if not cond:
        raise DataError(message)


def load_manifest(path) -> DatasetManifest:
    """Load and validate a dataset manifest.

    Checks the schema version, code vocabulary, per-record invariants
    (train records have at most one positive label, a mask implies the
    matching label) and that every referenced file exists. Every class in
    the vocabulary must appear in at least one test record.
    """
    if not os.path.isfile(path):
        raise DataError(f"manifest not found: {path}")
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest is not valid JSON: {path}: {exc}") from exc
    _require(raw.get("schema_version") == SCHEMA_VERSION,
             f"unsupported manifest schema version {raw.get('schema_version')!r}")
    classes = list(raw.get("classes", []))
    _require(len(classes) > 0, "manifest declares no anomaly classes")
    _require(len(set(classes)) == len(classes), "duplicate class codes in manifest")
    for code in classes:
        _require(code in DEFECT_CODES, f"unknown defect code {code!r} in manifest")
    root = os.path.dirname(os.path.abspath(path))
    records = []
    seen_in_test = set()
    for i, rec in enumerate(raw.get("records", [])):
        where = f"record {i}"
        split = rec.get("split")
        _require(split in ("train", "test"), f"{where}: bad split {split!r}")
        labels = list(rec.get("labels", []))
        for code in labels:
            _require(code in classes, f"{where}: label {code!r} not in class vocabulary")
        _require(len(set(labels)) == len(labels), f"{where}: duplicate labels")
        if split == "train":
            _require(len(labels) <= 1,
                     f"{where}: train records must have at most one positive label")
        image_path = os.path.join(root, rec.get("image", ""))
        _require(os.path.isfile(image_path), f"{where}: missing image file {image_path}")
        mask_paths = {}
        for code, rel in rec.get("masks", {}).items():
            _require(code in labels,
                     f"{where}: mask for {code!r} but label is not positive")
            mask_path = os.path.join(root, rel)
            _require(os.path.isfile(mask_path), f"{where}: missing mask file {mask_path}")
            mask_paths[code] = mask_path
        if split == "test":
            seen_in_test.update(labels)
        records.append(SampleRecord(image_path=image_path, labels=labels,
                                    mask_paths=mask_paths, split=split,
                                    category=rec.get("category", raw.get("category", ""))))
    _require(len(records) > 0, "manifest contains no records")
    for code in classes:
        _require(code in seen_in_test, f"class {code!r} has no test records")
    h, w = raw.get("image_size", (0, 0))
    _require(h > 0 and w > 0, "manifest image_size must be positive")
    channels = int(raw.get("channels", 3))
    _require(channels in (1, 3), "channels must be 1 or 3")
    alpha = float(raw.get("alpha", 0.0))
    _require(0.0 <= alpha < 1.0, "alpha must lie in [0, 1)")
    return DatasetManifest(records=records, classes=classes, image_size=(int(h), int(w)),
                           channels=channels, alpha=alpha,
                           category=raw.get("category", ""), root=root)


def save_manifest(manifest: DatasetManifest, path):
    """Write a manifest as schema-version-1 JSON with paths relative to it."""
    root = os.path.dirname(os.path.abspath(path))
    records = []
    for rec in manifest.records:
        entry = {
            "image": os.path.relpath(rec.image_path, root),
            "labels": list(rec.labels),
            "split": rec.split,
        }
        if rec.mask_paths:
            entry["masks"] = {c: os.path.relpath(p, root) for c, p in rec.mask_paths.items()}
        records.append(entry)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "image_size": list(manifest.image_size),
        "channels": manifest.channels,
        "alpha": manifest.alpha,
        "classes": list(manifest.classes),
        "category": manifest.category,
        "records": records,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def convert_real_iad(root_dir, out_path):
    """Placeholder for mapping an on-disk multi-view industrial layout to a
    manifest. Views would be flattened to independent images. Not bundled."""
    raise NotImplementedError(
        "external dataset conversion is not bundled; write a manifest directly"
    )


# ---------------------------------------------------------------------------
# decoding and augmentation
# ---------------------------------------------------------------------------


def decode_image(path, channels=3) -> np.ndarray:
    """Read an 8-bit PNG into a float32 (c, h, w) array scaled to [0, 1]."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB" if channels == 3 else "L")
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    if channels == 1:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr)


def decode_mask(path, shape) -> np.ndarray:
    """Read a binary mask PNG (nonzero = anomalous) as uint8 (h, w)."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode mask {path}: {exc}") from exc
    if arr.shape != tuple(shape):
        raise DataError(f"mask {path} has shape {arr.shape}, expected {tuple(shape)}")
    return (arr > 0).astype(np.uint8)


def augment(image: np.ndarray, rng, p=0.5) -> np.ndarray:
    """Random train-time augmentation of a (c, h, w) image in [0, 1].

    With probability p applies, jointly: rotation within +-15 degrees,
    translation within +-20 px (scaled by image size relative to 256),
    a brightness offset in [-0.1, 0.1] and a contrast gain in [0.8, 1.2]
    around mid-gray. Exposed borders replicate edge pixels. The output is
    clamped to [0, 1]; labels are untouched by construction.
    """
    if p <= 0.0 or rng.random() >= p:
        return image
    c, h, w = image.shape
    theta = np.deg2rad(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
    bound = MAX_TRANSLATION_PX * min(h, w) / REFERENCE_SIZE
    dy, dx = rng.uniform(-bound, bound, size=2)
    offset_b = rng.uniform(*BRIGHTNESS_RANGE)
    gain = rng.uniform(*CONTRAST_RANGE)

    cos_t, sin_t = np.cos(theta), np.sin(theta)
    inv_rot = np.array([[cos_t, sin_t], [-sin_t, cos_t]])
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    # input coords = inv_rot @ (output - center - t) + center
    shift = center - inv_rot @ (center + np.array([dy, dx]))
    warped = np.empty_like(image)
    for ch in range(c):
        ndimage.affine_transform(image[ch], inv_rot, offset=shift,
                                 output=warped[ch], order=1, mode="nearest")
    out = gain * (warped - 0.5) + 0.5 + offset_b
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset access and batch streams
# ---------------------------------------------------------------------------


class Dataset:
    """Decoded view of one manifest split with an in-memory image cache.

    Sampling classes for balanced training are the M anomaly types plus
    the normal group, in vocabulary order with normal last.
    """

    def __init__(self, manifest: DatasetManifest, split, cache=True):
        self.manifest = manifest
        self.split = split
        self.records = manifest.split_records(split)
        if not self.records:
            raise DataError(f"manifest has no {split!r} records")
        self.cache = {} if cache else None

    def __len__(self):
        return len(self.records)

    def load_image(self, i) -> np.ndarray:
        if self.cache is not None and i in self.cache:
            return self.cache[i]
        arr = decode_image(self.records[i].image_path, self.manifest.channels)
        if arr.shape[1:] != self.manifest.image_size:
            raise DataError(
                f"image {self.records[i].image_path} has size {arr.shape[1:]},"
                f" manifest says {self.manifest.image_size}"
            )
        if self.cache is not None:
            self.cache[i] = arr
        return arr

    def labels_matrix(self) -> np.ndarray:
        return np.stack([self.manifest.one_hot(r) for r in self.records])

    def class_indices(self):
        """Index arrays per sampling class: one per anomaly type, then normal."""
        y = self.labels_matrix()
        groups = [np.flatnonzero(y[:, k] == 1) for k in range(self.manifest.num_types)]
        groups.append(np.flatnonzero(y.sum(axis=1) == 0))
        return groups

    def load_masks(self, i) -> np.ndarray:
        """Per-type binary masks (M, h, w); zero planes where no mask exists."""
        rec = self.records[i]
        h, w = self.manifest.image_size
        masks = np.zeros((self.manifest.num_types, h, w), dtype=np.uint8)
        for code, path in rec.mask_paths.items():
            masks[self.manifest.classes.index(code)] = decode_mask(path, (h, w))
        return masks

    def has_complete_masks(self):
        """True when every anomalous record in the split carries all its masks."""
        return all(set(r.labels) == set(r.mask_paths) for r in self.records)


def epoch_batches(dataset: Dataset, batch_size, balanced, seed, augment_p=0.5):
    """Yield (images, labels) batches for one training epoch.

    Balanced mode draws classes uniformly until every class (each anomaly
    type and the normal group) has been drawn at least its population size,
    rounded up to whole batches. Plain mode is one shuffled pass including
    a final partial batch. Augmentation uses the given seed, so a fixed
    (seed, epoch) pair reproduces the stream exactly.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    y = dataset.labels_matrix()

    def emit(indices):
        images = np.stack([augment(dataset.load_image(i), rng, augment_p) for i in indices])
        return images, y[indices]

    if balanced:
        groups = dataset.class_indices()
        groups = [g for g in groups if g.size > 0]
        sampler = BalancedSampler(groups, seed=seed, batch_size=batch_size)
        while True:
            yield emit(np.asarray(sampler.next_batch()))
            if sampler.epoch_complete():
                return
    else:
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), batch_size):
            yield emit(order[start:start + batch_size])


def evaluation_arrays(dataset: Dataset):
    """Stack a split for evaluation: images (N,c,h,w), labels (N,M), masks.

    Masks come back as (N, M, h, w) uint8 when every anomalous record has
    them, else None (pixel metrics are then unavailable).
    """
    images = np.stack([dataset.load_image(i) for i in range(len(dataset))])
    y = dataset.labels_matrix()
    if not dataset.has_complete_masks():
        return images, y, None
    masks = np.stack([dataset.load_masks(i) for i in range(len(dataset))])
    return images, y, masks
