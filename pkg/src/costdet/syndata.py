"""Deterministic synthetic multi-channel slices with elliptical lesions.

Each slice is a C×H×W float32 image with intensities in [0,1]. Lesions are
filled ellipses with a channel-dependent contrast signature (darker on
channel 1, brighter on channel 2) over smoothed background noise. Some
slices additionally contain unannotated low-contrast distractor blobs with
the same signature, so a detector faces genuine false-positive pressure and
the faintest true lesions are genuinely missable.

On-disk layout (all integers in JSON, channel buffers little-endian float32):
    <dir>/manifest.json      slice ids, dims, splits, SHA-256 per buffer
    <dir>/annotations.json   per-slice lesion bboxes + row-major RLE masks
    <dir>/channels/<id>.f32  raw C×H×W float32 buffer, C order
RLE masks are alternating (skip, run) counts starting with a skip.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError

MANIFEST_FORMAT = "costdet-dataset-v1"

# Unannotated distractor blobs: per-slice probability, count range, and
# contrast range. The band sits below the true-lesion contrast floor
# (0.2): separable in the limit, but close enough that a half-trained
# detector keeps firing on the strongest ones, which gives the error
# weights a real false-positive rate to trade against. Kept rare and to
# at most one per slice; frequent or lesion-grade distractors slow every
# regime's convergence and in the extreme flip the class prior, teaching
# the classifier that lesion-shaped intensity is background.
DISTRACTOR_PROB = 0.3
DISTRACTOR_MAX = 1
DISTRACTOR_CONTRAST = (0.06, 0.13)

_SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Lesion:
    """One annotated lesion: tight pixel bbox + binary bitmap."""

    bbox: tuple  # (x1, y1, x2, y2), x2/y2 exclusive
    mask: np.ndarray  # H×W uint8, nonzero only inside bbox
    significant: bool = True

    def __eq__(self, other):
        if not isinstance(other, Lesion):
            return NotImplemented
        return (
            tuple(self.bbox) == tuple(other.bbox)
            and self.significant == other.significant
            and np.array_equal(self.mask, other.mask)
        )


@dataclass(eq=False)
class SyntheticSlice:
    """One image: C×H×W float32 channels in [0,1] plus its lesion list."""

    channels: np.ndarray
    lesions: list
    slice_id: str
    split: str

    @property
    def is_positive(self):
        return len(self.lesions) > 0

    def __eq__(self, other):
        if not isinstance(other, SyntheticSlice):
            return NotImplemented
        return (
            self.slice_id == other.slice_id
            and self.split == other.split
            and np.array_equal(self.channels, other.channels)
            and self.lesions == other.lesions
        )


@dataclass
class GenConfig:
    """Generator settings; identical configs give bit-identical datasets."""

    n_slices: int = 200
    positive_fraction: float = 0.4
    channels: int = 3
    height: int = 64
    width: int = 64
    radius_range: tuple = (4.0, 9.0)
    contrast_range: tuple = (0.2, 0.55)
    noise_sigma: float = 0.05
    seed: int = 0
    split_ratios: tuple = (0.8, 0.1, 0.1)

    def validate(self):
        if self.n_slices < 1:
            raise ConfigError(f"n_slices must be >= 1, got {self.n_slices}")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ConfigError(
                f"positive_fraction must be in [0, 1], got {self.positive_fraction}"
            )
        if self.channels < 1 or self.height < 16 or self.width < 16:
            raise ConfigError(
                f"non-positive or too-small dimensions: "
                f"C={self.channels}, H={self.height}, W={self.width}"
            )
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ConfigError(f"empty radius range {self.radius_range}")
        if 2 * (hi + 2) >= min(self.height, self.width):
            raise ConfigError(f"radius range {self.radius_range} too large for image")
        clo, chi = self.contrast_range
        if not 0 <= clo <= chi <= 1:
            raise ConfigError(f"contrast range {self.contrast_range} outside [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if len(self.split_ratios) != 3 or min(self.split_ratios) < 0:
            raise ConfigError(f"bad split ratios {self.split_ratios}")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must sum to 1, got {self.split_ratios}")


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _channel_gains(n_channels):
    """Signed per-channel lesion contrast multipliers.

    Channel 1 is darkened and channel 2 brightened by the full contrast
    (ADC-dark / DWI-bright appearance); channel 0 is mildly darkened
    (T2-like); any further channels alternate at half strength.
    """
    gains = np.empty(n_channels)
    for c in range(n_channels):
        if c == 0:
            gains[c] = -0.5
        elif c == 1:
            gains[c] = -1.0
        elif c == 2:
            gains[c] = 1.0
        else:
            gains[c] = 0.5 if c % 2 == 0 else -0.5
    return gains


def _background(rng, n_channels, height, width, noise_sigma):
    """Smoothed blobby noise per channel around a shared base level."""
    base = rng.uniform(0.32, 0.44)
    shared = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (height, width)), sigma=8.0)
    shared /= max(np.abs(shared).max(), 1e-12)
    chans = np.empty((n_channels, height, width))
    for c in range(n_channels):
        blob = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (height, width)), sigma=4.0)
        blob /= max(np.abs(blob).max(), 1e-12)
        chans[c] = (
            base
            + 0.10 * shared
            + 0.08 * blob
            + rng.normal(0.0, noise_sigma, (height, width))
        )
    return chans


def _ellipse_mask(height, width, cx, cy, rx, ry, theta):
    yy, xx = np.mgrid[0:height, 0:width]
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return ((u / rx) ** 2 + (v / ry) ** 2 <= 1.0).astype(np.uint8)


def tight_bbox(mask):
    """Tight (x1, y1, x2, y2) pixel box of a nonempty binary mask."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise DataError("tight_bbox of an empty mask")
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def _boxes_disjoint(a, b, gap=2):
    return (
        a[2] + gap <= b[0] or b[2] + gap <= a[0]
        or a[3] + gap <= b[1] or b[3] + gap <= a[1]
    )


def _draw_blob(rng, cfg, taken_boxes):
    """Sample an ellipse mask whose bbox clears every box in taken_boxes."""
    for _ in range(60):
        rx = rng.uniform(*cfg.radius_range)
        ry = rng.uniform(*cfg.radius_range)
        theta = rng.uniform(0.0, np.pi)
        margin = max(rx, ry) + 2.0
        cx = rng.uniform(margin, cfg.width - margin)
        cy = rng.uniform(margin, cfg.height - margin)
        mask = _ellipse_mask(cfg.height, cfg.width, cx, cy, rx, ry, theta)
        if mask.sum() < 4:
            continue
        bbox = tight_bbox(mask)
        if all(_boxes_disjoint(bbox, tb) for tb in taken_boxes):
            return mask, bbox
    return None, None


def _paint(channels, mask, gains, contrast):
    on = mask.astype(bool)
    for c in range(channels.shape[0]):
        channels[c][on] += gains[c] * contrast


def generate(cfg):
    """Produce exactly cfg.n_slices slices, bit-identical for identical cfg."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    gains = _channel_gains(cfg.channels)
    splits = _split_assignment(cfg.n_slices, cfg.split_ratios)
    slices = []
    for i in range(cfg.n_slices):
        channels = _background(rng, cfg.channels, cfg.height, cfg.width, cfg.noise_sigma)
        taken, lesions = [], []
        if rng.random() < cfg.positive_fraction:
            for _ in range(int(rng.integers(1, 4))):
                mask, bbox = _draw_blob(rng, cfg, taken)
                if mask is None:
                    continue
                _paint(channels, mask, gains, rng.uniform(*cfg.contrast_range))
                taken.append(bbox)
                lesions.append(Lesion(bbox=bbox, mask=mask, significant=True))
        if rng.random() < DISTRACTOR_PROB:
            for _ in range(int(rng.integers(1, DISTRACTOR_MAX + 1))):
                mask, bbox = _draw_blob(rng, cfg, taken)
                if mask is None:
                    continue
                _paint(channels, mask, gains, rng.uniform(*DISTRACTOR_CONTRAST))
                taken.append(bbox)
        channels = np.clip(channels, 0.0, 1.0).astype(np.float32)
        slices.append(
            SyntheticSlice(
                channels=channels,
                lesions=lesions,
                slice_id=f"s{i:05d}",
                split=splits[i],
            )
        )
    return slices


def _split_assignment(n, ratios):
    n_train = int(np.floor(n * ratios[0]))
    n_val = int(np.floor(n * ratios[1]))
    return (
        ["train"] * n_train
        + ["val"] * n_val
        + ["test"] * (n - n_train - n_val)
    )


# ---------------------------------------------------------------------------
# run-length encoded masks
# ---------------------------------------------------------------------------


def encode_mask_rle(mask):
    """Row-major RLE: alternating (skip, run) counts starting with a skip.

    The trailing skip is omitted, so an empty mask encodes to [].
    """
    flat = np.asarray(mask).reshape(-1) != 0
    n = flat.size
    if n == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [n]])
    counts = [int(x) for x in np.diff(bounds)]
    if flat[0]:
        counts = [0] + counts
    if len(counts) % 2 == 1:
        counts = counts[:-1]
    return counts


def decode_mask_rle(counts, height, width):
    """Inverse of encode_mask_rle for an H×W uint8 bitmap."""
    if len(counts) % 2 == 1:
        raise DataError(f"RLE counts must pair (skip, run), got {len(counts)} values")
    flat = np.zeros(height * width, dtype=np.uint8)
    pos = 0
    for i in range(0, len(counts), 2):
        pos += counts[i]
        run = counts[i + 1]
        if pos + run > flat.size:
            raise DataError("RLE exceeds mask size")
        flat[pos : pos + run] = 1
        pos += run
    return flat.reshape(height, width)


# ---------------------------------------------------------------------------
# dataset I/O
# ---------------------------------------------------------------------------


def _sha256(data):
    return hashlib.sha256(data).hexdigest()


def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def save_dataset(slices, dir_path):
    """Write manifest/annotations/channel buffers; returns the manifest dict."""
    if not slices:
        c = h = w = 0
    else:
        c, h, w = slices[0].channels.shape
    os.makedirs(os.path.join(dir_path, "channels"), exist_ok=True)
    entries = []
    annotations = {}
    for slc in slices:
        if slc.channels.shape != (c, h, w):
            raise DataError(f"inconsistent channel shape on slice {slc.slice_id}")
        buf = np.ascontiguousarray(slc.channels, dtype="<f4").tobytes()
        fname = f"channels/{slc.slice_id}.f32"
        with open(os.path.join(dir_path, fname), "wb") as f:
            f.write(buf)
        entries.append(
            {
                "slice_id": slc.slice_id,
                "split": slc.split,
                "file": fname,
                "sha256": _sha256(buf),
            }
        )
        annotations[slc.slice_id] = [
            {
                "bbox": [int(v) for v in les.bbox],
                "significant": bool(les.significant),
                "mask_rle": encode_mask_rle(les.mask),
            }
            for les in slc.lesions
        ]
    manifest = {
        "format": MANIFEST_FORMAT,
        "channels": int(c),
        "height": int(h),
        "width": int(w),
        "n_slices": len(slices),
        "split_counts": {s: sum(1 for e in entries if e["split"] == s) for s in _SPLITS},
        "slices": entries,
    }
    _dump_json(manifest, os.path.join(dir_path, "manifest.json"))
    _dump_json(annotations, os.path.join(dir_path, "annotations.json"))
    return manifest


def load_dataset(dir_path):
    """Read a dataset directory back into SyntheticSlice objects."""
    manifest_path = os.path.join(dir_path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise DataError(f"manifest.json not found in {dir_path}")
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DataError(f"unknown dataset format {manifest.get('format')!r}")
    anno_path = os.path.join(dir_path, "annotations.json")
    if not os.path.isfile(anno_path):
        raise DataError(f"annotations.json not found in {dir_path}")
    with open(anno_path, encoding="utf-8") as f:
        annotations = json.load(f)

    c, h, w = manifest["channels"], manifest["height"], manifest["width"]
    slices = []
    for entry in manifest["slices"]:
        sid = entry["slice_id"]
        if entry["split"] not in _SPLITS:
            raise DataError(f"bad split {entry['split']!r} on slice {sid}")
        path = os.path.join(dir_path, entry["file"])
        try:
            with open(path, "rb") as f:
                buf = f.read()
        except OSError as exc:
            raise DataError(f"cannot read channel buffer for slice {sid}: {exc}") from exc
        if len(buf) != c * h * w * 4:
            raise DataError(
                f"truncated channel buffer for slice {sid}: "
                f"{len(buf)} bytes, expected {c * h * w * 4}"
            )
        if _sha256(buf) != entry["sha256"]:
            raise DataError(f"checksum mismatch for slice {sid}")
        channels = np.frombuffer(buf, dtype="<f4").reshape(c, h, w).copy()
        lesions = []
        for rec in annotations.get(sid, []):
            mask = decode_mask_rle(rec["mask_rle"], h, w)
            lesions.append(
                Lesion(
                    bbox=tuple(int(v) for v in rec["bbox"]),
                    mask=mask,
                    significant=bool(rec["significant"]),
                )
            )
        slices.append(
            SyntheticSlice(channels=channels, lesions=lesions, slice_id=sid, split=entry["split"])
        )
    return slices


def split_of(slices, split):
    return [s for s in slices if s.split == split]


# ---------------------------------------------------------------------------
# affine augmentation
# ---------------------------------------------------------------------------


def _inverse_affine(angle_deg, tx, ty, scale, height, width):
    """(matrix, offset) mapping output (row, col) to input (row, col).

    Forward transform: rotate by angle_deg and scale about the image center,
    then translate by (tx, ty) pixels in (x, y).
    """
    th = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    center = np.array([(height - 1) / 2.0, (width - 1) / 2.0])
    shift = np.array([ty, tx], dtype=float)
    inv = rot.T / scale
    offset = center - inv @ (center + shift)
    return inv, offset


def apply_affine(slc, angle_deg=0.0, tx=0.0, ty=0.0, scale=1.0):
    """Transform channels, masks, and boxes jointly; drop vanished lesions.

    Boxes are recomputed as tight boxes of the transformed masks. Channels
    use bilinear resampling, masks nearest-neighbor, both padded with zeros.
    """
    c, h, w = slc.channels.shape
    inv, offset = _inverse_affine(angle_deg, tx, ty, scale, h, w)
    channels = np.empty_like(slc.channels)
    for ci in range(c):
        channels[ci] = ndimage.affine_transform(
            slc.channels[ci], inv, offset=offset, order=1, mode="constant", cval=0.0
        )
    channels = np.clip(channels, 0.0, 1.0)
    lesions = []
    for les in slc.lesions:
        mask = ndimage.affine_transform(
            les.mask, inv, offset=offset, order=0, mode="constant", cval=0
        )
        if not mask.any():
            continue
        lesions.append(Lesion(bbox=tight_bbox(mask), mask=mask, significant=les.significant))
    return SyntheticSlice(
        channels=channels, lesions=lesions, slice_id=slc.slice_id, split=slc.split
    )


def augment_affine(slc, seed):
    """Random rotation (±15°), translation (±4 px), scale (0.9 to 1.1)."""
    rng = np.random.default_rng(seed)
    return apply_affine(
        slc,
        angle_deg=rng.uniform(-15.0, 15.0),
        tx=rng.uniform(-4.0, 4.0),
        ty=rng.uniform(-4.0, 4.0),
        scale=rng.uniform(0.9, 1.1),
    )
