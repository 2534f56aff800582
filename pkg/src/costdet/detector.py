"""Two-stage detector over fixed handcrafted per-box features.

Stage 1 scores and refines square anchors tiled on an 8-px grid (objectness
plus box deltas); surviving proposals go through greedy NMS. Stage 2 runs
three small dense heads per proposal: class probability, box refinement,
and an M×M mask grid. There is no learned backbone: every box is described
by per-channel intensity statistics plus inner-vs-ring contrast and
normalized geometry, so training runs in seconds and every gradient is
checkable by finite differences.

Box convention: (x1, y1, x2, y2) with exclusive right/bottom edges, so
width = x2 − x1 and pixel column x is inside iff x1 ≤ x < x2.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError

STRIDE = 8
ANCHOR_SIZES = (8, 16, 24)
HIDDEN = 32
MASK_GRID = 8
NMS_IOU = 0.5
K_PRE = 64
K_POST = 16
POS_IOU = 0.5
NEG_IOU = 0.2
# decoded log-size deltas are clamped to keep exp() bounded
DELTA_CLAMP = 4.0

CHECKPOINT_FORMAT = "costdet-checkpoint-v1"


# ---------------------------------------------------------------------------
# anchors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Anchor:
    bbox: tuple  # clipped (x1, y1, x2, y2)
    grid: tuple  # (row, col) cell position
    size_index: int


@functools.lru_cache(maxsize=8)
def _anchor_table(height, width):
    """(boxes, grids, size_indices) arrays for the fixed anchor tiling."""
    if height % STRIDE or width % STRIDE or height <= 0 or width <= 0:
        raise ConfigError(f"image dims must be positive multiples of {STRIDE}, got {height}x{width}")
    boxes, grids, sizes = [], [], []
    for i in range(height // STRIDE):
        cy = i * STRIDE + STRIDE / 2.0
        for j in range(width // STRIDE):
            cx = j * STRIDE + STRIDE / 2.0
            for k, size in enumerate(ANCHOR_SIZES):
                half = size / 2.0
                boxes.append(
                    (
                        max(cx - half, 0.0),
                        max(cy - half, 0.0),
                        min(cx + half, float(width)),
                        min(cy + half, float(height)),
                    )
                )
                grids.append((i, j))
                sizes.append(k)
    return (
        np.array(boxes, dtype=np.float64),
        np.array(grids, dtype=np.intp),
        np.array(sizes, dtype=np.intp),
    )


def build_anchors(height, width):
    """All anchors for an H×W image: 3 sizes per 8-px grid cell, clipped."""
    boxes, grids, sizes = _anchor_table(height, width)
    return [
        Anchor(bbox=tuple(b), grid=tuple(int(v) for v in g), size_index=int(s))
        for b, g, s in zip(boxes, grids, sizes)
    ]


# ---------------------------------------------------------------------------
# box geometry
# ---------------------------------------------------------------------------


def _iou_matrix(a, b):
    """Pairwise IoU between (N,4) and (M,4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0.0, None) * np.clip(a[:, 3] - a[:, 1], 0.0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0.0, None) * np.clip(b[:, 3] - b[:, 1], 0.0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms(boxes, scores, iou_thresh=NMS_IOU):
    """Greedy non-maximum suppression; returns kept indices, best first.

    Boxes overlapping a kept box with IoU strictly above iou_thresh are
    removed. Score ties break toward the lower input index.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = int(order[0])
        keep.append(i)
        if order.size == 1:
            break
        rest = order[1:]
        ious = _iou_matrix(boxes[i : i + 1], boxes[rest])[0]
        order = rest[ious <= iou_thresh]
    return keep


def encode_deltas(anchors, targets):
    """Box regression targets: (dx/wa, dy/ha, log(w/wa), log(h/ha))."""
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    wa, ha = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    wt, ht = t[:, 2] - t[:, 0], t[:, 3] - t[:, 1]
    out = np.empty_like(a)
    out[:, 0] = ((t[:, 0] + t[:, 2]) - (a[:, 0] + a[:, 2])) / (2.0 * wa)
    out[:, 1] = ((t[:, 1] + t[:, 3]) - (a[:, 1] + a[:, 3])) / (2.0 * ha)
    out[:, 2] = np.log(wt / wa)
    out[:, 3] = np.log(ht / ha)
    return out


def decode_boxes(anchors, deltas, image_size=None):
    """Inverse of encode_deltas; optionally clip to (height, width) bounds."""
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    wa, ha = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    cx = (a[:, 0] + a[:, 2]) / 2.0 + d[:, 0] * wa
    cy = (a[:, 1] + a[:, 3]) / 2.0 + d[:, 1] * ha
    w = wa * np.exp(np.clip(d[:, 2], -DELTA_CLAMP, DELTA_CLAMP))
    h = ha * np.exp(np.clip(d[:, 3], -DELTA_CLAMP, DELTA_CLAMP))
    out = np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1)
    if image_size is not None:
        height, width = image_size
        out[:, 0] = np.clip(out[:, 0], 0.0, width - 1.0)
        out[:, 1] = np.clip(out[:, 1], 0.0, height - 1.0)
        out[:, 2] = np.clip(out[:, 2], None, float(width))
        out[:, 3] = np.clip(out[:, 3], None, float(height))
        # keep at least one pixel of extent after clipping
        out[:, 2] = np.maximum(out[:, 2], out[:, 0] + 1.0)
        out[:, 3] = np.maximum(out[:, 3], out[:, 1] + 1.0)
    return out


# ---------------------------------------------------------------------------
# handcrafted per-box features
# ---------------------------------------------------------------------------


RING_WIDTH = 2


class SliceFeatures:
    """Per-box statistics over one slice's channels.

    Feature vector per box (feature_dim = 5C + 4):
        [mean, std, min, max] per channel over the box interior,
        then inner-minus-ring mean contrast per channel (2-px ring),
        then (cx/W, cy/H, w/W, h/H) of the continuous box.
    """

    def __init__(self, channels):
        self.channels = np.asarray(channels, dtype=np.float64)
        if self.channels.ndim != 3:
            raise ConfigError(f"channels must be C×H×W, got shape {self.channels.shape}")

    @property
    def feature_dim(self):
        return 5 * self.channels.shape[0] + 4

    def for_boxes(self, boxes):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        n_ch, height, width = self.channels.shape
        out = np.empty((boxes.shape[0], self.feature_dim))
        for i, (x1, y1, x2, y2) in enumerate(boxes):
            if not (math.isfinite(x1) and math.isfinite(y1) and math.isfinite(x2) and math.isfinite(y2)):
                raise DataError(f"non-finite box ({x1}, {y1}, {x2}, {y2})")
            xi1 = max(int(math.floor(x1)), 0)
            yi1 = max(int(math.floor(y1)), 0)
            xi2 = min(int(math.ceil(x2)), width)
            yi2 = min(int(math.ceil(y2)), height)
            if xi2 <= xi1 or yi2 <= yi1:
                raise DataError(f"degenerate box ({x1}, {y1}, {x2}, {y2})")
            inner = self.channels[:, yi1:yi2, xi1:xi2]
            mean = inner.mean(axis=(1, 2))
            out[i, 0 : 4 * n_ch : 4] = mean
            out[i, 1 : 4 * n_ch : 4] = inner.std(axis=(1, 2))
            out[i, 2 : 4 * n_ch : 4] = inner.min(axis=(1, 2))
            out[i, 3 : 4 * n_ch : 4] = inner.max(axis=(1, 2))
            xo1, yo1 = max(xi1 - RING_WIDTH, 0), max(yi1 - RING_WIDTH, 0)
            xo2, yo2 = min(xi2 + RING_WIDTH, width), min(yi2 + RING_WIDTH, height)
            outer = self.channels[:, yo1:yo2, xo1:xo2]
            ring_area = outer[0].size - inner[0].size
            if ring_area > 0:
                ring_mean = (outer.sum(axis=(1, 2)) - inner.sum(axis=(1, 2))) / ring_area
            else:
                ring_mean = mean
            out[i, 4 * n_ch : 5 * n_ch] = mean - ring_mean
            out[i, 5 * n_ch + 0] = (x1 + x2) / 2.0 / width
            out[i, 5 * n_ch + 1] = (y1 + y2) / 2.0 / height
            out[i, 5 * n_ch + 2] = (x2 - x1) / width
            out[i, 5 * n_ch + 3] = (y2 - y1) / height
        return out


def extract_features(slc):
    """Feature extractor bound to one slice (channels duck-typed)."""
    return SliceFeatures(slc.channels)


# ---------------------------------------------------------------------------
# parameters and heads
# ---------------------------------------------------------------------------


class HeadParams:
    """All trainable head parameters over a fixed feature dimension.

    RPN: one shared tanh hidden layer, split objectness and box-delta output
    layers. RoI: three independent 2-layer networks (class, box, mask), so
    loss routing can leave whole heads untouched. Hidden weights get seeded
    normal init scaled by 1/sqrt(fan_in); every output layer starts at zero,
    which makes untrained probabilities exactly 0.5 and untrained deltas 0.
    """

    kind = "heads"

    def __init__(self, channels=3, hidden=HIDDEN, mask_grid=MASK_GRID, seed=0):
        self.channels = int(channels)
        self.hidden = int(hidden)
        self.mask_grid = int(mask_grid)
        self.seed = int(seed)
        self.feature_dim = 5 * self.channels + 4
        self.store = ad.ParamStore(self.seed)
        scale = 1.0 / math.sqrt(self.feature_dim)
        s = self.store
        s.add_normal("rpn.hidden.w", (self.feature_dim, hidden), scale)
        s.add_zeros("rpn.hidden.b", (1, hidden))
        s.add_zeros("rpn.cls.w", (hidden, 1))
        s.add_zeros("rpn.cls.b", (1, 1))
        s.add_zeros("rpn.reg.w", (hidden, 4))
        s.add_zeros("rpn.reg.b", (1, 4))
        for prefix, n_out in (
            ("roi.cls", 1),
            ("roi.box", 4),
            ("roi.mask", mask_grid * mask_grid),
        ):
            s.add_normal(f"{prefix}.hidden.w", (self.feature_dim, hidden), scale)
            s.add_zeros(f"{prefix}.hidden.b", (1, hidden))
            s.add_zeros(f"{prefix}.out.w", (hidden, n_out))
            s.add_zeros(f"{prefix}.out.b", (1, n_out))


class OracleParams:
    """Stub checkpoint that returns the GT lesions as perfect detections."""

    kind = "oracle"

    def __init__(self, mask_grid=MASK_GRID):
        self.mask_grid = int(mask_grid)


def _dense(store, prefix, x):
    h = ad.tanh(ad.add(ad.matmul(x, store[f"{prefix}.hidden.w"]), store[f"{prefix}.hidden.b"]))
    return ad.add(ad.matmul(h, store[f"{prefix}.out.w"]), store[f"{prefix}.out.b"])


# Input preconditioning applied by both heads before their first layer.
# The handcrafted features live on very different scales (window means sit
# near 0.4 with spread ~0.08, ring contrasts within a few hundredths of 0);
# without a fixed shift/scale per feature type, gradient descent at a
# practical learning rate barely moves along the small-scale directions,
# which happen to be the most discriminative ones. Constants are frozen by
# feature type so checkpoints stay comparable.
FEATURE_NORM = {
    "mean": (0.4, 0.08),
    "std": (0.06, 0.03),
    "min": (0.22, 0.09),
    "max": (0.54, 0.09),
    "contrast": (0.0, 0.03),
    "center": (0.5, 0.3),
    "extent": (0.25, 0.1),
}


@functools.lru_cache(maxsize=8)
def feature_norm(channels):
    """(shift, scale) vectors matching the SliceFeatures layout."""
    dim = 5 * channels + 4
    shift = np.zeros(dim)
    scale = np.ones(dim)
    for c in range(channels):
        for k, name in enumerate(("mean", "std", "min", "max")):
            shift[4 * c + k], scale[4 * c + k] = FEATURE_NORM[name]
    shift[4 * channels : 5 * channels], scale[4 * channels : 5 * channels] = FEATURE_NORM["contrast"]
    for j, name in enumerate(("center", "center", "extent", "extent")):
        shift[5 * channels + j], scale[5 * channels + j] = FEATURE_NORM[name]
    return shift, scale


def _preconditioned(features, channels):
    shift, scale = feature_norm(channels)
    return (np.asarray(features, dtype=np.float64) - shift) / scale


def rpn_forward(anchors, features, params):
    """Per-anchor (objectness, box deltas) as autodiff Values.

    features: (A, feature_dim) array aligned with anchors, raw (the head
    applies the fixed preconditioning itself).
    """
    features = np.asarray(features)
    if len(anchors) != features.shape[0]:
        raise ConfigError(f"{len(anchors)} anchors vs {features.shape[0]} feature rows")
    x = ad.Value(_preconditioned(features, params.channels))
    s = params.store
    h = ad.tanh(ad.add(ad.matmul(x, s["rpn.hidden.w"]), s["rpn.hidden.b"]))
    objectness = ad.sigmoid(ad.add(ad.matmul(h, s["rpn.cls.w"]), s["rpn.cls.b"]))
    deltas = ad.add(ad.matmul(h, s["rpn.reg.w"]), s["rpn.reg.b"])
    return objectness, deltas


def roi_forward(proposals, params):
    """Per-proposal (class prob, box deltas, M×M mask grid) as Values."""
    raw = np.stack([p.roi_features for p in proposals])
    feats = ad.Value(_preconditioned(raw, params.channels))
    s = params.store
    m = params.mask_grid
    class_prob = ad.sigmoid(_dense(s, "roi.cls", feats))
    deltas = _dense(s, "roi.box", feats)
    masks = ad.reshape(ad.sigmoid(_dense(s, "roi.mask", feats)), (len(proposals), m, m))
    return class_prob, deltas, masks


# ---------------------------------------------------------------------------
# proposals and labels
# ---------------------------------------------------------------------------


@dataclass
class Proposal:
    bbox: np.ndarray  # refined anchor box, clipped
    objectness: float
    roi_features: np.ndarray
    anchor_index: int
    label: int | None = None  # p*: 1, 0, or None when excluded from the loss
    assigned_gt_index: int | None = None


@dataclass
class Detection:
    bbox: tuple
    class_prob: float
    mask_grid: np.ndarray  # (M, M) floats in [0, 1]


def select_proposals(scores, boxes, k_pre=K_PRE, nms_iou=NMS_IOU, k_post=K_POST):
    """Indices of surviving proposals: top-k_pre → greedy NMS → top-k_post.

    Returned in descending score order; ties break toward lower input index.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")[:k_pre]
    kept = nms(np.asarray(boxes)[order], scores[order], nms_iou)
    return [int(order[k]) for k in kept[:k_post]]


def assign_labels(proposals, gt_lesions, pos_iou=POS_IOU, neg_iou=NEG_IOU):
    """Set each proposal's label: 1 (IoU ≥ pos_iou, assigned to argmax GT),
    0 (IoU < neg_iou against all GT), None (in between, excluded)."""
    if not gt_lesions:
        for p in proposals:
            p.label, p.assigned_gt_index = 0, None
        return proposals
    gt_boxes = np.array([les.bbox for les in gt_lesions], dtype=np.float64)
    if proposals:
        ious = _iou_matrix(np.stack([p.bbox for p in proposals]), gt_boxes)
        for i, p in enumerate(proposals):
            best = int(np.argmax(ious[i]))
            if ious[i, best] >= pos_iou:
                p.label, p.assigned_gt_index = 1, best
            elif ious[i, best] < neg_iou:
                p.label, p.assigned_gt_index = 0, None
            else:
                p.label, p.assigned_gt_index = None, None
    return proposals


def label_anchors(anchor_boxes, gt_boxes, pos_iou=POS_IOU, neg_iou=NEG_IOU):
    """Anchor-level labels for the RPN losses.

    Returns (labels, gt_index): labels hold 1/0/−1 (−1 = excluded), gt_index
    the assigned GT per positive anchor (−1 otherwise). In addition to the
    IoU thresholds, the single best anchor per GT is forced positive, so no
    GT is left without a positive anchor on the coarse grid.
    """
    anchor_boxes = np.asarray(anchor_boxes, dtype=np.float64).reshape(-1, 4)
    n = anchor_boxes.shape[0]
    labels = np.zeros(n, dtype=np.intp)
    gt_index = np.full(n, -1, dtype=np.intp)
    if len(gt_boxes) == 0:
        return labels, gt_index
    ious = _iou_matrix(anchor_boxes, gt_boxes)
    best_gt = np.argmax(ious, axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou >= pos_iou] = 1
    labels[(best_iou >= neg_iou) & (best_iou < pos_iou)] = -1
    gt_index[labels == 1] = best_gt[labels == 1]
    # force-match: best anchor per GT is positive regardless of IoU
    for g in range(ious.shape[1]):
        a = int(np.argmax(ious[:, g]))
        labels[a] = 1
        gt_index[a] = g
    return labels, gt_index


def mask_target(gt_mask, box, grid=MASK_GRID):
    """GT bitmap cropped to box, nearest-neighbor resampled to grid×grid."""
    x1, y1, x2, y2 = box
    height, width = gt_mask.shape
    cols = np.floor(x1 + (np.arange(grid) + 0.5) * (x2 - x1) / grid).astype(int)
    rows = np.floor(y1 + (np.arange(grid) + 0.5) * (y2 - y1) / grid).astype(int)
    cols = np.clip(cols, 0, width - 1)
    rows = np.clip(rows, 0, height - 1)
    return (gt_mask[np.ix_(rows, cols)] != 0).astype(np.float64)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


@dataclass
class DetectionPool:
    """Threshold-independent second-stage outputs for one slice."""

    boxes: np.ndarray  # (P, 4) refined, clipped
    probs: np.ndarray  # (P,)
    masks: np.ndarray  # (P, M, M)


def build_proposals(slc, params, feats=None):
    """Run stage 1 on a slice: anchors → scores/deltas → NMS'd proposals."""
    _, height, width = np.asarray(slc.channels).shape
    anchor_boxes, _, _ = _anchor_table(height, width)
    anchors = build_anchors(height, width)
    if feats is None:
        feats = extract_features(slc)
    anchor_feats = feats.for_boxes(anchor_boxes)
    objectness, deltas = rpn_forward(anchors, anchor_feats, params)
    scores = objectness.data[:, 0]
    decoded = decode_boxes(anchor_boxes, deltas.data, image_size=(height, width))
    keep = select_proposals(scores, decoded)
    proposals = [
        Proposal(
            bbox=decoded[i],
            objectness=float(scores[i]),
            roi_features=None,
            anchor_index=i,
        )
        for i in keep
    ]
    prop_feats = feats.for_boxes(np.stack([p.bbox for p in proposals]))
    for p, f in zip(proposals, prop_feats):
        p.roi_features = f
    return proposals


def infer_pool(slc, params):
    """Both stages up to (but excluding) threshold filtering and final NMS."""
    channels = np.asarray(slc.channels)
    _, height, width = channels.shape
    m = params.mask_grid
    if params.kind == "oracle":
        lesions = [les for les in slc.lesions if les.significant]
        if not lesions:
            return DetectionPool(
                boxes=np.zeros((0, 4)), probs=np.zeros(0), masks=np.zeros((0, m, m))
            )
        boxes = np.array([les.bbox for les in lesions], dtype=np.float64)
        masks = np.stack([mask_target(les.mask, les.bbox, m) for les in lesions])
        return DetectionPool(boxes=boxes, probs=np.ones(len(lesions)), masks=masks)
    proposals = build_proposals(slc, params)
    class_prob, deltas, masks = roi_forward(proposals, params)
    refined = decode_boxes(
        np.stack([p.bbox for p in proposals]), deltas.data, image_size=(height, width)
    )
    return DetectionPool(boxes=refined, probs=class_prob.data[:, 0], masks=masks.data)


def detections_from_pool(pool, threshold=0.7, max_det=6, nms_iou=NMS_IOU):
    """Filter p ≥ threshold, NMS, keep the top max_det by probability."""
    sel = np.flatnonzero(pool.probs >= threshold)
    if sel.size == 0:
        return []
    boxes, probs, masks = pool.boxes[sel], pool.probs[sel], pool.masks[sel]
    keep = nms(boxes, probs, nms_iou)[:max_det]
    return [
        Detection(bbox=tuple(boxes[k]), class_prob=float(probs[k]), mask_grid=masks[k])
        for k in keep
    ]


def infer(slc, params, threshold=0.7, max_det=6):
    """Full inference on one slice; pure (no mutation of slice or params)."""
    return detections_from_pool(infer_pool(slc, params), threshold, max_det)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params, path, cost=None, extra=None):
    """One file: compact JSON header line + raw little-endian float64 blob."""
    header = {"format": CHECKPOINT_FORMAT, "kind": params.kind, "cost": cost or {}}
    if params.kind == "heads":
        blob = np.ascontiguousarray(params.store.flat_data(), dtype="<f8").tobytes()
        header.update(
            {
                "channels": params.channels,
                "hidden": params.hidden,
                "mask_grid": params.mask_grid,
                "seed": params.seed,
                "n_values": params.store.flat_data().size,
                "blob_sha256": hashlib.sha256(blob).hexdigest(),
            }
        )
    elif params.kind == "oracle":
        blob = b""
        header["mask_grid"] = params.mask_grid
    else:
        raise ConfigError(f"unknown params kind {params.kind!r}")
    if extra:
        header["extra"] = extra
    data = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n" + blob
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(data)
    return header


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (params, header)."""
    if not os.path.isfile(path):
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    sep = raw.find(b"\n")
    if sep < 0:
        raise DataError(f"malformed checkpoint {path}: no header line")
    try:
        header = json.loads(raw[:sep].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed checkpoint header in {path}: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"unknown checkpoint format {header.get('format')!r}")
    if header["kind"] == "oracle":
        return OracleParams(mask_grid=header.get("mask_grid", MASK_GRID)), header
    blob = raw[sep + 1 :]
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise DataError(f"checkpoint checksum mismatch: {path}")
    params = HeadParams(
        channels=header["channels"],
        hidden=header["hidden"],
        mask_grid=header["mask_grid"],
        seed=header["seed"],
    )
    flat = np.frombuffer(blob, dtype="<f8")
    if flat.size != header["n_values"]:
        raise DataError(
            f"checkpoint blob holds {flat.size} values, header says {header['n_values']}"
        )
    params.store.load_flat_data(flat)
    return params, header
