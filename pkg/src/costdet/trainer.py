"""SGD training loop over per-slice losses, with per-epoch validation.

Training runs one parameter update per slice (batch size 1). The slice
order is reshuffled every epoch from a seeded generator, so a full run is
reproducible from TrainConfig alone. Handcrafted anchor features and
anchor-level targets are cached per slice between epochs; augmentation
disables the cache because every epoch then sees a different geometry.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.random import default_rng

from . import autodiff as ad
from . import detector, evaluator, losses, syndata
from .errors import ConfigError, DataError

VAL_THRESHOLD = 0.7
# at most half the proposal budget may enter the classification loss as
# positives, so easy negative-dominated slices still contribute negatives
MAX_CLS_POS = detector.K_POST // 2
# proposal-level balancing for the classification loss: on positive slices
# the hardest negatives (highest objectness) are kept at a 3:1 ratio
# against positives; slices without positive proposals keep a fixed number
# of hard negatives
CLS_NEG_PER_POS = 3
CLS_NEG_FLOOR = 4
CLS_NEG_NO_POS = 8


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.001
    seed: int = 0
    cost: losses.CostConfig = field(default_factory=losses.CostConfig)
    augment: bool = False
    checkpoint_every: int = 0  # 0 = no intermediate checkpoints

    def validate(self):
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError(f"epochs must be an integer >= 1, got {self.epochs!r}")
        if not np.isfinite(self.lr) or self.lr < 0:
            raise ConfigError(f"lr must be finite and >= 0, got {self.lr!r}")
        if int(self.checkpoint_every) != self.checkpoint_every or self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be an integer >= 0, got {self.checkpoint_every!r}")
        self.cost.validate()


LOG_COLUMNS = (
    "epoch",
    "rpn_reg",
    "rpn_cls",
    "box",
    "mask",
    "cost_cls",
    "slice_cls",
    "total",
    "val_lesion_fp_per_slice",
    "val_lesion_fnr",
    "val_slice_fpr",
    "val_slice_fnr",
    "wall_time_s",
)


@dataclass
class TrainLog:
    """One row per epoch: mean train loss terms, validation rates, wall time."""

    rows: list
    n_updates: int = 0

    def write_csv(self, path):
        import csv

        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(LOG_COLUMNS)
            for row in self.rows:
                writer.writerow([_cell(row[name]) for name in LOG_COLUMNS])


def _cell(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.10g}"
    return str(v)


# ---------------------------------------------------------------------------
# per-slice forward pass
# ---------------------------------------------------------------------------


class _SliceCache:
    """Per-slice precomputation that is stable across epochs (no augmentation)."""

    def __init__(self):
        self.by_id = {}

    def get(self, slc):
        entry = self.by_id.get(slc.slice_id)
        if entry is None:
            entry = _precompute(slc)
            self.by_id[slc.slice_id] = entry
        return entry


def _precompute(slc):
    channels = np.asarray(slc.channels)
    if not np.isfinite(channels).all():
        raise DataError(f"non-finite channel data on slice {slc.slice_id}")
    _, height, width = channels.shape
    anchors = detector.build_anchors(height, width)
    anchor_boxes = np.array([a.bbox for a in anchors], dtype=np.float64)
    feats = detector.extract_features(slc)
    anchor_feats = feats.for_boxes(anchor_boxes)
    gt = [les for les in slc.lesions if les.significant]
    gt_boxes = np.array([les.bbox for les in gt], dtype=np.float64).reshape(-1, 4)
    labels, gt_index = detector.label_anchors(anchor_boxes, gt_boxes)
    anchor_targets = np.zeros((len(anchors), 4))
    pos = np.flatnonzero(labels == 1)
    if pos.size:
        anchor_targets[pos] = detector.encode_deltas(
            anchor_boxes[pos], gt_boxes[gt_index[pos]]
        )
    return {
        "anchors": anchors,
        "anchor_boxes": anchor_boxes,
        "feats": feats,
        "anchor_feats": anchor_feats,
        "gt": gt,
        "gt_boxes": gt_boxes,
        "anchor_labels": labels,
        "anchor_targets": anchor_targets,
        "shape": (height, width),
    }


def _sample_cls_labels(proposals, max_pos=MAX_CLS_POS):
    """Copy proposal labels, balancing what enters the classification loss.

    Proposals arrive in descending objectness order. Positives beyond the
    per-slice cap are excluded; when positives exist, negatives are capped
    at CLS_NEG_PER_POS per positive (keeping the highest-objectness ones),
    so easy background cannot drown the lesion signal. Slices without any
    positive proposal keep their CLS_NEG_NO_POS hardest negatives. Box and
    mask losses are unaffected and still see every positive.
    """
    labels = [p.label for p in proposals]
    n_pos = sum(1 for lab in labels if lab == 1)
    max_neg = max(CLS_NEG_PER_POS * n_pos, CLS_NEG_FLOOR) if n_pos else CLS_NEG_NO_POS
    kept_pos = kept_neg = 0
    for i, lab in enumerate(labels):
        if lab == 1:
            kept_pos += 1
            if kept_pos > max_pos:
                labels[i] = None
        elif lab == 0:
            kept_neg += 1
            if kept_neg > max_neg:
                labels[i] = None
    return labels


def slice_loss(slc, params, pre=None, cost=None):
    """Both stages on one slice; returns the LossBreakdown."""
    if pre is None:
        pre = _precompute(slc)
    if cost is None:
        cost = losses.CostConfig()
    height, width = pre["shape"]
    objectness, deltas = detector.rpn_forward(pre["anchors"], pre["anchor_feats"], params)
    scores = objectness.data[:, 0]
    decoded = detector.decode_boxes(pre["anchor_boxes"], deltas.data, image_size=(height, width))
    keep = detector.select_proposals(scores, decoded)
    proposals = [
        detector.Proposal(
            bbox=decoded[i],
            objectness=float(scores[i]),
            roi_features=None,
            anchor_index=i,
        )
        for i in keep
    ]
    prop_boxes = np.stack([p.bbox for p in proposals])
    prop_feats = pre["feats"].for_boxes(prop_boxes)
    for p, f in zip(proposals, prop_feats):
        p.roi_features = f
    detector.assign_labels(proposals, pre["gt"])
    class_prob, roi_deltas, roi_masks = detector.roi_forward(proposals, params)
    m = params.mask_grid
    roi_targets = np.zeros((len(proposals), 4))
    mask_targets = np.zeros((len(proposals), m, m))
    for i, p in enumerate(proposals):
        if p.label == 1:
            g = p.assigned_gt_index
            roi_targets[i] = detector.encode_deltas(
                np.asarray(p.bbox).reshape(1, 4), pre["gt_boxes"][g].reshape(1, 4)
            )[0]
            mask_targets[i] = detector.mask_target(pre["gt"][g].mask, p.bbox, m)
    outputs = losses.StageOutputs(
        anchor_objectness=objectness,
        anchor_deltas=deltas,
        anchor_labels=pre["anchor_labels"],
        anchor_delta_targets=pre["anchor_targets"],
        class_prob=class_prob,
        roi_deltas=roi_deltas,
        roi_masks=roi_masks,
        proposal_labels=[p.label for p in proposals],
        cls_labels=_sample_cls_labels(proposals),
        roi_delta_targets=roi_targets,
        mask_targets=mask_targets,
    )
    return losses.total_loss(slc, outputs, cost)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def train(slices, cfg, out_dir=None):
    """Train detection heads on the train split; returns (params, TrainLog).

    Validation metrics are computed on the val split after every epoch at
    the default working threshold. out_dir enables intermediate checkpoints
    when cfg.checkpoint_every > 0.
    """
    cfg.validate()
    train_slices = syndata.split_of(slices, "train")
    val_slices = syndata.split_of(slices, "val")
    if not train_slices:
        raise DataError("empty train split")
    channels = np.asarray(train_slices[0].channels).shape[0]
    params = detector.HeadParams(channels=channels, seed=cfg.seed)
    rng = default_rng(cfg.seed)
    cache = _SliceCache()
    log = TrainLog(rows=[])
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_slices))
        sums = dict.fromkeys(
            ("rpn_reg", "rpn_cls", "box", "mask", "cost_cls", "slice_cls", "total"), 0.0
        )
        for idx in order:
            slc = train_slices[idx]
            if cfg.augment:
                slc = syndata.augment_affine(slc, seed=int(rng.integers(0, 2**31)))
                pre = _precompute(slc)
            else:
                pre = cache.get(slc)
            breakdown = slice_loss(slc, params, pre=pre, cost=cfg.cost)
            scalars = breakdown.scalars()
            if not np.isfinite(scalars["total"]):
                raise DataError(
                    f"training diverged: non-finite loss on slice {slc.slice_id}"
                )
            ad.backward(breakdown.total, params.store)
            params.store.sgd_step(cfg.lr)
            log.n_updates += 1
            for name, v in scalars.items():
                sums[name] += v
        row = {"epoch": epoch}
        for name, total in sums.items():
            row[name] = total / len(train_slices)
        if val_slices:
            rep = evaluate_epoch(params, val_slices, threshold=VAL_THRESHOLD)
            row["val_lesion_fp_per_slice"] = rep.lesion_fp_per_slice
            row["val_lesion_fnr"] = rep.lesion_fnr
            row["val_slice_fpr"] = rep.slice_fpr
            row["val_slice_fnr"] = rep.slice_fnr
        else:
            for name in ("val_lesion_fp_per_slice", "val_lesion_fnr", "val_slice_fpr", "val_slice_fnr"):
                row[name] = float("nan")
        row["wall_time_s"] = time.perf_counter() - t0
        log.rows.append(row)
        if out_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            path = Path(out_dir) / f"epoch{epoch:03d}.ckpt"
            detector.save_checkpoint(
                params, path, cost=cfg.cost.as_dict(), extra={"epoch": epoch}
            )
    return params, log


def evaluate_epoch(params, slices, threshold=VAL_THRESHOLD):
    """Inference metrics for one split; raises on an empty split."""
    return evaluator.evaluate_split(slices, params, threshold=threshold)
