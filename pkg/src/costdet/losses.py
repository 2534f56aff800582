"""Cost-sensitive multi-task training loss.

Six terms: anchor-level box regression and classification, RoI-level box
regression, mask, and cost-weighted classification, plus an optional
slice-level cost-weighted classification term driven by the max over
proposal probabilities. Slices with GT lesions activate all terms; slices
without GT keep only the classification terms' negative parts, so the box,
mask, and anchor-regression heads receive exactly zero gradient there.

total = rpn_reg + rpn_cls + box + mask + cost_cls + slice_cls, summed in
that order for bit-reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError


@dataclass
class CostConfig:
    """Positive/negative error weights for the classification terms.

    (1, 1) everywhere reduces both weighted terms to plain binary cross
    entropy. alpha_* > 1 penalizes false negatives harder; beta_* > 1
    penalizes false positives harder.
    """

    alpha_lesion: float = 1.0
    beta_lesion: float = 1.0
    alpha_slice: float = 1.0
    beta_slice: float = 1.0
    use_slice_loss: bool = False

    def validate(self):
        for name in ("alpha_lesion", "beta_lesion", "alpha_slice", "beta_slice"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")

    def tag(self):
        """Short run label, e.g. a3b1 or a1b1-s3-1."""
        def fmt(x):
            return f"{x:g}"

        base = f"a{fmt(self.alpha_lesion)}b{fmt(self.beta_lesion)}"
        if self.use_slice_loss:
            base += f"-s{fmt(self.alpha_slice)}-{fmt(self.beta_slice)}"
        return base

    def as_dict(self):
        return {
            "alpha_lesion": self.alpha_lesion,
            "beta_lesion": self.beta_lesion,
            "alpha_slice": self.alpha_slice,
            "beta_slice": self.beta_slice,
            "use_slice_loss": self.use_slice_loss,
        }


def _zero():
    return ad.Value(0.0)


@dataclass
class LossBreakdown:
    rpn_reg: ad.Value
    rpn_cls: ad.Value
    box: ad.Value
    mask: ad.Value
    cost_cls: ad.Value
    slice_cls: ad.Value
    total: ad.Value

    def scalars(self):
        return {
            "rpn_reg": self.rpn_reg.item(),
            "rpn_cls": self.rpn_cls.item(),
            "box": self.box.item(),
            "mask": self.mask.item(),
            "cost_cls": self.cost_cls.item(),
            "slice_cls": self.slice_cls.item(),
            "total": self.total.item(),
        }


@dataclass
class StageOutputs:
    """Forward-pass results for one slice, as losses expect them.

    Proposal-side fields may be None/empty when there are no proposals.
    anchor_delta_targets, roi_delta_targets, and mask_targets only need
    valid rows where the corresponding label is 1.
    """

    anchor_objectness: ad.Value  # (A, 1)
    anchor_deltas: ad.Value  # (A, 4)
    anchor_labels: np.ndarray  # (A,) of 1 / 0 / -1 (excluded)
    anchor_delta_targets: np.ndarray  # (A, 4)
    class_prob: ad.Value | None = None  # (P, 1)
    roi_deltas: ad.Value | None = None  # (P, 4)
    roi_masks: ad.Value | None = None  # (P, M, M)
    proposal_labels: list | None = None  # per proposal: 1 / 0 / None
    cls_labels: list | None = None  # sampled labels for cost_cls; None = use proposal_labels
    roi_delta_targets: np.ndarray | None = None  # (P, 4)
    mask_targets: np.ndarray | None = None  # (P, M, M)


# ---------------------------------------------------------------------------
# lesion-level classification
# ---------------------------------------------------------------------------


def lesion_cost_loss(class_prob, labels, cfg):
    """Mean over labeled proposals of −α·p*·log p − β·(1−p*)·log(1−p).

    class_prob: Value of shape (P, 1) or (P,); labels: per-proposal 1, 0, or
    None (excluded). With no labeled proposal the result is an exact,
    detached zero. The two weights multiply their class's partial mean last,
    so scaling alpha scales the positives-only loss exactly.
    """
    labels = list(labels) if labels is not None else []
    pos = [i for i, l in enumerate(labels) if l == 1]
    neg = [i for i, l in enumerate(labels) if l == 0]
    n = len(pos) + len(neg)
    if n == 0:
        return _zero()
    p = class_prob if class_prob.data.ndim == 2 else ad.reshape(class_prob, (-1, 1))
    terms = []
    if pos:
        bce = ad.weighted_bce(ad.gather_rows(p, pos), 1.0, 1.0, 1.0)
        terms.append(ad.mul(ad.mul(ad.sum_reduce(bce), 1.0 / n), cfg.alpha_lesion))
    if neg:
        bce = ad.weighted_bce(ad.gather_rows(p, neg), 0.0, 1.0, 1.0)
        terms.append(ad.mul(ad.mul(ad.sum_reduce(bce), 1.0 / n), cfg.beta_lesion))
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


# ---------------------------------------------------------------------------
# slice-level classification
# ---------------------------------------------------------------------------


def slice_targets(class_prob, labels, gt_present):
    """Lesion-to-slice mapping: (p_slice*, p_slice).

    p_slice* is the max over proposal labels; when no proposal carries a
    positive label it falls back to the slice's GT lesion list (gt_present),
    which also covers the zero-proposal case. p_slice is the differentiable
    max over all proposal probabilities; with no proposals it is a detached
    near-zero constant ("no detection").
    """
    labels = list(labels) if labels is not None else []
    if any(l == 1 for l in labels):
        p_star = 1
    else:
        p_star = 1 if gt_present else 0
    if class_prob is None or class_prob.data.size == 0:
        return p_star, ad.Value(ad.PROB_EPS)
    return p_star, ad.max_reduce(class_prob)


def slice_cost_loss(p_slice_star, p_slice, cfg):
    """−α_slice·p*·log p − β_slice·(1−p*)·log(1−p), a scalar Value."""
    return ad.weighted_bce(p_slice, float(p_slice_star), cfg.alpha_slice, cfg.beta_slice)


# ---------------------------------------------------------------------------
# the six-term total
# ---------------------------------------------------------------------------


def _mean_bce(probs, targets):
    return ad.mean_reduce(ad.weighted_bce(probs, targets, 1.0, 1.0))


def total_loss(slc, outputs, cfg):
    """Assemble the routed multi-task loss for one slice.

    Slices with GT lesions: all six terms (slice_cls only when enabled).
    Slices without: rpn_cls and the negative parts of cost_cls/slice_cls;
    rpn_reg, box, and mask are exact zeros with no gradient path.
    """
    cfg.validate()
    gt_present = any(les.significant for les in slc.lesions)

    # balanced per class: a handful of positive anchors must not be drowned
    # by the ~190 negatives, so each class contributes its own mean
    pos_anchor_idx = np.flatnonzero(outputs.anchor_labels == 1)
    neg_anchor_idx = np.flatnonzero(outputs.anchor_labels == 0)
    if pos_anchor_idx.size and neg_anchor_idx.size:
        pos_bce = _mean_bce(
            ad.gather_rows(outputs.anchor_objectness, pos_anchor_idx),
            np.ones((pos_anchor_idx.size, 1)),
        )
        neg_bce = _mean_bce(
            ad.gather_rows(outputs.anchor_objectness, neg_anchor_idx),
            np.zeros((neg_anchor_idx.size, 1)),
        )
        rpn_cls = ad.mul(ad.add(pos_bce, neg_bce), 0.5)
    elif pos_anchor_idx.size or neg_anchor_idx.size:
        idx = pos_anchor_idx if pos_anchor_idx.size else neg_anchor_idx
        targets = np.full((idx.size, 1), 1.0 if pos_anchor_idx.size else 0.0)
        rpn_cls = _mean_bce(ad.gather_rows(outputs.anchor_objectness, idx), targets)
    else:
        rpn_cls = _zero()

    rpn_reg = _zero()
    box = _zero()
    mask = _zero()
    if gt_present:
        pos_anchor = np.flatnonzero(outputs.anchor_labels == 1)
        if pos_anchor.size:
            pred = ad.gather_rows(outputs.anchor_deltas, pos_anchor)
            rpn_reg = ad.mul(
                ad.smooth_l1(pred, outputs.anchor_delta_targets[pos_anchor]),
                1.0 / pos_anchor.size,
            )
        plabels = outputs.proposal_labels or []
        pos_prop = [i for i, l in enumerate(plabels) if l == 1]
        if pos_prop:
            pred = ad.gather_rows(outputs.roi_deltas, pos_prop)
            box = ad.mul(
                ad.smooth_l1(pred, outputs.roi_delta_targets[pos_prop]),
                1.0 / len(pos_prop),
            )
            mask = _mean_bce(
                ad.gather_rows(outputs.roi_masks, pos_prop),
                outputs.mask_targets[pos_prop],
            )

    cls_labels = outputs.cls_labels if outputs.cls_labels is not None else outputs.proposal_labels
    if outputs.class_prob is not None and cls_labels:
        cost_cls = lesion_cost_loss(outputs.class_prob, cls_labels, cfg)
    else:
        cost_cls = _zero()

    if cfg.use_slice_loss:
        p_star, p_slice = slice_targets(
            outputs.class_prob, outputs.proposal_labels, gt_present
        )
        slice_cls = slice_cost_loss(p_star, p_slice, cfg)
    else:
        slice_cls = _zero()

    total = ad.add(
        ad.add(ad.add(ad.add(ad.add(rpn_reg, rpn_cls), box), mask), cost_cls), slice_cls
    )
    return LossBreakdown(
        rpn_reg=rpn_reg,
        rpn_cls=rpn_cls,
        box=box,
        mask=mask,
        cost_cls=cost_cls,
        slice_cls=slice_cls,
        total=total,
    )
