"""Lesion- and slice-level detection metrics, threshold sweeps, comparisons.

Lesion level: a GT lesion counts as detected (TP) when any detection
overlaps it with IoU ≥ 0.2, as missed (FN) otherwise; a detection counts as
FP when it overlaps no GT at that level. There is no lesion-level TN, so
the FP count is reported as a mean per slice. Slice level: a slice with GT
lesions is TP when it has at least one detection, FN otherwise; a slice
without GT is FP when it has any detection, TN otherwise.

Undefined rates (zero denominator) are reported as NaN, never 0; NaN turns
into null in JSON output.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import detector
from .errors import ConfigError, DataError


def _thread_count():
    try:
        n = int(os.environ.get("COSTDET_THREADS", "1"))
    except ValueError:
        raise ConfigError(f"COSTDET_THREADS must be an integer, got {os.environ['COSTDET_THREADS']!r}")
    return max(n, 1)


def _pool_map(fn, items):
    """Order-preserving map, threaded when COSTDET_THREADS > 1."""
    items = list(items)
    n = _thread_count()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _safe_rate(num, den):
    return num / den if den > 0 else float("nan")


# ---------------------------------------------------------------------------
# geometry and matching
# ---------------------------------------------------------------------------


def iou(a, b):
    """Intersection over union of two (x1, y1, x2, y2) boxes in [0, 1]."""
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(ix2 - ix1, 0.0) * max(iy2 - iy1, 0.0)
    area_a = max(a[2] - a[0], 0.0) * max(a[3] - a[1], 0.0)
    area_b = max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


@dataclass
class LesionMatchResult:
    """Per-slice lesion matching.

    Counts follow set membership: a GT is detected when any detection
    reaches the IoU threshold, and a detection is an FP only when it reaches
    no GT. tp_pairs is a greedy injective (gt_index, det_index) assignment
    for reporting which detection explains which GT; extra detections that
    overlap an already-claimed GT appear in neither list.
    """

    tp_pairs: list  # (gt_index, det_index)
    fp_det_indices: list
    fn_gt_indices: list
    n_gt: int
    n_det: int

    @property
    def n_tp(self):
        return self.n_gt - len(self.fn_gt_indices)

    @property
    def n_fp(self):
        return len(self.fp_det_indices)

    @property
    def n_fn(self):
        return len(self.fn_gt_indices)


def match_lesions(detections, gt_lesions, iou_thresh=0.2):
    """Match one slice's detections against its GT lesions."""
    gts = [les for les in gt_lesions if les.significant]
    n_det, n_gt = len(detections), len(gts)
    overlap = [[iou(d.bbox, g.bbox) for g in gts] for d in detections]
    fn_gt = [
        j for j in range(n_gt)
        if all(overlap[i][j] < iou_thresh for i in range(n_det))
    ]
    fp_det = [
        i for i in range(n_det)
        if all(overlap[i][j] < iou_thresh for j in range(n_gt))
    ]
    order = sorted(range(n_det), key=lambda i: (-detections[i].class_prob, i))
    available = set(range(n_gt))
    pairs = []
    for i in order:
        candidates = [j for j in available if overlap[i][j] >= iou_thresh]
        if candidates:
            j = max(candidates, key=lambda j: (overlap[i][j], -j))
            pairs.append((j, i))
            available.discard(j)
    return LesionMatchResult(
        tp_pairs=sorted(pairs),
        fp_det_indices=fp_det,
        fn_gt_indices=fn_gt,
        n_gt=n_gt,
        n_det=n_det,
    )


def slice_confusion(detections_per_slice, gt_per_slice):
    """Slice-level confusion counts over parallel per-slice lists."""
    if len(detections_per_slice) != len(gt_per_slice):
        raise ConfigError("detections and GT lists differ in length")
    counts = {"tp": 0, "fn": 0, "fp": 0, "tn": 0}
    for dets, gts in zip(detections_per_slice, gt_per_slice):
        positive = any(les.significant for les in gts)
        detected = len(dets) > 0
        if positive:
            counts["tp" if detected else "fn"] += 1
        else:
            counts["fp" if detected else "tn"] += 1
    return counts


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    threshold: float | None
    n_slices: int
    lesion_tp: int
    lesion_fp: int
    lesion_fn: int
    lesion_n_gt: int
    lesion_fp_per_slice: float
    lesion_fnr: float
    slice_tp: int
    slice_fn: int
    slice_fp: int
    slice_tn: int
    slice_fpr: float
    slice_fnr: float
    slice_acc: float

    FIELDS = (
        "threshold",
        "lesion_fp_per_slice",
        "lesion_fnr",
        "slice_fpr",
        "slice_fnr",
        "slice_acc",
        "lesion_tp",
        "lesion_fp",
        "lesion_fn",
        "lesion_n_gt",
        "slice_tp",
        "slice_fn",
        "slice_fp",
        "slice_tn",
        "n_slices",
    )

    def as_dict(self):
        return {name: getattr(self, name) for name in self.FIELDS}


def aggregate(results, threshold=None, fp_denominator="all"):
    """Combine per-slice match results into a MetricsReport.

    fp_denominator: 'all' divides lesion FPs by every slice in the split;
    'positive-only' divides by slices that carry GT lesions.
    """
    results = list(results)
    if not results:
        raise DataError("empty split")
    if fp_denominator not in ("all", "positive-only"):
        raise ConfigError(f"unknown fp_denominator {fp_denominator!r}")
    n_slices = len(results)
    lesion_fp = sum(r.n_fp for r in results)
    lesion_fn = sum(r.n_fn for r in results)
    lesion_tp = sum(r.n_tp for r in results)
    n_gt = sum(r.n_gt for r in results)
    sl = {"tp": 0, "fn": 0, "fp": 0, "tn": 0}
    for r in results:
        if r.n_gt > 0:
            sl["tp" if r.n_det > 0 else "fn"] += 1
        else:
            sl["fp" if r.n_det > 0 else "tn"] += 1
    fp_den = n_slices if fp_denominator == "all" else sl["tp"] + sl["fn"]
    return MetricsReport(
        threshold=threshold,
        n_slices=n_slices,
        lesion_tp=lesion_tp,
        lesion_fp=lesion_fp,
        lesion_fn=lesion_fn,
        lesion_n_gt=n_gt,
        lesion_fp_per_slice=_safe_rate(lesion_fp, fp_den),
        lesion_fnr=_safe_rate(lesion_fn, n_gt),
        slice_tp=sl["tp"],
        slice_fn=sl["fn"],
        slice_fp=sl["fp"],
        slice_tn=sl["tn"],
        slice_fpr=_safe_rate(sl["fp"], sl["fp"] + sl["tn"]),
        slice_fnr=_safe_rate(sl["fn"], sl["fn"] + sl["tp"]),
        slice_acc=_safe_rate(sl["tp"] + sl["tn"], n_slices),
    )


def evaluate_split(slices, params, threshold=0.7, max_det=6, fp_denominator="all"):
    """Run inference and matching over a split; one MetricsReport."""
    slices = list(slices)
    if not slices:
        raise DataError("empty split")
    results = _pool_map(
        lambda slc: match_lesions(
            detector.infer(slc, params, threshold=threshold, max_det=max_det), slc.lesions
        ),
        slices,
    )
    return aggregate(results, threshold=threshold, fp_denominator=fp_denominator)


# ---------------------------------------------------------------------------
# threshold sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    threshold: float
    report: MetricsReport


def threshold_sweep(params, slices, thresholds, max_det=6, fp_denominator="all"):
    """Metrics at every threshold from one cached inference pass per slice."""
    slices = list(slices)
    if not slices:
        raise DataError("empty split")
    thresholds = [float(t) for t in thresholds]
    if not thresholds or any(not 0.0 < t < 1.0 for t in thresholds):
        raise ConfigError(f"thresholds must lie strictly inside (0, 1): {thresholds}")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ConfigError("thresholds must be strictly increasing")
    pools = _pool_map(lambda slc: detector.infer_pool(slc, params), slices)
    rows = []
    for t in thresholds:
        results = [
            match_lesions(detector.detections_from_pool(pool, t, max_det), slc.lesions)
            for pool, slc in zip(pools, slices)
        ]
        rows.append(SweepRow(threshold=t, report=aggregate(results, threshold=t, fp_denominator=fp_denominator)))
    return rows


DEFAULT_SWEEP = tuple(round(0.05 * k, 2) for k in range(1, 20))


# ---------------------------------------------------------------------------
# cost-aware training vs post-training threshold adjustment
# ---------------------------------------------------------------------------


def compare_cost_vs_threshold(
    baseline_params,
    cost_params,
    slices,
    thresholds=DEFAULT_SWEEP,
    fnr_level="lesion",
    threshold=0.7,
    max_det=6,
):
    """Compare a cost-trained model at its working threshold against the
    baseline model swept to the matching FNR.

    The baseline row is the one with FNR closest to the cost model's FNR
    while not exceeding it when possible; ties prefer the threshold nearest
    the working threshold. Returns a JSON-ready dict.
    """
    if fnr_level not in ("lesion", "slice"):
        raise ConfigError(f"fnr_level must be 'lesion' or 'slice', got {fnr_level!r}")
    grid = sorted(set(float(t) for t in thresholds) | {float(threshold)})
    cost_report = evaluate_split(slices, cost_params, threshold=threshold, max_det=max_det)
    rows = threshold_sweep(baseline_params, slices, grid, max_det=max_det)

    key = "lesion_fnr" if fnr_level == "lesion" else "slice_fnr"
    target = getattr(cost_report, key)
    usable = [r for r in rows if not math.isnan(getattr(r.report, key))]
    if not usable or math.isnan(target):
        raise DataError("FNR undefined on this split; cannot match operating points")
    at_or_below = [r for r in usable if getattr(r.report, key) <= target]
    reached = bool(at_or_below)
    if reached:
        best_fnr = max(getattr(r.report, key) for r in at_or_below)
        candidates = [r for r in at_or_below if getattr(r.report, key) == best_fnr]
    else:
        best_fnr = min(getattr(r.report, key) for r in usable)
        candidates = [r for r in usable if getattr(r.report, key) == best_fnr]
    matched = min(candidates, key=lambda r: (abs(r.threshold - threshold), r.threshold))

    def point(report):
        return {
            "threshold": report.threshold,
            "lesion_fp_per_slice": report.lesion_fp_per_slice,
            "lesion_fnr": report.lesion_fnr,
            "slice_fpr": report.slice_fpr,
            "slice_fnr": report.slice_fnr,
            "slice_acc": report.slice_acc,
        }

    cost_point = point(cost_report)
    base_point = point(matched.report)
    return {
        "fnr_level": fnr_level,
        "target_fnr": target,
        "target_reached": reached,
        "cost": cost_point,
        "baseline": base_point,
        "delta": {
            "lesion_fp_per_slice": cost_point["lesion_fp_per_slice"] - base_point["lesion_fp_per_slice"],
            "lesion_fnr": cost_point["lesion_fnr"] - base_point["lesion_fnr"],
            "slice_fpr": cost_point["slice_fpr"] - base_point["slice_fpr"],
            "slice_fnr": cost_point["slice_fnr"] - base_point["slice_fnr"],
        },
        "summary": (
            f"cost-trained FP per slice {cost_point['lesion_fp_per_slice']:.4f} "
            f"at threshold {threshold:g} vs threshold-matched baseline "
            f"{base_point['lesion_fp_per_slice']:.4f} at threshold {matched.threshold:g}"
        ),
        "baseline_sweep": [
            {"threshold": r.threshold, **point(r.report)} for r in rows
        ],
    }


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _json_safe(node):
    if isinstance(node, dict):
        return {k: _json_safe(v) for k, v in node.items()}
    if isinstance(node, (list, tuple)):
        return [_json_safe(v) for v in node]
    if isinstance(node, (np.integer,)):
        return int(node)
    if isinstance(node, (np.floating,)):
        node = float(node)
    if isinstance(node, float) and math.isnan(node):
        return None
    return node


def write_json(obj, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_json_safe(obj), f, indent=2, sort_keys=True)
        f.write("\n")


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.10g}"
    return str(v)


def write_metrics_csv(reports, path):
    """One CSV row per MetricsReport, fixed column order."""
    if isinstance(reports, MetricsReport):
        reports = [reports]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MetricsReport.FIELDS)
        for rep in reports:
            writer.writerow([_csv_cell(getattr(rep, name)) for name in MetricsReport.FIELDS])


def write_sweep_csv(rows, path):
    write_metrics_csv([r.report for r in rows], path)


def write_sweep_json(rows, path):
    write_json([r.report.as_dict() for r in rows], path)


# ---------------------------------------------------------------------------
# comparison scatter (FNR vs FP), hand-rolled SVG for byte-stable output
# ---------------------------------------------------------------------------

_SVG_W, _SVG_H = 480, 360
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 60, 20, 20, 45


def _svg_points(report):
    pts = [
        (row["lesion_fp_per_slice"], row["lesion_fnr"], row["threshold"])
        for row in report["baseline_sweep"]
        if row["lesion_fp_per_slice"] is not None and row["lesion_fnr"] is not None
    ]
    cost = report["cost"]
    return pts, (cost["lesion_fp_per_slice"], cost["lesion_fnr"])


def write_compare_svg(report, path):
    """Static scatter of lesion FNR (y) against lesion FP per slice (x)."""
    pts, cost_pt = _svg_points(report)
    xs = [p[0] for p in pts] + [cost_pt[0]]
    ys = [p[1] for p in pts] + [cost_pt[1]]
    x_max = max(max(xs), 1e-9) * 1.1
    y_max = max(max(ys), 1e-9) * 1.1
    plot_w = _SVG_W - _MARGIN_L - _MARGIN_R
    plot_h = _SVG_H - _MARGIN_T - _MARGIN_B

    def sx(x):
        return _MARGIN_L + plot_w * x / x_max

    def sy(y):
        return _SVG_H - _MARGIN_B - plot_h * y / y_max

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<line x1="{_MARGIN_L}" y1="{_SVG_H - _MARGIN_B}" x2="{_SVG_W - _MARGIN_R}" '
        f'y2="{_SVG_H - _MARGIN_B}" stroke="black"/>',
        f'<line x1="{_MARGIN_L}" y1="{_MARGIN_T}" x2="{_MARGIN_L}" '
        f'y2="{_SVG_H - _MARGIN_B}" stroke="black"/>',
    ]
    for k in range(5):
        xv = x_max * k / 4
        yv = y_max * k / 4
        parts.append(
            f'<text x="{sx(xv):.1f}" y="{_SVG_H - _MARGIN_B + 16}" font-size="10" '
            f'text-anchor="middle">{xv:.2f}</text>'
        )
        parts.append(
            f'<text x="{_MARGIN_L - 6}" y="{sy(yv):.1f}" font-size="10" '
            f'text-anchor="end" dominant-baseline="middle">{yv:.2f}</text>'
        )
    parts.append(
        f'<text x="{(_MARGIN_L + _SVG_W - _MARGIN_R) / 2}" y="{_SVG_H - 8}" font-size="11" '
        f'text-anchor="middle">lesion FP per slice</text>'
    )
    parts.append(
        f'<text x="14" y="{(_MARGIN_T + _SVG_H - _MARGIN_B) / 2}" font-size="11" '
        f'text-anchor="middle" transform="rotate(-90 14 {(_MARGIN_T + _SVG_H - _MARGIN_B) / 2})">'
        f"lesion FNR</text>"
    )
    prev = None
    for x, y, _t in pts:
        if prev is not None:
            parts.append(
                f'<line x1="{sx(prev[0]):.1f}" y1="{sy(prev[1]):.1f}" '
                f'x2="{sx(x):.1f}" y2="{sy(y):.1f}" stroke="#888" stroke-width="1"/>'
            )
        prev = (x, y)
    for x, y, t in pts:
        parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="#4477aa"/>')
        parts.append(
            f'<text x="{sx(x) + 4:.1f}" y="{sy(y) - 4:.1f}" font-size="8" '
            f'fill="#4477aa">{t:g}</text>'
        )
    cx, cy = sx(cost_pt[0]), sy(cost_pt[1])
    parts.append(
        f'<path d="M {cx - 5:.1f} {cy:.1f} L {cx + 5:.1f} {cy:.1f} '
        f'M {cx:.1f} {cy - 5:.1f} L {cx:.1f} {cy + 5:.1f}" '
        f'stroke="#cc3311" stroke-width="2"/>'
    )
    parts.append(
        f'<text x="{cx + 6:.1f}" y="{cy + 10:.1f}" font-size="9" fill="#cc3311">cost-trained</text>'
    )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts) + "\n")
