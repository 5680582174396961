"""Matching, NMS, COCO-style average precision, PR export and TIDE error analysis."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .structures import CLASS_NAMES, Annotation, Detection, check_box

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
SMALL_MAX = 32.0 ** 2
MEDIUM_MAX = 96.0 ** 2
AREA_RANGES = {
    "all": (0.0, math.inf),
    "small": (0.0, SMALL_MAX),
    "medium": (SMALL_MAX, MEDIUM_MAX),
    "large": (MEDIUM_MAX, math.inf),
}
EVAL_NMS_IOU = 0.65
EVAL_CONF_FLOOR = 0.001


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    a, b = check_box(a), check_box(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def area_bucket(area: float) -> str:
    """Size bucket of a box area; both upper bounds are inclusive."""
    if area <= SMALL_MAX:
        return "small"
    if area <= MEDIUM_MAX:
        return "medium"
    return "large"


def in_area_range(area: float, rng: tuple[float, float]) -> bool:
    lo, hi = rng
    # (lo, hi] except the first bucket which starts at 0 inclusive
    return (area > lo or lo == 0.0) and area <= hi


def _score_order(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


# ---------------------------------------------------------------------------
# NMS
# ---------------------------------------------------------------------------

def nms_indices(boxes: Sequence[Sequence[float]], scores: Sequence[float], iou_threshold: float) -> list[int]:
    """Greedy single-class NMS; returns kept indices by descending score (ties: lower index first)."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) <= iou_threshold for j in kept):
            kept.append(i)
    return kept


def nms(dets: Sequence[Detection], iou_threshold: float = EVAL_NMS_IOU) -> list[Detection]:
    """Class-wise, per-image greedy NMS. Output is sorted by descending score."""
    groups: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i, d in enumerate(dets):
        groups[(d.image_id, d.class_id)].append(i)
    kept = []
    for idx in groups.values():
        sel = nms_indices([dets[i].box for i in idx], [dets[i].score for i in idx], iou_threshold)
        kept.extend(idx[j] for j in sel)
    kept.sort(key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in kept]


def postprocess(dets: Sequence[Detection], conf_floor: float = EVAL_CONF_FLOOR,
                iou_threshold: float = EVAL_NMS_IOU) -> list[Detection]:
    return nms([d for d in dets if d.score >= conf_floor], iou_threshold)


# ---------------------------------------------------------------------------
# Average precision
# ---------------------------------------------------------------------------

@dataclass
class APResult:
    ap: Optional[float]  # None when no ground truth falls in the area range
    num_gt: int
    precision: np.ndarray  # interpolated precision at RECALL_POINTS
    tp: np.ndarray  # per scored detection, in score order
    fp: np.ndarray


def match_detections(dets: Sequence[Detection], gts: Sequence[Annotation], iou_threshold: float,
                     gt_ignore: Optional[Sequence[bool]] = None) -> tuple[list[int], list[int]]:
    """Greedy matching in descending score order.

    Returns (order, matched_gt) where ``matched_gt[k]`` is the gt index
    matched by the k-th detection in ``order`` or -1. A detection only
    matches a gt of the same image and class. Non-ignored gts win over
    ignored ones; among equals the highest IoU wins, then the lower index.
    """
    gt_ignore = [False] * len(gts) if gt_ignore is None else list(gt_ignore)
    by_key: dict[tuple[int, int], list[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        by_key[(g.image_id, g.class_id)].append(j)
    used = [False] * len(gts)
    order = _score_order(dets)
    matched = []
    for i in order:
        d = dets[i]
        best, best_key = -1, None
        for j in by_key.get((d.image_id, d.class_id), ()):
            if used[j]:
                continue
            v = iou(d.box, gts[j].box)
            if v < iou_threshold:
                continue
            key = (not gt_ignore[j], v)
            if best_key is None or key > best_key:
                best, best_key = j, key
        if best >= 0:
            used[best] = True
        matched.append(best)
    return order, matched


def interpolated_precision(tp: np.ndarray, fp: np.ndarray, num_gt: int) -> np.ndarray:
    if num_gt == 0:
        return np.zeros_like(RECALL_POINTS)
    ctp, cfp = np.cumsum(tp), np.cumsum(fp)
    recall = ctp / num_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).tiny)
    # envelope: precision at recall r is the best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if precision.size else precision
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    out = np.zeros_like(RECALL_POINTS)
    valid = idx < recall.size
    out[valid] = envelope[idx[valid]]
    return out


def evaluate_ap(dets: Sequence[Detection], gts: Sequence[Annotation], iou_threshold: float = 0.5,
                area_range: tuple[float, float] = AREA_RANGES["all"]) -> APResult:
    """101-point interpolated AP of ``dets`` against ``gts`` (one class, or matched per class).

    Ground truths outside ``area_range`` are ignored: detections matched to
    them are dropped, as are unmatched detections whose own area is outside
    the range.
    """
    ignore = [not in_area_range(g.area, area_range) for g in gts]
    num_gt = sum(1 for x in ignore if not x)
    order, matched = match_detections(dets, gts, iou_threshold, ignore)
    tp, fp = [], []
    for i, m in zip(order, matched):
        if m >= 0:
            if ignore[m]:
                continue
            tp.append(1.0)
            fp.append(0.0)
        elif in_area_range(dets[i].area, area_range):
            tp.append(0.0)
            fp.append(1.0)
    tp_arr, fp_arr = np.array(tp), np.array(fp)
    prec = interpolated_precision(tp_arr, fp_arr, num_gt)
    ap = float(prec.mean()) if num_gt else None
    return APResult(ap, num_gt, prec, tp_arr, fp_arr)


def _mean(values: Iterable[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class EvalReport:
    """Per-class AP table and aggregates. ``None`` marks classes (or buckets)
    without ground truth, which are left out of every mean."""

    class_names: tuple[str, ...]
    per_class: dict[str, dict[str, Optional[float]]]
    ap50: Optional[float]
    ap75: Optional[float]
    ap50_95: Optional[float]
    ap_small: Optional[float]
    ap_medium: Optional[float]
    ap_large: Optional[float]
    pr_curves: dict[str, list[float]]
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def summary(self) -> dict[str, Optional[float]]:
        return {"AP50": self.ap50, "AP75": self.ap75, "AP50:95": self.ap50_95,
                "AP_small": self.ap_small, "AP_medium": self.ap_medium, "AP_large": self.ap_large}


def coco_suite(dets: Sequence[Detection], gts: Sequence[Annotation],
               class_names: Sequence[str] = CLASS_NAMES) -> EvalReport:
    class_names = tuple(class_names)
    dets_by_cls: dict[int, list[Detection]] = defaultdict(list)
    gts_by_cls: dict[int, list[Annotation]] = defaultdict(list)
    for d in dets:
        dets_by_cls[d.class_id].append(d)
    for g in gts:
        gts_by_cls[g.class_id].append(g)

    per_class: dict[str, dict[str, Optional[float]]] = {}
    curves: dict[str, list[float]] = {}
    by_thr: dict[float, list[Optional[float]]] = defaultdict(list)
    by_bucket: dict[str, list[Optional[float]]] = defaultdict(list)
    for c, name in enumerate(class_names):
        cd, cg = dets_by_cls.get(c, []), gts_by_cls.get(c, [])
        row: dict[str, Optional[float]] = {}
        for t in IOU_THRESHOLDS:
            res = evaluate_ap(cd, cg, t)
            row[f"AP@{t:.2f}"] = res.ap
            by_thr[t].append(res.ap)
            if t == 0.5 and res.num_gt:
                curves[name] = [float(p) for p in res.precision]
        for bucket in ("small", "medium", "large"):
            ap = _mean(evaluate_ap(cd, cg, t, AREA_RANGES[bucket]).ap for t in IOU_THRESHOLDS)
            row[f"AP_{bucket}"] = ap
            by_bucket[bucket].append(ap)
        per_class[name] = row

    thr_means = [_mean(by_thr[t]) for t in IOU_THRESHOLDS]
    return EvalReport(
        class_names=class_names,
        per_class=per_class,
        ap50=thr_means[0],
        ap75=thr_means[5],
        ap50_95=_mean(thr_means),
        ap_small=_mean(by_bucket["small"]),
        ap_medium=_mean(by_bucket["medium"]),
        ap_large=_mean(by_bucket["large"]),
        pr_curves=curves,
        metadata={"interpolation": "101-point", "iou_thresholds": list(IOU_THRESHOLDS),
                  "nms_iou": EVAL_NMS_IOU, "conf_floor": EVAL_CONF_FLOOR,
                  "num_detections": len(dets), "num_gts": len(gts)},
    )


def ap50(dets: Sequence[Detection], gts: Sequence[Annotation], num_classes: int = len(CLASS_NAMES)) -> float:
    """Class-mean AP at IoU 0.5 over classes with ground truth (0 if there are none)."""
    aps = [evaluate_ap([d for d in dets if d.class_id == c], [g for g in gts if g.class_id == c]).ap
           for c in range(num_classes)]
    m = _mean(aps)
    return 0.0 if m is None else m


# ---------------------------------------------------------------------------
# PR curve export
# ---------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
            "#7f7f7f", "#bcbd22", "#17becf")


def pr_curve_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "recall", "precision"])
    for name in report.class_names:
        if name not in report.pr_curves:
            continue
        for r, p in zip(RECALL_POINTS, report.pr_curves[name]):
            w.writerow([name, f"{r:.2f}", f"{p:.6f}"])
    return buf.getvalue()


def pr_curve_svg(report: EvalReport, width: int = 480, height: int = 360) -> str:
    left, right, top, bottom = 50, 130, 20, 40
    pw, ph = width - left - right, height - top - bottom
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        x = left + t * pw
        y = top + (1 - t) * ph
        out.append(f'<text x="{x:.1f}" y="{height - bottom + 16}" font-size="10" '
                   f'text-anchor="middle">{t:.2f}</text>')
        out.append(f'<text x="{left - 6}" y="{y + 3:.1f}" font-size="10" text-anchor="end">{t:.2f}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 6}" font-size="11" text-anchor="middle">recall</text>')
    out.append(f'<text x="12" y="{top + ph / 2:.1f}" font-size="11" text-anchor="middle" '
               f'transform="rotate(-90 12 {top + ph / 2:.1f})">precision</text>')
    for k, name in enumerate(report.class_names):
        if name not in report.pr_curves:
            continue
        color = _PALETTE[k % len(_PALETTE)]
        pts = " ".join(f"{left + r * pw:.1f},{top + (1 - p) * ph:.1f}"
                       for r, p in zip(RECALL_POINTS, report.pr_curves[name]))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 12 + 14 * k
        out.append(f'<line x1="{width - right + 10}" y1="{ly - 4}" x2="{width - right + 25}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{width - right + 30}" y="{ly}" font-size="10">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def pr_curve_export(report: EvalReport, path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and ``<path>.svg``; both are byte-deterministic."""
    stem = Path(path)
    if stem.suffix in (".csv", ".svg"):
        stem = stem.with_suffix("")
    csv_path, svg_path = stem.with_suffix(".csv"), stem.with_suffix(".svg")
    csv_path.write_text(pr_curve_csv(report))
    svg_path.write_text(pr_curve_svg(report))
    return csv_path, svg_path


# ---------------------------------------------------------------------------
# TIDE
# ---------------------------------------------------------------------------

ERROR_TYPES = ("Cls", "Loc", "Both", "Dupe", "Bkg", "Miss")
T_FG = 0.5
T_BG = 0.1


@dataclass
class TideReport:
    counts: dict[str, int]
    delta_ap: dict[str, float]
    baseline_ap50: float
    num_fp: int
    labels: list[Optional[str]]  # per input detection; None for true positives
    missed: list[int]  # indices of missed ground truths

    def to_json(self) -> dict:
        return asdict(self)


def _classify_fp(d: Detection, gts: Sequence[Annotation], t_f: float, t_b: float) -> tuple[str, int]:
    """Error label of a false positive and the gt it points at (-1 for none).

    Checked in order: Cls, Dupe, Loc, Both, Bkg.
    """
    best_same = best_other = best_any = (0.0, -1)
    for j, g in enumerate(gts):
        if g.image_id != d.image_id:
            continue
        v = iou(d.box, g.box)
        if g.class_id == d.class_id:
            if v > best_same[0]:
                best_same = (v, j)
        elif v > best_other[0]:
            best_other = (v, j)
        if v > best_any[0]:
            best_any = (v, j)
    if best_other[0] >= t_f:
        return "Cls", best_other[1]
    if best_same[0] >= t_f:
        return "Dupe", best_same[1]
    if best_same[0] >= t_b:
        return "Loc", best_same[1]
    if best_other[0] >= t_b:
        return "Both", best_other[1]
    return "Bkg", -1


def tide_analysis(dets: Sequence[Detection], gts: Sequence[Annotation], t_f: float = T_FG, t_b: float = T_BG,
                  num_classes: int = len(CLASS_NAMES)) -> TideReport:
    """Label every false positive with exactly one error type and measure the
    AP50 gained by oracle-fixing each type."""
    dets, gts = list(dets), list(gts)
    order, matched = match_detections(dets, gts, t_f)
    gt_used = [False] * len(gts)
    labels: list[Optional[str]] = [None] * len(dets)
    target = [-1] * len(dets)
    for i, m in zip(order, matched):
        if m >= 0:
            gt_used[m] = True
    for i, m in zip(order, matched):
        if m < 0:
            labels[i], target[i] = _classify_fp(dets[i], gts, t_f, t_b)

    explained = {target[i] for i in range(len(dets)) if labels[i] in ("Cls", "Loc", "Both")}
    missed = [j for j in range(len(gts)) if not gt_used[j] and j not in explained]

    base = ap50(dets, gts, num_classes)
    counts = {t: 0 for t in ERROR_TYPES}
    for lab in labels:
        if lab is not None:
            counts[lab] += 1
    counts["Miss"] = len(missed)

    delta: dict[str, float] = {}
    for etype in ERROR_TYPES[:5]:
        # fixed detections claim their gt; later ones pointing at a claimed gt are dropped
        claimed = list(gt_used)
        fixed_at: dict[int, Detection] = {}
        for i in order:
            d = dets[i]
            if labels[i] != etype:
                fixed_at[i] = d
            elif etype in ("Cls", "Loc") and not claimed[target[i]]:
                g = gts[target[i]]
                claimed[target[i]] = True
                fixed_at[i] = (Detection(d.image_id, g.class_id, d.box, d.score) if etype == "Cls"
                               else Detection(d.image_id, d.class_id, g.box, d.score))
        fixed = [fixed_at[i] for i in sorted(fixed_at)]
        delta[etype] = ap50(fixed, gts, num_classes) - base
    missed_set = set(missed)
    delta["Miss"] = ap50(dets, [g for j, g in enumerate(gts) if j not in missed_set], num_classes) - base
    num_fp = sum(1 for m in matched if m < 0)
    return TideReport(counts, delta, base, num_fp, labels, missed)


# ---------------------------------------------------------------------------
# Detection files
# ---------------------------------------------------------------------------

def write_detections(path, dets: Iterable[Detection]) -> None:
    with open(path, "w") as fh:
        for d in dets:
            fh.write(json.dumps(d.to_json(), sort_keys=True) + "\n")


def read_detections(path) -> list[Detection]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(Detection.from_json(json.loads(line)))
    return out
