"""COCO-style AP evaluation and the per-modality RGB / IR / average report.

Matching is greedy in descending score order: each prediction takes the
unmatched ground-truth box of highest IoU at or above the threshold.
Precision is made monotone and sampled at 101 recall points.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import iou, iou_matrix  # noqa: F401  (iou re-exported)

RECALL_POINTS = np.linspace(0.0, 1.0, 101)
IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
METRICS = ("ap50", "ap75", "ap")
MODALITIES = ("rgb", "ir")


def _boxes_array(boxes: list) -> np.ndarray:
    return np.array([[b.cx, b.cy, b.w, b.h] for b in boxes], dtype=np.float64).reshape(-1, 4)


def greedy_match(pred_boxes: list, gt_boxes: list, iou_threshold: float) -> list:
    """True-positive flags for ``pred_boxes`` (already in descending score order)."""
    if not pred_boxes:
        return []
    if not gt_boxes:
        return [False] * len(pred_boxes)
    return _match_ious(iou_matrix(_boxes_array(pred_boxes), _boxes_array(gt_boxes)), iou_threshold)


def _match_ious(ious: np.ndarray, iou_threshold: float) -> list:
    used = np.zeros(ious.shape[1], dtype=bool)
    flags = []
    for row in ious:
        best, best_iou = -1, iou_threshold
        for g, value in enumerate(row):
            if not used[g] and value >= best_iou and (best < 0 or value > best_iou):
                best, best_iou = g, value
        if best >= 0:
            used[best] = True
        flags.append(best >= 0)
    return flags


def precision_at_recall_points(scores, tp_flags, n_gt: int) -> np.ndarray:
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")
    tp = np.asarray(tp_flags, dtype=np.float64)[order]
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    precision = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    out = np.zeros(len(RECALL_POINTS))
    valid = idx < len(precision)
    out[valid] = precision[idx[valid]]
    return out


class _ClassMatches:
    """Per-image score-sorted predictions and IoU matrices for one class, reused across thresholds."""

    def __init__(self, preds: list, gts: list, class_id: int):
        gt_by_image = {g.image_id: g.of_class(class_id) for g in gts}
        self.n_gt = sum(len(v) for v in gt_by_image.values())
        self.scores = []
        self.ious = []
        for p in preds:
            mine = sorted(p.of_class(class_id), key=lambda b: -b.score)
            if not mine:
                continue
            gt = gt_by_image.get(p.image_id, [])
            self.scores.extend(b.score for b in mine)
            self.ious.append(iou_matrix(_boxes_array(mine), _boxes_array(gt)))

    def average_precision(self, iou_threshold: float):
        if self.n_gt == 0:
            return 0.0 if self.scores else None
        if not self.scores:
            return 0.0
        flags = []
        for m in self.ious:
            flags.extend(_match_ious(m, iou_threshold) if m.shape[1] else [False] * m.shape[0])
        return math.fsum(precision_at_recall_points(self.scores, flags, self.n_gt)) / len(RECALL_POINTS)


def class_average_precision(preds: list, gts: list, class_id: int, iou_threshold: float):
    """AP for one class, or None when the class has neither GT nor predictions."""
    return _ClassMatches(list(preds), list(gts), class_id).average_precision(iou_threshold)


def _class_ids(preds: list, gts: list, num_classes) -> list:
    if num_classes is not None:
        return list(range(num_classes))
    return sorted({b.class_id for s in list(preds) + list(gts) for b in s.boxes})


def _check_ids(preds: list, gts: list):
    gt_ids = {g.image_id for g in gts}
    stray = [p.image_id for p in preds if p.image_id not in gt_ids and p.boxes]
    if stray:
        raise ValueError(f"predictions reference image ids absent from ground truth: {stray[:5]}")


def _mean(values: dict) -> float:
    return float(np.mean(list(values.values()))) if values else float("nan")


def average_precision(preds: list, gts: list, iou_threshold: float = 0.5, num_classes=None,
                      per_class: bool = False):
    """Mean AP over classes at one IoU threshold (classes with no GT and no predictions excluded)."""
    preds, gts = list(preds), list(gts)
    _check_ids(preds, gts)
    values = {}
    for k in _class_ids(preds, gts, num_classes):
        ap = _ClassMatches(preds, gts, k).average_precision(iou_threshold)
        if ap is not None:
            values[k] = ap
    return (_mean(values), values) if per_class else _mean(values)


def evaluate_modality(preds: list, gts: list, num_classes=None) -> dict:
    """AP50, AP75 and AP (mean over IoU 0.50:0.05:0.95) with per-class breakdown."""
    preds, gts = list(preds), list(gts)
    _check_ids(preds, gts)
    table = {}
    for k in _class_ids(preds, gts, num_classes):
        matches = _ClassMatches(preds, gts, k)
        aps = [matches.average_precision(t) for t in IOU_THRESHOLDS]
        if aps[0] is not None:
            table[k] = aps
    per_class = {k: {"ap50": v[0], "ap75": v[5], "ap": float(np.mean(v))} for k, v in table.items()}
    per_threshold = [_mean({k: v[i] for k, v in table.items()}) for i in range(len(IOU_THRESHOLDS))]
    return {"ap50": per_threshold[0], "ap75": per_threshold[5], "ap": float(np.mean(per_threshold)),
            "per_class": per_class}


@dataclass
class EvalReport:
    rgb: dict = None
    ir: dict = None
    partial: bool = False
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_modalities(cls, rgb=None, ir=None) -> "EvalReport":
        return cls(rgb=rgb, ir=ir, partial=rgb is None or ir is None)

    def average(self, metric: str) -> float:
        if self.partial:
            return float("nan")
        return (self.rgb[metric] + self.ir[metric]) / 2

    def value(self, metric: str, modality: str) -> float:
        if modality == "avg":
            return self.average(metric)
        block = getattr(self, modality)
        return float("nan") if block is None else float(block[metric])

    def to_row(self) -> dict:
        row = {}
        for metric in METRICS:
            for modality in MODALITIES + ("avg",):
                row[f"{metric}_{modality}"] = self.value(metric, modality)
        return row

    def rows(self) -> list:
        """Table rows: one per evaluated modality plus the average."""
        out = []
        for modality in MODALITIES:
            if getattr(self, modality) is not None:
                out.append({"modality": modality, **{m: self.value(m, modality) for m in METRICS}})
        if not self.partial:
            out.append({"modality": "average", **{m: self.average(m) for m in METRICS}})
        return out

    def to_json(self) -> str:
        doc = {"partial": self.partial, **self.to_row(), "rows": self.rows()}
        for modality in MODALITIES:
            block = getattr(self, modality)
            if block is not None and "per_class" in block:
                doc[f"per_class_{modality}"] = {str(k): v for k, v in block["per_class"].items()}
        doc.update(self.extra)
        return json.dumps(_nan_to_none(doc), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        blocks = {}
        for modality in MODALITIES:
            if doc.get(f"ap50_{modality}") is None:
                blocks[modality] = None
                continue
            block = {m: doc[f"{m}_{modality}"] for m in METRICS}
            if f"per_class_{modality}" in doc:
                block["per_class"] = {int(k): v for k, v in doc[f"per_class_{modality}"].items()}
            blocks[modality] = block
        return cls.from_modalities(blocks["rgb"], blocks["ir"])


def _nan_to_none(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


def build_report(preds_rgb, preds_ir, gts, num_classes=None) -> EvalReport:
    gts = list(gts)
    rgb = evaluate_modality(preds_rgb, gts, num_classes) if preds_rgb is not None else None
    ir = evaluate_modality(preds_ir, gts, num_classes) if preds_ir is not None else None
    return EvalReport.from_modalities(rgb, ir)
