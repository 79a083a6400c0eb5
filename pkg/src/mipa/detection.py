"""Anchor-free per-token detection head, center-cell targets and the detection loss."""
from __future__ import annotations

import json
import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .boxes import BoundingBox, DetectionSet, nms


class DetectionHead(nn.Module):
    """Per token: ``num_classes`` class logits followed by 4 box logits.

    Box logits decode to normalized cxcywh. The center is relative to the
    token's own cell, so ``cx = (col + sigmoid(tx)) / grid_w``.
    """

    def __init__(self, embed_dim: int, num_classes: int, zero_init: bool = False):
        super().__init__()
        self.num_classes = num_classes
        self.proj = nn.Linear(embed_dim, num_classes + 4)
        if zero_init:
            nn.init.zeros_(self.proj.weight)
            nn.init.zeros_(self.proj.bias)
        else:
            nn.init.trunc_normal_(self.proj.weight, std=0.02)
            nn.init.zeros_(self.proj.bias)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.proj(tokens)


def decode_boxes(raw: torch.Tensor, num_classes: int) -> tuple:
    """Split raw ``(..., h, w, K + 4)`` outputs into scores and normalized cxcywh boxes."""
    h, w = raw.shape[-3:-1]
    scores = torch.sigmoid(raw[..., :num_classes])
    t = torch.sigmoid(raw[..., num_classes:])
    cols = torch.arange(w, dtype=raw.dtype, device=raw.device).view(1, w)
    rows = torch.arange(h, dtype=raw.dtype, device=raw.device).view(h, 1)
    cx = (cols + t[..., 0]) / w
    cy = (rows + t[..., 1]) / h
    boxes = torch.stack([cx, cy, t[..., 2], t[..., 3]], dim=-1)
    return scores, boxes


def predict(raw: torch.Tensor, num_classes: int, score_threshold: float = 0.3,
            iou_threshold: float = 0.5, image_ids=None) -> list:
    """Decode a batch of raw head outputs ``(B, h, w, K + 4)`` into DetectionSets."""
    with torch.no_grad():
        scores, boxes = decode_boxes(raw, num_classes)
    scores = scores.reshape(scores.shape[0], -1, num_classes).cpu().double().numpy()
    boxes = boxes.reshape(boxes.shape[0], -1, 4).cpu().double().numpy()
    out = []
    for b in range(scores.shape[0]):
        dets = []
        for k in range(num_classes):
            cand = np.nonzero(scores[b, :, k] > score_threshold)[0]
            if len(cand) == 0:
                continue
            kept = nms(boxes[b, cand], scores[b, cand, k], iou_threshold)
            for i in cand[kept]:
                dets.append(_to_box(boxes[b, i], k, scores[b, i, k]))
        image_id = image_ids[b] if image_ids is not None else b
        out.append(DetectionSet(boxes=dets, image_id=image_id))
    return out


def _to_box(box, class_id, score) -> BoundingBox:
    cx, cy, w, h = (float(v) for v in box)
    # sigmoid saturation can produce exact 0 extents in float
    w, h = max(w, 1e-6), max(h, 1e-6)
    return BoundingBox(min(max(cx, 0.0), 1.0), min(max(cy, 0.0), 1.0), w, h, int(class_id),
                       min(max(float(score), 0.0), 1.0))


def assign_targets(gt: DetectionSet, grid_h: int, grid_w: int, num_classes: int) -> dict:
    """Center-cell assignment: the cell holding a GT center is positive for that box.

    When two centers share a cell the larger box wins; equal areas keep the
    earlier box.
    """
    cls_target = torch.zeros(grid_h, grid_w, num_classes)
    box_target = torch.zeros(grid_h, grid_w, 4)
    positive = torch.zeros(grid_h, grid_w, dtype=torch.bool)
    owner_area = {}
    for box in gt.boxes:
        if box.class_id >= num_classes:
            raise ValueError(f"class_id {box.class_id} >= num_classes {num_classes}")
        cell = center_cell(box, grid_h, grid_w)
        if cell in owner_area and owner_area[cell] >= box.area:
            continue
        owner_area[cell] = box.area
        r, c = cell
        cls_target[r, c] = 0.0
        cls_target[r, c, box.class_id] = 1.0
        box_target[r, c] = torch.tensor([box.cx, box.cy, box.w, box.h])
        positive[r, c] = True
    return {"cls": cls_target, "box": box_target, "positive": positive}


def center_cell(box: BoundingBox, grid_h: int, grid_w: int) -> tuple:
    row = min(int(math.floor(box.cy * grid_h)), grid_h - 1)
    col = min(int(math.floor(box.cx * grid_w)), grid_w - 1)
    return row, col


def stack_targets(targets: list) -> dict:
    return {key: torch.stack([t[key] for t in targets]) for key in ("cls", "box", "positive")}


def detection_loss(raw: torch.Tensor, targets: dict, lambda_reg: float = 1.0,
                   return_parts: bool = False):
    """Classification BCE plus ``lambda_reg`` times box MSE on positive cells.

    Per image, classification is summed over classes and averaged over
    tokens; regression is averaged over the 4 box values of every positive
    token (zero when the image has none). The batch loss is the mean over
    images.
    """
    num_classes = targets["cls"].shape[-1]
    if raw.shape[:-1] != targets["cls"].shape[:-1] or raw.shape[-1] != num_classes + 4:
        raise ValueError(f"raw output {tuple(raw.shape)} inconsistent with targets "
                         f"{tuple(targets['cls'].shape)}")
    b = raw.shape[0]
    cls_bce = F.binary_cross_entropy_with_logits(raw[..., :num_classes], targets["cls"].to(raw.dtype),
                                                 reduction="none")
    l_c = cls_bce.sum(-1).reshape(b, -1).mean(1)
    _, boxes = decode_boxes(raw, num_classes)
    pos = targets["positive"].to(raw.dtype)
    sq = ((boxes - targets["box"].to(raw.dtype)) ** 2).mean(-1) * pos
    n_pos = pos.reshape(b, -1).sum(1)
    l_r = sq.reshape(b, -1).sum(1) / n_pos.clamp(min=1.0)
    loss = (l_c + lambda_reg * l_r).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite detection loss")
    if return_parts:
        return loss, l_c.mean(), l_r.mean()
    return loss


def dump_predictions(sets: list, path) -> None:
    """Write one JSON record per box: image_id, class_id, score, cx, cy, w, h."""
    with open(path, "w") as fh:
        for ds in sets:
            for b in ds.boxes:
                fh.write(json.dumps({"image_id": ds.image_id, "class_id": b.class_id, "score": b.score,
                                     "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h}) + "\n")


def load_predictions(path) -> list:
    by_image = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            by_image.setdefault(rec["image_id"], []).append(
                BoundingBox(rec["cx"], rec["cy"], rec["w"], rec["h"], rec["class_id"], rec["score"]))
    return [DetectionSet(boxes=v, image_id=k) for k, v in by_image.items()]
