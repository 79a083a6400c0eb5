"""Paired IR/RGB data: a synthetic scene generator, an MI diagnostic and a COCO loader.

Each synthetic modality renders the same scene as ``signal * visibility +
noise``: an object of class ``k`` departs from the background by
``visibility[k] * (signature[k] - background)`` in that modality, so a
class with visibility ``(1, 0)`` is only observable in IR.
"""
from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .boxes import BoundingBox, DetectionSet
from .mosaic import patchify

log = logging.getLogger(__name__)

# IR is a single intensity replicated over 3 channels; RGB is a colour.
IR_BACKGROUND = 0.25
RGB_BACKGROUND = (0.45, 0.50, 0.40)
IR_SIGNATURES = (0.90, 0.75, 0.60, 0.95)
RGB_SIGNATURES = ((0.90, 0.20, 0.20), (0.15, 0.25, 0.90), (0.95, 0.90, 0.15), (0.10, 0.85, 0.30))


@dataclass
class SceneSpec:
    image_size: tuple = (32, 32)
    num_objects: tuple = (1, 3)
    object_classes: int = 2
    class_modality_affinity: list = field(default_factory=lambda: [(1.0, 0.1), (0.1, 1.0)])
    noise_sigma_f: float = 0.05
    noise_sigma_g: float = 0.05
    seed: int = 0
    object_size: tuple = (5, 10)
    patch_size: int = 4
    cell_size: int = 8  # at most one object center per cell of this size
    max_retries: int = 50

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.num_objects = tuple(self.num_objects)
        self.object_size = tuple(self.object_size)
        self.class_modality_affinity = [tuple(map(float, a)) for a in self.class_modality_affinity]
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch_size {self.patch_size}")
        if len(self.class_modality_affinity) != self.object_classes:
            raise ValueError(f"need one affinity pair per class ({self.object_classes}), "
                             f"got {len(self.class_modality_affinity)}")
        if self.object_classes > len(IR_SIGNATURES):
            raise ValueError(f"at most {len(IR_SIGNATURES)} classes are supported")
        for pair in self.class_modality_affinity:
            if len(pair) != 2 or not all(0.0 <= v <= 1.0 for v in pair):
                raise ValueError(f"visibilities must be pairs in [0, 1], got {pair}")
        if self.noise_sigma_f < 0 or self.noise_sigma_g < 0:
            raise ValueError("noise sigmas must be >= 0")
        lo, hi = self.num_objects
        if not 0 <= lo <= hi:
            raise ValueError(f"invalid num_objects range {self.num_objects}")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class PairedSample:
    image_f: np.ndarray  # IR, H x W x 3 in [0, 1]
    image_g: np.ndarray  # RGB, H x W x 3 in [0, 1]
    gt: DetectionSet
    scene_id: object
    meta: dict = field(default_factory=dict)


def _place_objects(spec: SceneSpec, rng: np.random.Generator) -> tuple:
    h, w = spec.image_size
    lo, hi = spec.num_objects
    requested = int(rng.integers(lo, hi + 1))
    placed, cells = [], set()
    retries = 0
    while len(placed) < requested and retries < spec.max_retries:
        bw, bh = (int(v) for v in rng.integers(spec.object_size[0], spec.object_size[1] + 1, size=2))
        x0 = int(rng.integers(0, w - bw + 1))
        y0 = int(rng.integers(0, h - bh + 1))
        cls = int(rng.integers(0, spec.object_classes))
        cell = (int((y0 + bh / 2) // spec.cell_size), int((x0 + bw / 2) // spec.cell_size))
        clash = cell in cells or any(
            x0 < px1 + 1 and px0 < x0 + bw + 1 and y0 < py1 + 1 and py0 < y0 + bh + 1
            for px0, py0, px1, py1, _ in placed)
        if clash:
            retries += 1
            continue
        placed.append((x0, y0, x0 + bw, y0 + bh, cls))
        cells.add(cell)
    return placed, requested


def generate_scene(spec: SceneSpec, index: int) -> PairedSample:
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.image_size
    objects, requested = _place_objects(spec, rng)

    signal_f = np.full((h, w, 3), IR_BACKGROUND, dtype=np.float64)
    signal_g = np.empty((h, w, 3), dtype=np.float64)
    signal_g[:] = RGB_BACKGROUND
    boxes = []
    for x0, y0, x1, y1, cls in objects:
        vis_f, vis_g = spec.class_modality_affinity[cls]
        signal_f[y0:y1, x0:x1] = IR_BACKGROUND + vis_f * (IR_SIGNATURES[cls] - IR_BACKGROUND)
        signal_g[y0:y1, x0:x1] = (np.asarray(RGB_BACKGROUND)
                                  + vis_g * (np.asarray(RGB_SIGNATURES[cls]) - RGB_BACKGROUND))
        boxes.append(BoundingBox.from_xyxy(x0 / w, y0 / h, x1 / w, y1 / h, class_id=cls))

    noise_f = rng.normal(0.0, 1.0, size=(h, w, 1)) * spec.noise_sigma_f
    noise_g = rng.normal(0.0, 1.0, size=(h, w, 3)) * spec.noise_sigma_g
    image_f = np.clip(signal_f + noise_f, 0.0, 1.0).astype(np.float32)
    image_g = np.clip(signal_g + noise_g, 0.0, 1.0).astype(np.float32)
    meta = {"requested_objects": requested, "placed_objects": len(objects)}
    if len(objects) < requested:
        meta["placement_shortfall"] = requested - len(objects)
    return PairedSample(image_f=image_f, image_g=image_g,
                        gt=DetectionSet(boxes=boxes, image_id=f"{spec.seed}:{index}"),
                        scene_id=f"{spec.seed}:{index}", meta=meta)


def patch_intensity(image: np.ndarray, patch_size: int) -> np.ndarray:
    grid = patchify(image, patch_size)
    return grid.patches.reshape(grid.n, -1).mean(axis=1)


def estimate_pairwise_mi(samples: list, bins: int = 32, patch_size: int = 4) -> float:
    """Plug-in histogram MI (nats) between co-located patch mean intensities of IR and RGB."""
    if len(samples) < 100:
        raise ValueError(f"need at least 100 samples, got {len(samples)}")
    a = np.concatenate([patch_intensity(s.image_f, patch_size) for s in samples])
    b = np.concatenate([patch_intensity(s.image_g, patch_size) for s in samples])
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        warnings.warn("constant modality channel; mutual information is 0", RuntimeWarning)
        return 0.0
    joint, _, _ = np.histogram2d(a, b, bins=bins)
    pxy = joint / joint.sum()
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    return float(np.sum(pxy[nz] * np.log(pxy[nz] / (px @ py)[nz])))


def marginal_entropy(values: np.ndarray, bins: int = 32) -> float:
    counts, _ = np.histogram(values, bins=bins)
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


class PairedDataset:
    """In-memory stack of paired samples as channels-first float tensors."""

    def __init__(self, samples: list, num_classes: int):
        self.samples = samples
        self.num_classes = num_classes
        self.images_f = torch.from_numpy(np.stack([s.image_f for s in samples])).permute(0, 3, 1, 2).contiguous()
        self.images_g = torch.from_numpy(np.stack([s.image_g for s in samples])).permute(0, 3, 1, 2).contiguous()
        self.gts = [s.gt for s in samples]

    def __len__(self):
        return len(self.samples)

    @property
    def image_size(self) -> tuple:
        return tuple(self.images_f.shape[-2:])

    @classmethod
    def synthetic(cls, spec: SceneSpec, count: int, start: int = 0) -> "PairedDataset":
        return cls([generate_scene(spec, start + i) for i in range(count)], spec.object_classes)


@dataclass
class LoadReport:
    loaded: int = 0
    skipped: int = 0
    skipped_files: list = field(default_factory=list)


def _load_image(path: str, size: tuple, infrared: bool) -> np.ndarray:
    h, w = size
    with Image.open(path) as im:
        im = im.convert("L" if infrared else "RGB").resize((w, h), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if infrared:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr


class CocoPairLoader:
    """Iterate aligned RGB/IR pairs from a COCO annotation file over the RGB images.

    ``pairing_rule`` is ``(old, new)``: the IR path is the RGB file name with
    ``old`` replaced by ``new``. Images are resized to ``image_size`` (H, W)
    and boxes rescaled to normalized cxcywh.
    """

    def __init__(self, root_path, annotation_file, pairing_rule, image_size=(512, 640), patch_size=4):
        self.root = str(root_path)
        self.annotation_file = str(annotation_file)
        self.pairing_rule = tuple(pairing_rule)
        self.image_size = tuple(image_size)
        if self.image_size[0] % patch_size or self.image_size[1] % patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch_size {patch_size}")
        self.report = LoadReport()
        self._parse()

    def _parse(self):
        try:
            with open(self.annotation_file) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{self.annotation_file}:{exc.lineno}: malformed annotation JSON ({exc.msg})") from exc
        for key in ("images", "annotations", "categories"):
            if key not in data:
                raise ValueError(f"{self.annotation_file}: missing top-level key {key!r}")
        cat_ids = sorted(c["id"] for c in data["categories"])
        self.category_index = {cid: i for i, cid in enumerate(cat_ids)}
        self.num_classes = len(cat_ids)
        self.images = data["images"]
        self.annotations = {}
        for i, ann in enumerate(data["annotations"]):
            try:
                bbox = [float(v) for v in ann["bbox"]]
                entry = (bbox, self.category_index[ann["category_id"]])
                if len(bbox) != 4:
                    raise ValueError("bbox must have 4 values")
                self.annotations.setdefault(ann["image_id"], []).append(entry)
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{self.annotation_file}: annotation #{i} is malformed: {exc!r}") from exc

    def ir_name(self, rgb_name: str) -> str:
        old, new = self.pairing_rule
        return rgb_name.replace(old, new)

    def __iter__(self):
        self.report = LoadReport()
        out_h, out_w = self.image_size
        for info in self.images:
            rgb_path = os.path.join(self.root, info["file_name"])
            ir_path = os.path.join(self.root, self.ir_name(info["file_name"]))
            missing = [p for p in (rgb_path, ir_path) if not os.path.exists(p)]
            if missing:
                log.warning("skipping image %s: missing %s", info.get("id"), missing)
                self.report.skipped += 1
                self.report.skipped_files.extend(missing)
                continue
            src_w, src_h = float(info["width"]), float(info["height"])
            sx, sy = out_w / src_w, out_h / src_h
            boxes = []
            for (x, y, bw, bh), cls in self.annotations.get(info["id"], []):
                x, y, bw, bh = x * sx, y * sy, bw * sx, bh * sy
                boxes.append(BoundingBox((x + bw / 2) / out_w, (y + bh / 2) / out_h,
                                         min(bw / out_w, 1.0), min(bh / out_h, 1.0), cls))
            self.report.loaded += 1
            yield PairedSample(image_f=_load_image(ir_path, self.image_size, infrared=True),
                               image_g=_load_image(rgb_path, self.image_size, infrared=False),
                               gt=DetectionSet(boxes=boxes, image_id=info["id"]),
                               scene_id=info["id"])


def load_coco_pairs(root_path, annotation_file, pairing_rule, image_size=(512, 640),
                    patch_size=4) -> CocoPairLoader:
    return CocoPairLoader(root_path, annotation_file, pairing_rule, image_size, patch_size)
