"""End-to-end inference: tile an HPF, detect at a low threshold, dedupe
across overlapping tiles, then score each surviving candidate with the
refinement classifier and keep the confident ones.

The final detections are always a subset of the stage-one detections, so
cascade recall can never exceed detector recall while false positives can
only drop.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .head import Detection, box_iou, nms


@dataclass
class CascadeConfig:
    tile: int = 224
    stride: int = 112
    score_thr: float = 0.1   # deliberately low: stage one favors recall
    nms_iou: float = 0.5
    cls_crop: int = 112
    accept_thr: float = 0.5
    batch_size: int = 8

    def __post_init__(self):
        if self.stride > self.tile:
            raise ValueError(f"stride {self.stride} exceeds tile side {self.tile}")
        for name in ("score_thr", "nms_iou", "accept_thr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


def tile_origins(length, tile, stride):
    """Start offsets covering [0, length) fully, final tile right-aligned."""
    starts = list(range(0, length - tile + 1, stride))
    if starts[-1] + tile < length:
        starts.append(length - tile)
    return starts


def extract_patch(image, center, side):
    """Square ``side`` x ``side`` crop centered at ``center`` (x, y).

    Centers are rounded to the pixel grid; regions outside the image are
    reflect-padded so the output always has the requested size.
    """
    if side < 1:
        raise ValueError(f"side must be >= 1, got {side}")
    img = np.asarray(image)
    h, w = img.shape[:2]
    cx, cy = int(round(center[0])), int(round(center[1]))
    x0, y0 = cx - side // 2, cy - side // 2
    pad = max(0, -x0, -y0, x0 + side - w, y0 + side - h)
    if pad:
        pad_width = ((pad, pad), (pad, pad)) + ((0, 0),) * (img.ndim - 2)
        img = np.pad(img, pad_width, mode="reflect")
        x0, y0 = x0 + pad, y0 + pad
    return img[y0:y0 + side, x0:x0 + side].copy()


def _image_to_tensor(image):
    arr = np.asarray(image, dtype=np.float32)
    if arr.max() > 1.5:  # uint8-scaled input
        arr = arr / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def detect_tiled(image, detector, cfg: CascadeConfig, device="cpu"):
    """Stage one on a full HPF: tiled detection plus global NMS, detections
    in HPF pixel coordinates sorted by descending detector score."""
    h, w = np.asarray(image).shape[:2]
    if min(h, w) < cfg.tile:
        raise ValueError(f"image {w}x{h} smaller than tile side {cfg.tile}")
    origins = [(x0, y0) for y0 in tile_origins(h, cfg.tile, cfg.stride)
               for x0 in tile_origins(w, cfg.tile, cfg.stride)]
    tensor = _image_to_tensor(image)
    detections = []
    for i in range(0, len(origins), cfg.batch_size):
        chunk = origins[i:i + cfg.batch_size]
        batch = torch.stack([tensor[:, y0:y0 + cfg.tile, x0:x0 + cfg.tile] for x0, y0 in chunk])
        per_tile = detector.detect(batch.to(device), cfg.score_thr, cfg.nms_iou)
        for (x0, y0), dets in zip(chunk, per_tile):
            detections.extend(d.shifted(x0, y0) for d in dets)
    if not detections:
        return []
    boxes = np.array([d.box for d in detections])
    scores = np.array([d.score for d in detections])
    return [detections[i] for i in nms(boxes, scores, cfg.nms_iou)]


def run_cascade(image, detector, classifier, cfg: CascadeConfig = None, device="cpu"):
    """Full two-stage inference on one HPF.

    With ``classifier=None`` the stage-one detections are returned as-is
    (cls_score stays None). Otherwise each candidate is re-scored from a
    ``cfg.cls_crop`` patch around its center and kept when the classifier
    probability reaches ``cfg.accept_thr``; survivors are sorted by that
    probability.
    """
    cfg = cfg or CascadeConfig()
    stage_one = detect_tiled(image, detector, cfg, device)
    if classifier is None or not stage_one:
        return stage_one
    from .classifier import patches_to_network_input

    img = np.asarray(image, dtype=np.float32)
    if img.max() > 1.5:
        img = img / 255.0
    patches = [extract_patch(img, d.center, cfg.cls_crop) for d in stage_one]
    inputs = patches_to_network_input(patches, classifier.cfg.input_size)
    probs = classifier.predict_proba(inputs, device=device)
    final = []
    for det, p in zip(stage_one, probs):
        det.cls_score = float(p)
        if det.cls_score >= cfg.accept_thr:
            final.append(det)
    final.sort(key=lambda d: -d.cls_score)
    return final


# ---------------------------------------------------------------------------
# serialization / overlays
# ---------------------------------------------------------------------------

DETECTION_COLUMNS = ["image_id", "x1", "y1", "x2", "y2", "det_score", "cls_score"]


def write_detections(path, detections_by_image):
    """Delimited detection table; scores carry six decimals, absent
    classifier scores stay blank."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(DETECTION_COLUMNS)
        for image_id in sorted(detections_by_image):
            for d in detections_by_image[image_id]:
                cls = "" if d.cls_score is None else f"{d.cls_score:.6f}"
                writer.writerow([image_id, f"{d.x1:.2f}", f"{d.y1:.2f}", f"{d.x2:.2f}",
                                 f"{d.y2:.2f}", f"{d.score:.6f}", cls])


def read_detections(path):
    out = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            det = Detection(float(row["x1"]), float(row["y1"]), float(row["x2"]),
                            float(row["y2"]), float(row["det_score"]),
                            cls_score=float(row["cls_score"]) if row["cls_score"] else None)
            out.setdefault(row["image_id"], []).append(det)
    return out


def render_overlay(image, detections, color=(0, 200, 0), width=2):
    """Copy of the image with one rectangle burned in per detection."""
    im = Image.fromarray(np.asarray(image, dtype=np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(im)
    for d in detections:
        draw.rectangle([d.x1, d.y1, d.x2, d.y2], outline=color, width=width)
    return np.asarray(im)
