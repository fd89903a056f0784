"""Patch refinement classifier and its training-set construction.

A 34-layer basic-block residual network scores square candidate patches as
mitosis / non-mitosis. Training sets are balanced by oversampling the
positives and hardened with the detector's false positives as extra
negatives; augmentation covers 90-degree rotations, flips, translation,
crop-and-resize, contrast/saturation jitter and Gaussian noise.
"""

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import AnnotationRecord, load_image, save_image

MIN_NEGATIVE_DISTANCE = 20.0  # px between a background crop center and any gt centroid


@dataclass
class PatchSample:
    pixels: np.ndarray  # (S, S, 3) float32 in [0, 1]
    label: int          # 1 mitosis, 0 non-mitosis
    provenance: str     # gt-positive | background | detector-fp
    image_id: str = ""
    center: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.provenance == "detector-fp" and self.label != 0:
            raise ValueError("detector false positives are non-mitosis by definition")
        if self.provenance == "gt-positive" and self.label != 1:
            raise ValueError("gt-positive patches are mitosis by definition")


@dataclass
class ClassifierConfig:
    stage_blocks: tuple = (3, 4, 6, 3)  # the 34-layer basic-block layout
    width_multiplier: float = 1.0
    input_size: int = 128   # every crop is resized to this before the network
    train_crop: int = 64
    test_crop: int = 112
    oversample_ratio: float = 1.0  # positives : negatives
    background_per_image: int = 2
    pretrained: str | None = None


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentParams:
    """One draw of the augmentation pipeline; defaults are the identity."""

    quarter_turns: int = 0
    flip_h: bool = False
    flip_v: bool = False
    translate: tuple = (0, 0)     # px, |dx|,|dy| <= 8, reflect padded
    crop_fraction: float = 1.0    # random crop side fraction, then resize back
    crop_offset: tuple = (0.0, 0.0)  # in [0, 1], position of the crop window
    contrast: float = 1.0         # in [0.8, 1.2]
    saturation: float = 1.0       # in [0.8, 1.2]
    noise_sigma: float = 0.0      # gaussian, <= 0.02

    @classmethod
    def sample(cls, rng):
        return cls(
            quarter_turns=int(rng.integers(0, 4)),
            flip_h=bool(rng.integers(0, 2)),
            flip_v=bool(rng.integers(0, 2)),
            translate=(int(rng.integers(-8, 9)), int(rng.integers(-8, 9))),
            crop_fraction=float(rng.uniform(0.85, 1.0)),
            crop_offset=(float(rng.uniform()), float(rng.uniform())),
            contrast=float(rng.uniform(0.8, 1.2)),
            saturation=float(rng.uniform(0.8, 1.2)),
            noise_sigma=float(rng.uniform(0.0, 0.02)),
        )


def _resize(image, side):
    """Bilinear resize of an (H, W, 3) float array."""
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def apply_augment(patch, params: AugmentParams, rng=None):
    """Apply one parameter draw; identity parameters return the patch unchanged."""
    out = patch
    if params.quarter_turns % 4:
        out = np.rot90(out, params.quarter_turns)
    if params.flip_h:
        out = out[:, ::-1]
    if params.flip_v:
        out = out[::-1]
    dx, dy = params.translate
    if dx or dy:
        h, w = out.shape[:2]
        pad = max(abs(dx), abs(dy))
        padded = np.pad(out, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
        out = padded[pad + dy:pad + dy + h, pad + dx:pad + dx + w]
    if params.crop_fraction < 1.0:
        h, w = out.shape[:2]
        side = max(1, int(round(h * params.crop_fraction)))
        y0 = int(round(params.crop_offset[1] * (h - side)))
        x0 = int(round(params.crop_offset[0] * (w - side)))
        out = _resize(out[y0:y0 + side, x0:x0 + side], h)
    if params.contrast != 1.0:
        mean = out.mean()
        out = (out - mean) * params.contrast + mean
    if params.saturation != 1.0:
        gray = out.mean(axis=2, keepdims=True)
        out = gray + (out - gray) * params.saturation
    if params.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise_sigma > 0 needs an rng")
        out = out + rng.normal(0.0, params.noise_sigma, out.shape)
    if out is patch:
        return patch
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment(patch, rng):
    """Randomly augment one patch; the label is never affected."""
    return apply_augment(patch, AugmentParams.sample(rng), rng)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class PatchClassifier(nn.Module):
    """Basic-block residual classifier emitting one mitosis probability.

    Keeps conventional batch normalization (train with batches >= 32); the
    grouped-normalization treatment is a detector-side concern.
    """

    def __init__(self, cfg: ClassifierConfig = None):
        super().__init__()
        cfg = cfg or ClassifierConfig()
        self.cfg = cfg
        widths = [max(1, round(wd * cfg.width_multiplier)) for wd in (64, 128, 256, 512)]
        self.conv1 = nn.Conv2d(3, widths[0], 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(widths[0])
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        layers = []
        cin = widths[0]
        for i, (width, blocks) in enumerate(zip(widths, cfg.stage_blocks)):
            for b in range(blocks):
                stride = 2 if (i > 0 and b == 0) else 1
                layers.append(BasicBlock(cin, width, stride))
                cin = width
        self.stages = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, 1)

    def forward(self, x):
        """Logits for an (N, 3, S, S) batch normalized to [-1, 1]."""
        x = self.maxpool(F.relu(self.bn1(self.conv1(x))))
        x = self.stages(x)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(x).squeeze(-1)

    @torch.no_grad()
    def predict_proba(self, patches, device="cpu", batch_size=64):
        """Mitosis probability per (N, S, S, 3) patch, S == cfg.input_size.

        Runs in evaluation mode; identical batches give identical outputs.
        """
        patches = np.asarray(patches, dtype=np.float32)
        if patches.ndim != 4 or patches.shape[1] != self.cfg.input_size \
                or patches.shape[2] != self.cfg.input_size:
            raise ValueError(f"expected (N, {self.cfg.input_size}, {self.cfg.input_size}, 3) "
                             f"patches, got {patches.shape}")
        was_training = self.training
        self.eval()
        try:
            probs = []
            for i in range(0, len(patches), batch_size):
                batch = torch.from_numpy(patches[i:i + batch_size]).permute(0, 3, 1, 2)
                batch = batch.to(device) * 2 - 1
                probs.append(torch.sigmoid(self.forward(batch)).cpu().numpy())
            return np.concatenate(probs) if probs else np.zeros(0, dtype=np.float32)
        finally:
            self.train(was_training)


def patches_to_network_input(patches, input_size):
    """Resize raw crops (any square side) to the network input side."""
    out = np.empty((len(patches), input_size, input_size, 3), dtype=np.float32)
    for i, p in enumerate(patches):
        out[i] = p if p.shape[0] == input_size else _resize(p, input_size)
    return out


# ---------------------------------------------------------------------------
# training-set construction
# ---------------------------------------------------------------------------

def _crop_reflect(image, center, side):
    from .cascade import extract_patch  # local import avoids a cycle
    return extract_patch(image, center, side)


def _positive_center(record: AnnotationRecord, rng):
    """A random pixel of the instance: a mask pixel when available, else a
    point jittered inside the tight box, else the centroid itself."""
    if record.mask is not None and len(record.mask):
        x, y = record.mask[int(rng.integers(0, len(record.mask)))]
        return float(x), float(y)
    if record.box is not None:
        return (float(rng.uniform(record.box[0], record.box[2])),
                float(rng.uniform(record.box[1], record.box[3])))
    return record.centroid


def build_training_set(images, annotations, detector_fps, cfg: ClassifierConfig, rng):
    """Assemble a balanced classifier training set from HPFs.

    ``images`` maps image_id -> (H, W, 3) uint8 array; ``annotations`` maps
    image_id -> list of AnnotationRecord; ``detector_fps`` is a list of
    (image_id, (cx, cy)) false-positive centers mined from the detector,
    each becoming one hard negative. Background negatives keep their centers
    at least 20 px from every gt centroid; positives are oversampled (crops
    centered on random instance pixels) until the configured ratio is met.
    Images smaller than the crop are skipped with a warning.
    """
    import warnings

    side = cfg.train_crop
    samples = []
    usable = {}
    for image_id, img in images.items():
        if min(img.shape[:2]) < side:
            warnings.warn(f"{image_id}: image smaller than {side} px crop, skipped")
            continue
        usable[image_id] = np.asarray(img, dtype=np.float32) / 255.0

    # background negatives
    for image_id, img in usable.items():
        h, w = img.shape[:2]
        centroids = [r.centroid for r in annotations.get(image_id, [])]
        placed = 0
        attempts = 0
        while placed < cfg.background_per_image and attempts < 200 * max(1, cfg.background_per_image):
            attempts += 1
            cx = float(rng.uniform(0, w))
            cy = float(rng.uniform(0, h))
            if all(math.hypot(cx - gx, cy - gy) >= MIN_NEGATIVE_DISTANCE for gx, gy in centroids):
                samples.append(PatchSample(_crop_reflect(img, (cx, cy), side), 0,
                                           "background", image_id, (cx, cy)))
                placed += 1

    # mined hard negatives
    for image_id, center in detector_fps:
        if image_id not in usable:
            continue
        samples.append(PatchSample(_crop_reflect(usable[image_id], center, side), 0,
                                   "detector-fp", image_id, tuple(float(c) for c in center)))

    # oversampled positives
    n_negative = len(samples)
    positives = [(image_id, r) for image_id in usable
                 for r in annotations.get(image_id, [])]
    n_positive_target = int(round(cfg.oversample_ratio * n_negative))
    for k in range(n_positive_target if positives else 0):
        image_id, record = positives[k % len(positives)]
        center = _positive_center(record, rng)
        samples.append(PatchSample(_crop_reflect(usable[image_id], center, side), 1,
                                   "gt-positive", image_id, center))
    return samples


def save_patch_set(out_dir, samples):
    """Persist patches as PNGs plus a manifest table."""
    out = Path(out_dir)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    with open(out / "patches.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["path", "label", "provenance", "image_id", "center_x", "center_y"])
        for i, s in enumerate(samples):
            rel = f"patches/patch_{i:06d}.png"
            save_image(out / rel, np.clip(s.pixels * 255, 0, 255).round())
            writer.writerow([rel, s.label, s.provenance, s.image_id,
                             repr(float(s.center[0])), repr(float(s.center[1]))])


def load_patch_set(in_dir):
    base = Path(in_dir)
    samples = []
    with open(base / "patches.csv", newline="") as f:
        for row in csv.DictReader(f):
            pixels = load_image(base / row["path"]).astype(np.float32) / 255.0
            samples.append(PatchSample(pixels, int(row["label"]), row["provenance"],
                                       row["image_id"],
                                       (float(row["center_x"]), float(row["center_y"]))))
    return samples
