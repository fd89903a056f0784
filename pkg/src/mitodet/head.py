"""Hybrid detection head: anchor-based and anchor-free branches on a pyramid.

Two weight-shared four-layer towers feed four predictors per level: the
anchor-based pair emits K*A class probabilities and 4*A box deltas per
location, the anchor-free pair emits K class probabilities and 4 side
distances (in stride units) per location. Detections from both branches are
merged through one greedy NMS pass.
"""

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import BackboneConfig, PyramidBackbone

NEGATIVE = -1
IGNORE = -2

ANCHOR_SCALES = (1.0, 2.0 ** (1.0 / 3.0), 2.0 ** (2.0 / 3.0))
ANCHOR_RATIOS = (0.5, 1.0, 2.0)  # height/width


@dataclass
class Detection:
    """One detected box in image pixels with its stage scores."""

    x1: float
    y1: float
    x2: float
    y2: float
    score: float
    source: str = "anchor-based"  # or "anchor-free"
    cls_score: float | None = None

    def __post_init__(self):
        self.x1, self.y1 = float(self.x1), float(self.y1)
        self.x2, self.y2 = float(self.x2), float(self.y2)
        self.score = float(self.score)
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def center(self):
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    @property
    def box(self):
        return (self.x1, self.y1, self.x2, self.y2)

    def shifted(self, dx, dy):
        """Copy translated by (dx, dy), preserving scores."""
        return Detection(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy,
                         self.score, self.source, self.cls_score)


def cxcywh_to_xyxy(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    x1, y1, x2, y2 = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def generate_anchors(level, height, width, stride, base_scale=4.0,
                     scales=ANCHOR_SCALES, ratios=ANCHOR_RATIOS):
    """Anchor boxes for one pyramid level as a (H*W*A, 4) cx/cy/w/h array.

    Anchors are centered at ((j+0.5)*stride, (i+0.5)*stride) with base size
    ``base_scale*stride``; each (ratio, scale) pair contributes one box of
    equal area, rows ordered (row, column, anchor).
    """
    if stride != 2 ** level:
        raise ValueError(f"stride {stride} does not match level {level} (expected {2 ** level})")
    base = base_scale * stride
    sizes = []
    for r in ratios:
        for s in scales:
            w = base * s / math.sqrt(r)
            h = base * s * math.sqrt(r)
            sizes.append((w, h))
    sizes = np.asarray(sizes, dtype=np.float64)  # (A, 2)

    xs = (np.arange(width) + 0.5) * stride
    ys = (np.arange(height) + 0.5) * stride
    cx, cy = np.meshgrid(xs, ys)  # (H, W)
    centers = np.stack([cx, cy], axis=-1).reshape(height, width, 1, 2)
    wh = sizes.reshape(1, 1, -1, 2)
    anchors = np.concatenate(np.broadcast_arrays(centers, wh), axis=-1)
    return anchors.reshape(-1, 4)


def num_anchors_per_location(scales=ANCHOR_SCALES, ratios=ANCHOR_RATIOS):
    return len(scales) * len(ratios)


def box_iou(boxes1, boxes2):
    """Pairwise IoU of two (N, 4) / (M, 4) xyxy arrays, as an (N, M) matrix."""
    a = np.asarray(boxes1, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes2, dtype=np.float64).reshape(-1, 4)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def encode_boxes(anchors_cxcywh, boxes_xyxy):
    """Offsets (tx, ty, tw, th) carrying a box relative to its anchor:
    center shift normalized by anchor size, log size ratios."""
    anchors = np.asarray(anchors_cxcywh, dtype=np.float64)
    gts = xyxy_to_cxcywh(boxes_xyxy)
    if np.any(anchors[..., 2:] <= 0) or np.any(gts[..., 2:] <= 0):
        raise ValueError("boxes and anchors must have positive width and height")
    tx = (gts[..., 0] - anchors[..., 0]) / anchors[..., 2]
    ty = (gts[..., 1] - anchors[..., 1]) / anchors[..., 3]
    tw = np.log(gts[..., 2] / anchors[..., 2])
    th = np.log(gts[..., 3] / anchors[..., 3])
    return np.stack([tx, ty, tw, th], axis=-1)


def decode_boxes(anchors_cxcywh, deltas):
    """Inverse of :func:`encode_boxes`; returns xyxy boxes."""
    anchors = np.asarray(anchors_cxcywh, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if np.any(anchors[..., 2:] <= 0):
        raise ValueError("anchors must have positive width and height")
    cx = anchors[..., 0] + deltas[..., 0] * anchors[..., 2]
    cy = anchors[..., 1] + deltas[..., 1] * anchors[..., 3]
    w = anchors[..., 2] * np.exp(deltas[..., 2])
    h = anchors[..., 3] * np.exp(deltas[..., 3])
    return cxcywh_to_xyxy(np.stack([cx, cy, w, h], axis=-1))


def assign_anchors(anchors_xyxy, gt_boxes_xyxy, pos_thr=0.5, neg_thr=0.4):
    """Label each anchor: gt index (positive), NEGATIVE, or IGNORE.

    Anchors with max IoU >= ``pos_thr`` are positive for their best gt,
    anchors below ``neg_thr`` are negative, the band between is ignored.
    Every gt additionally claims its own highest-IoU anchor as positive.
    """
    if not 0 <= neg_thr <= pos_thr <= 1:
        raise ValueError(f"need 0 <= neg_thr <= pos_thr <= 1, got {neg_thr}, {pos_thr}")
    anchors = np.asarray(anchors_xyxy, dtype=np.float64).reshape(-1, 4)
    labels = np.full(len(anchors), NEGATIVE, dtype=np.int64)
    gts = np.asarray(gt_boxes_xyxy, dtype=np.float64).reshape(-1, 4)
    if len(gts) == 0:
        return labels
    iou = box_iou(anchors, gts)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(len(anchors)), best_gt]
    labels[best_iou >= pos_thr] = best_gt[best_iou >= pos_thr]
    labels[(best_iou >= neg_thr) & (best_iou < pos_thr)] = IGNORE
    # each gt keeps at least its single best anchor
    labels[iou.argmax(axis=0)] = np.arange(len(gts))
    return labels


def focal_loss(probs, targets, alpha=0.25, gamma=2.0, normalizer=None):
    """Focal loss on probabilities, summed and divided by the positive count.

    ``alpha=None`` disables class balancing (both classes weighted 1), in
    which case ``gamma=0`` reduces to plain cross-entropy. ``normalizer``
    overrides the default positive-count denominator.
    """
    probs = torch.as_tensor(probs)
    targets = torch.as_tensor(targets, dtype=probs.dtype, device=probs.device)
    p = probs.clamp(1e-7, 1 - 1e-7)
    p_t = p * targets + (1 - p) * (1 - targets)
    loss = -((1 - p_t) ** gamma) * torch.log(p_t)
    if alpha is not None:
        loss = loss * (alpha * targets + (1 - alpha) * (1 - targets))
    if normalizer is None:
        normalizer = max(float((targets > 0.5).sum().item()), 1.0)
    return loss.sum() / normalizer


def iou_loss(pred_boxes, gt_boxes):
    """-log(IoU) per box pair (xyxy), clamped at IoU 1e-6 for disjoint pairs."""
    pred = torch.as_tensor(pred_boxes)
    gt = torch.as_tensor(gt_boxes, dtype=pred.dtype, device=pred.device)
    x1 = torch.maximum(pred[..., 0], gt[..., 0])
    y1 = torch.maximum(pred[..., 1], gt[..., 1])
    x2 = torch.minimum(pred[..., 2], gt[..., 2])
    y2 = torch.minimum(pred[..., 3], gt[..., 3])
    inter = (x2 - x1).clamp(min=0) * (y2 - y1).clamp(min=0)
    area_p = (pred[..., 2] - pred[..., 0]).clamp(min=0) * (pred[..., 3] - pred[..., 1]).clamp(min=0)
    area_g = (gt[..., 2] - gt[..., 0]) * (gt[..., 3] - gt[..., 1])
    union = area_p + area_g - inter
    iou = inter / union.clamp(min=1e-12)
    return -torch.log(iou.clamp(min=1e-6))


@dataclass
class HeadConfig:
    feat_channels: int = 256
    tower_depth: int = 4
    num_classes: int = 1  # mitosis vs background; background is implicit
    prior_prob: float = 0.01
    anchor_base_scale: float = 4.0
    anchor_scales: tuple = ANCHOR_SCALES
    anchor_ratios: tuple = ANCHOR_RATIOS
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    shrink: float = 0.2  # effective-region scale for the anchor-free branch

    @property
    def num_anchors(self):
        return len(self.anchor_scales) * len(self.anchor_ratios)


class LevelOutputs(NamedTuple):
    ab_cls: torch.Tensor  # (N, K*A, H, W) probabilities
    ab_box: torch.Tensor  # (N, 4*A, H, W) deltas
    af_cls: torch.Tensor  # (N, K, H, W) probabilities
    af_box: torch.Tensor  # (N, 4, H, W) side distances in stride units


class DetectionHead(nn.Module):
    """Shared class/box towers with anchor-based and anchor-free predictors."""

    def __init__(self, cfg: HeadConfig = None, in_channels=256):
        super().__init__()
        cfg = cfg or HeadConfig()
        self.cfg = cfg
        c = cfg.feat_channels
        a, k = cfg.num_anchors, cfg.num_classes

        def tower():
            layers = []
            cin = in_channels
            for _ in range(cfg.tower_depth):
                layers += [nn.Conv2d(cin, c, 3, padding=1), nn.ReLU(inplace=True)]
                cin = c
            return nn.Sequential(*layers)

        self.cls_tower = tower()
        self.box_tower = tower()
        self.ab_cls = nn.Conv2d(c, k * a, 3, padding=1)
        self.ab_box = nn.Conv2d(c, 4 * a, 3, padding=1)
        self.af_cls = nn.Conv2d(c, k, 3, padding=1)
        self.af_box = nn.Conv2d(c, 4, 3, padding=1)

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.01)
                nn.init.zeros_(m.bias)
        # rare-foreground prior keeps early focal loss small
        prior_bias = -math.log((1 - cfg.prior_prob) / cfg.prior_prob)
        nn.init.constant_(self.ab_cls.bias, prior_bias)
        nn.init.constant_(self.af_cls.bias, prior_bias)

    def anchor_based_forward(self, feature):
        """One level's anchor-based maps: (N, K*A, H, W) probs, (N, 4A, H, W) deltas."""
        if feature.shape[1] != self.cls_tower[0].in_channels:
            raise ValueError(f"expected {self.cls_tower[0].in_channels} input channels, "
                             f"got {feature.shape[1]}")
        cls_feat = self.cls_tower(feature)
        box_feat = self.box_tower(feature)
        return torch.sigmoid(self.ab_cls(cls_feat)), self.ab_box(box_feat)

    def anchor_free_forward(self, feature):
        """One level's anchor-free maps: (N, K, H, W) probs, (N, 4, H, W) distances."""
        cls_feat = self.cls_tower(feature)
        box_feat = self.box_tower(feature)
        dist = torch.exp(self.af_box(box_feat).clamp(max=20.0))
        return torch.sigmoid(self.af_cls(cls_feat)), dist

    def forward(self, pyramid):
        """Apply both branches to every pyramid level (towers computed once)."""
        out = {}
        for level, feature in pyramid.items():
            cls_feat = self.cls_tower(feature)
            box_feat = self.box_tower(feature)
            out[level] = LevelOutputs(
                ab_cls=torch.sigmoid(self.ab_cls(cls_feat)),
                ab_box=self.ab_box(box_feat),
                af_cls=torch.sigmoid(self.af_cls(cls_feat)),
                af_box=torch.exp(self.af_box(box_feat).clamp(max=20.0)),
            )
        return out


def anchor_grid(level_shapes, cfg: HeadConfig = None):
    """Anchors for every level given {level: (H, W)} map shapes."""
    cfg = cfg or HeadConfig()
    return {
        level: generate_anchors(level, h, w, 2 ** level, cfg.anchor_base_scale,
                                cfg.anchor_scales, cfg.anchor_ratios)
        for level, (h, w) in level_shapes.items()
    }


def level_centers(height, width, stride):
    """Image-plane coordinates of every cell center, as (H, W) x and y grids."""
    xs = (np.arange(width) + 0.5) * stride
    ys = (np.arange(height) + 0.5) * stride
    return np.meshgrid(xs, ys)


def decode_anchor_free(dist_map, stride):
    """Decode a (4, H, W) side-distance map into an (H, W, 4) xyxy box array.

    At cell center (x, y) the distances (left, top, right, bottom), scaled by
    the stride, give the box [x - l*s, y - t*s, x + r*s, y + b*s].
    """
    d = dist_map.detach().cpu().numpy() if isinstance(dist_map, torch.Tensor) else np.asarray(dist_map)
    _, h, w = d.shape
    cx, cy = level_centers(h, w, stride)
    return np.stack([cx - d[0] * stride, cy - d[1] * stride,
                     cx + d[2] * stride, cy + d[3] * stride], axis=-1)


def effective_region(gt_box, stride, height, width, shrink=0.2):
    """Half-open cell index ranges (i0, i1, j0, j1) whose centers fall inside
    the gt box scaled to ``shrink`` of its size about its center. May be empty."""
    x1, y1, x2, y2 = [float(v) for v in gt_box]
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    hw, hh = (x2 - x1) * shrink / 2, (y2 - y1) * shrink / 2
    j0 = max(0, int(math.ceil((cx - hw) / stride - 0.5)))
    j1 = min(width, int(math.floor((cx + hw) / stride - 0.5)) + 1)
    i0 = max(0, int(math.ceil((cy - hh) / stride - 0.5)))
    i1 = min(height, int(math.floor((cy + hh) / stride - 0.5)) + 1)
    return i0, i1, j0, j1


def anchor_free_level_loss(gt_box, af_cls, af_box, stride, shrink=0.2,
                           alpha=0.25, gamma=2.0):
    """Summed focal + IoU loss of one instance on one level, or None when the
    effective region contains no cell center."""
    k, h, w = af_cls.shape
    i0, i1, j0, j1 = effective_region(gt_box, stride, h, w, shrink)
    if i0 >= i1 or j0 >= j1:
        return None
    region = af_cls[0, i0:i1, j0:j1]
    n_pix = region.numel()
    cls_loss = focal_loss(region, torch.ones_like(region), alpha, gamma, normalizer=n_pix)
    boxes = decode_anchor_free(af_box, stride)[i0:i1, j0:j1].reshape(-1, 4)
    gt = torch.as_tensor(np.asarray(gt_box, dtype=np.float64))
    reg_loss = iou_loss(torch.as_tensor(boxes), gt.expand(n_pix, 4)).mean()
    return (cls_loss + reg_loss.to(cls_loss.dtype)).item()


def select_feature_level(gt_box, af_outputs, strides=None, shrink=0.2,
                         alpha=0.25, gamma=2.0):
    """Pick the pyramid level whose anchor-free loss for this instance is
    lowest (ties and all-empty regions fall back to the lowest level).

    ``af_outputs`` maps level -> (cls map (K, H, W), distance map (4, H, W))
    for a single image; ``strides`` defaults to 2**level.
    """
    if not af_outputs:
        raise ValueError("need at least one pyramid level")
    levels = sorted(af_outputs)
    best_level, best_loss = None, None
    for level in levels:
        cls_map, box_map = af_outputs[level]
        stride = strides[level] if strides else 2 ** level
        loss = anchor_free_level_loss(gt_box, cls_map, box_map, stride, shrink, alpha, gamma)
        if loss is None:
            continue
        if best_loss is None or loss < best_loss:
            best_level, best_loss = level, loss
    return levels[0] if best_level is None else best_level


def nms(boxes_xyxy, scores, iou_thr=0.5):
    """Greedy IoU suppression; returns kept indices sorted by descending score
    (score ties broken by original index)."""
    boxes = np.asarray(boxes_xyxy, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        iou = box_iou(boxes[idx:idx + 1], boxes).ravel()
        suppressed |= iou > iou_thr
    return keep


def postprocess(outputs, anchors, score_thr=0.1, nms_iou=0.5, image_index=0):
    """Decode both branches of one image, merge, threshold, suppress.

    ``outputs`` maps level -> LevelOutputs (batched); ``anchors`` maps
    level -> (H*W*A, 4) cx/cy/w/h anchors. Detections come back sorted by
    descending detector score.
    """
    if not 0 <= score_thr <= 1 or not 0 <= nms_iou <= 1:
        raise ValueError("thresholds must lie in [0, 1]")
    all_boxes, all_scores, all_sources = [], [], []
    for level in sorted(outputs):
        out = outputs[level]
        lvl_anchors = anchors[level]
        a = out.ab_cls.shape[1]
        h, w = out.ab_cls.shape[-2:]
        # anchor order is (row, col, anchor): put A last before flattening
        ab_scores = out.ab_cls[image_index].detach().cpu().numpy().transpose(1, 2, 0).reshape(-1)
        ab_deltas = (out.ab_box[image_index].detach().cpu().numpy()
                     .reshape(a, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4))
        keep = ab_scores >= score_thr
        if keep.any():
            boxes = decode_boxes(lvl_anchors[keep], ab_deltas[keep])
            all_boxes.append(boxes)
            all_scores.append(ab_scores[keep])
            all_sources += ["anchor-based"] * int(keep.sum())

        af_scores = out.af_cls[image_index, 0].detach().cpu().numpy().reshape(-1)
        keep = af_scores >= score_thr
        if keep.any():
            boxes = decode_anchor_free(out.af_box[image_index], 2 ** level).reshape(-1, 4)[keep]
            all_boxes.append(boxes)
            all_scores.append(af_scores[keep])
            all_sources += ["anchor-free"] * int(keep.sum())

    if not all_boxes:
        return []
    boxes = np.concatenate(all_boxes)
    scores = np.concatenate(all_scores)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, scores = boxes[valid], scores[valid]
    sources = [s for s, v in zip(all_sources, valid) if v]
    detections = []
    for i in nms(boxes, scores, nms_iou):
        detections.append(Detection(*boxes[i], score=float(scores[i]), source=sources[i]))
    return detections


class Detector(nn.Module):
    """Pyramid backbone plus hybrid head, with end-to-end decoding."""

    def __init__(self, backbone_cfg: BackboneConfig = None, head_cfg: HeadConfig = None):
        super().__init__()
        self.backbone = PyramidBackbone(backbone_cfg)
        self.head_cfg = head_cfg or HeadConfig()
        self.head = DetectionHead(self.head_cfg, in_channels=self.backbone.cfg.fpn_channels)

    def forward(self, images):
        return self.head(self.backbone(images))

    @torch.no_grad()
    def detect(self, images, score_thr=0.1, nms_iou=0.5):
        """Per-image detection lists for a (N, 3, H, W) batch (eval mode)."""
        was_training = self.training
        self.eval()
        try:
            outputs = self.forward(images)
            shapes = {lvl: tuple(out.ab_cls.shape[-2:]) for lvl, out in outputs.items()}
            anchors = anchor_grid(shapes, self.head_cfg)
            return [postprocess(outputs, anchors, score_thr, nms_iou, i)
                    for i in range(images.shape[0])]
        finally:
            self.train(was_training)
