"""Training loops and loss assembly for both stages, plus the hard-negative
mining pass that feeds detector false positives to the classifier.

The anchor-based branch trains with focal classification loss and smooth-L1
on box deltas; the anchor-free branch picks, per instance, the pyramid level
with the lowest summed focal + IoU loss and is supervised only there.
"""

import csv
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .cascade import CascadeConfig, detect_tiled
from .classifier import PatchClassifier, augment, patches_to_network_input
from .config import RunConfig
from .data import load_image
from .evaluation import match_detections
from .head import (Detection, Detector, HeadConfig, IGNORE, NEGATIVE, anchor_grid,
                   assign_anchors, cxcywh_to_xyxy, effective_region, encode_boxes,
                   focal_loss, iou_loss, select_feature_level)


def seed_all(seed):
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def _af_centers(height, width, stride, device, dtype):
    ys = (torch.arange(height, device=device, dtype=dtype) + 0.5) * stride
    xs = (torch.arange(width, device=device, dtype=dtype) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    return cx, cy


def decode_anchor_free_torch(dist_map, stride):
    """Differentiable version of the side-distance decode: (4, H, W) -> (H, W, 4)."""
    _, h, w = dist_map.shape
    cx, cy = _af_centers(h, w, stride, dist_map.device, dist_map.dtype)
    return torch.stack([cx - dist_map[0] * stride, cy - dist_map[1] * stride,
                        cx + dist_map[2] * stride, cy + dist_map[3] * stride], dim=-1)


class _AnchorCache:
    """Per-shape anchors (cx/cy/w/h and xyxy, concatenated over levels)."""

    def __init__(self, head_cfg: HeadConfig):
        self.head_cfg = head_cfg
        self._cache = {}

    def get(self, level_shapes):
        key = tuple(sorted(level_shapes.items()))
        if key not in self._cache:
            per_level = anchor_grid(dict(level_shapes), self.head_cfg)
            cxcywh = np.concatenate([per_level[lvl] for lvl in sorted(per_level)])
            self._cache[key] = (per_level, cxcywh, cxcywh_to_xyxy(cxcywh))
        return self._cache[key]


def _flatten_ab(level_out, image_index):
    """Class probs and deltas of one image in anchor order (row, col, anchor)."""
    a = level_out.ab_cls.shape[1]
    h, w = level_out.ab_cls.shape[-2:]
    cls = level_out.ab_cls[image_index].permute(1, 2, 0).reshape(-1)
    box = level_out.ab_box[image_index].reshape(a, 4, h, w).permute(2, 3, 0, 1).reshape(-1, 4)
    return cls, box


def _af_positive_cells(gt_box, stride, height, width, shrink):
    """Supervised cells for one instance on one level; falls back to the cell
    holding the box center so every instance trains at least one pixel."""
    i0, i1, j0, j1 = effective_region(gt_box, stride, height, width, shrink)
    if i0 < i1 and j0 < j1:
        return i0, i1, j0, j1
    cx = (gt_box[0] + gt_box[2]) / 2
    cy = (gt_box[1] + gt_box[3]) / 2
    j = int(np.clip(cx // stride, 0, width - 1))
    i = int(np.clip(cy // stride, 0, height - 1))
    return i, i + 1, j, j + 1


def detector_loss(outputs, gt_boxes_per_image, head_cfg: HeadConfig, anchor_cache=None):
    """Total loss of one batch and its components.

    ``outputs`` is the head's {level: LevelOutputs}; ``gt_boxes_per_image``
    holds one (G, 4) xyxy array per image (G may be 0).
    """
    levels = sorted(outputs)
    shapes = {lvl: tuple(outputs[lvl].ab_cls.shape[-2:]) for lvl in levels}
    cache = anchor_cache or _AnchorCache(head_cfg)
    _, anchors_cxcywh, anchors_xyxy = cache.get(shapes)
    device = outputs[levels[0]].ab_cls.device
    dtype = outputs[levels[0]].ab_cls.dtype
    n_images = outputs[levels[0]].ab_cls.shape[0]

    ab_cls_loss = torch.zeros((), device=device, dtype=dtype)
    ab_box_loss = torch.zeros((), device=device, dtype=dtype)
    af_cls_loss = torch.zeros((), device=device, dtype=dtype)
    af_box_loss = torch.zeros((), device=device, dtype=dtype)

    for i in range(n_images):
        gts = np.asarray(gt_boxes_per_image[i], dtype=np.float64).reshape(-1, 4)
        cls_probs = torch.cat([_flatten_ab(outputs[lvl], i)[0] for lvl in levels])
        box_preds = torch.cat([_flatten_ab(outputs[lvl], i)[1] for lvl in levels])

        labels = assign_anchors(anchors_xyxy, gts, head_cfg.pos_iou, head_cfg.neg_iou)
        keep = labels != IGNORE
        targets = torch.as_tensor((labels >= 0).astype(np.float32), device=device)
        n_pos = max(int((labels >= 0).sum()), 1)
        ab_cls_loss = ab_cls_loss + focal_loss(
            cls_probs[keep], targets[keep], head_cfg.focal_alpha, head_cfg.focal_gamma,
            normalizer=n_pos)
        pos = labels >= 0
        if pos.any():
            target_deltas = encode_boxes(anchors_cxcywh[pos], gts[labels[pos]])
            ab_box_loss = ab_box_loss + F.smooth_l1_loss(
                box_preds[pos], torch.as_tensor(target_deltas, device=device, dtype=dtype),
                beta=1.0 / 9.0, reduction="sum") / n_pos

        # anchor-free branch: online level selection per instance
        af_sel = {lvl: (outputs[lvl].af_cls[i].detach(), outputs[lvl].af_box[i].detach())
                  for lvl in levels}
        pos_masks = {lvl: torch.zeros(shapes[lvl], dtype=torch.bool, device=device)
                     for lvl in levels}
        assigned = {lvl: {} for lvl in levels}  # (i, j) -> gt row, smaller boxes win
        order = np.argsort([-(g[2] - g[0]) * (g[3] - g[1]) for g in gts])
        for g in order:
            box = gts[g]
            lvl = select_feature_level(box, af_sel, shrink=head_cfg.shrink,
                                       alpha=head_cfg.focal_alpha, gamma=head_cfg.focal_gamma)
            h, w = shapes[lvl]
            i0, i1, j0, j1 = _af_positive_cells(box, 2 ** lvl, h, w, head_cfg.shrink)
            pos_masks[lvl][i0:i1, j0:j1] = True
            for ii in range(i0, i1):
                for jj in range(j0, j1):
                    assigned[lvl][(ii, jj)] = g

        total_pos_pixels = max(sum(int(m.sum()) for m in pos_masks.values()), 1)
        for lvl in levels:
            probs = outputs[lvl].af_cls[i, 0]
            target = pos_masks[lvl].to(dtype)
            af_cls_loss = af_cls_loss + focal_loss(
                probs, target, head_cfg.focal_alpha, head_cfg.focal_gamma,
                normalizer=total_pos_pixels)
            if assigned[lvl]:
                boxes = decode_anchor_free_torch(outputs[lvl].af_box[i], 2 ** lvl)
                cells = sorted(assigned[lvl])
                pred = torch.stack([boxes[ii, jj] for ii, jj in cells])
                gt = torch.as_tensor(np.stack([gts[assigned[lvl][c]] for c in cells]),
                                     device=device, dtype=dtype)
                af_box_loss = af_box_loss + iou_loss(pred, gt).sum() / total_pos_pixels

    n = max(n_images, 1)
    parts = {"ab_cls": ab_cls_loss / n, "ab_box": ab_box_loss / n,
             "af_cls": af_cls_loss / n, "af_box": af_box_loss / n}
    parts["total"] = sum(parts.values())
    return parts


# ---------------------------------------------------------------------------
# optimizer state <-> arrays (for the repo's own checkpoint format)
# ---------------------------------------------------------------------------

def _optimizer_arrays(optimizer):
    arrays = {}
    for gi, group in enumerate(optimizer.param_groups):
        for pi, p in enumerate(group["params"]):
            state = optimizer.state.get(p)
            if not state:
                continue
            prefix = f"optim/{gi}/{pi}/"
            for key, value in state.items():
                arrays[prefix + key] = (value.detach().cpu().numpy()
                                        if torch.is_tensor(value) else np.asarray(value))
    return arrays


def _restore_optimizer(optimizer, arrays):
    for gi, group in enumerate(optimizer.param_groups):
        for pi, p in enumerate(group["params"]):
            prefix = f"optim/{gi}/{pi}/"
            state = {}
            for key in ("step", "exp_avg", "exp_avg_sq"):
                name = prefix + key
                if name in arrays:
                    arr = arrays[name]
                    state[key] = (torch.tensor(float(arr)) if arr.ndim == 0
                                  else torch.from_numpy(np.array(arr)))
            if state:
                optimizer.state[p] = state


class TrainLog:
    """CSV loss/audit log, one row per entry."""

    def __init__(self, path, columns):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.columns = columns
        with open(self.path, "w", newline="") as f:
            csv.writer(f).writerow(columns)

    def append(self, row):
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(row)


def _crop_batches(crops, batch_size, rng):
    order = rng.permutation(len(crops))
    for i in range(0, len(order), batch_size):
        yield [crops[j] for j in order[i:i + batch_size]]


def train_detector(crops, cfg: RunConfig, out_dir, resume=None, device="cpu"):
    """Train the detector on prepared crops; writes ``detector.npz`` plus a
    loss-curve table. ``resume`` restarts from a previous checkpoint's step
    count and parameters."""
    out = Path(out_dir)
    rng = seed_all(cfg.seed)
    model = Detector(cfg.backbone, cfg.head).to(device)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.detector_train.lr,
                           weight_decay=cfg.detector_train.weight_decay)
    start_epoch, global_step = 0, 0
    if resume is not None:
        arrays, meta = ckpt.load_checkpoint(resume)
        model_arrays = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
        ckpt.load_into_module(model, model_arrays)
        _restore_optimizer(opt, arrays)
        start_epoch = int(meta.get("epoch", 0))
        global_step = int(meta.get("global_step", 0))

    cache = _AnchorCache(cfg.head)
    log = TrainLog(out / "detector_train_log.csv",
                   ["step", "epoch", "total", "ab_cls", "ab_box", "af_cls", "af_box"])
    model.train()
    for epoch in range(start_epoch, start_epoch + cfg.detector_train.epochs):
        epoch_rng = np.random.default_rng(cfg.seed * 100003 + epoch)
        for batch in _crop_batches(crops, cfg.detector_train.batch_size, epoch_rng):
            images = torch.stack([
                torch.from_numpy(c.image.astype(np.float32) / 255.0).permute(2, 0, 1)
                for c in batch]).to(device)
            gts = [np.array([r.box for r in c.records], dtype=np.float64).reshape(-1, 4)
                   for c in batch]
            outputs = model(images)
            parts = detector_loss(outputs, gts, cfg.head, cache)
            opt.zero_grad()
            parts["total"].backward()
            # focal loss occasionally spikes on confidently-wrong anchors
            nn.utils.clip_grad_norm_(model.parameters(), 10.0)
            opt.step()
            global_step += 1
            if global_step % cfg.detector_train.log_every == 0 or global_step == 1:
                log.append([global_step, epoch] + [f"{parts[k].item():.6f}" for k in
                                                   ("total", "ab_cls", "ab_box", "af_cls", "af_box")])

    arrays = {f"model/{k}": v for k, v in ckpt.module_arrays(model).items()}
    arrays.update(_optimizer_arrays(opt))
    path = ckpt.save_checkpoint(out / "detector.npz", arrays,
                                {"kind": "detector", "epoch": start_epoch + cfg.detector_train.epochs,
                                 "global_step": global_step})
    return path


def build_detector(cfg: RunConfig, checkpoint_path=None, device="cpu"):
    model = Detector(cfg.backbone, cfg.head).to(device)
    if checkpoint_path is not None:
        arrays, _ = ckpt.load_checkpoint(checkpoint_path)
        model_arrays = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
        ckpt.load_into_module(model, model_arrays)
    model.eval()
    return model


def build_classifier(cfg: RunConfig, checkpoint_path=None, device="cpu"):
    model = PatchClassifier(cfg.classifier).to(device)
    if checkpoint_path is not None:
        arrays, _ = ckpt.load_checkpoint(checkpoint_path)
        model_arrays = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
        ckpt.load_into_module(model, model_arrays)
    model.eval()
    return model


def mine_hard_negatives(detector, manifest, cascade_cfg: CascadeConfig, radius=20.0,
                        device="cpu"):
    """Run stage one over a split and collect false-positive centers.

    Returns (fps, counts) where fps is a list of (image_id, center) and
    counts the pooled (tp, fp, fn) of the detector on that split.
    """
    fps = []
    tp = fp = fn = 0
    for entry in manifest.entries:
        img = load_image(entry.path)
        dets = detect_tiled(img, detector, cascade_cfg, device)
        m = match_detections(dets, [r.centroid for r in entry.records], radius)
        fps.extend((entry.image_id, dets[di].center) for di in m.fp)
        tp, fp, fn = tp + m.n_tp, fp + m.n_fp, fn + m.n_fn
    return fps, (tp, fp, fn)


def train_classifier(samples, cfg: RunConfig, out_dir, device="cpu"):
    """Train the patch classifier on a balanced sample set; writes
    ``classifier.npz`` and a per-batch sampling log proving batch balance."""
    out = Path(out_dir)
    rng = seed_all(cfg.seed + 1)
    model = PatchClassifier(cfg.classifier).to(device)
    if cfg.classifier.pretrained:
        arrays, _ = ckpt.load_checkpoint(cfg.classifier.pretrained)
        model_arrays = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
        ckpt.load_into_module(model, model_arrays, strict=False)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.classifier_train.lr,
                           weight_decay=cfg.classifier_train.weight_decay)
    pos_idx = [i for i, s in enumerate(samples) if s.label == 1]
    neg_idx = [i for i, s in enumerate(samples) if s.label == 0]
    if not pos_idx or not neg_idx:
        raise ValueError("classifier training needs both positive and negative samples")
    half = max(1, cfg.classifier_train.batch_size // 2)
    steps = max(1, min(len(pos_idx), len(neg_idx)) // half)
    log = TrainLog(out / "classifier_train_log.csv",
                   ["epoch", "step", "n_pos", "n_neg", "loss"])

    model.train()
    global_step = 0
    for epoch in range(cfg.classifier_train.epochs):
        p_order = rng.permutation(pos_idx)
        n_order = rng.permutation(neg_idx)
        for s in range(steps):
            chosen = list(p_order[s * half:(s + 1) * half]) + list(n_order[s * half:(s + 1) * half])
            patches, labels = [], []
            for j in chosen:
                pix = samples[j].pixels
                if cfg.classifier_train.augment:
                    pix = augment(pix, rng)
                patches.append(pix)
                labels.append(samples[j].label)
            inputs = patches_to_network_input(patches, cfg.classifier.input_size)
            x = torch.from_numpy(inputs).permute(0, 3, 1, 2).to(device) * 2 - 1
            y = torch.tensor(labels, dtype=torch.float32, device=device)
            logits = model(x)
            loss = F.binary_cross_entropy_with_logits(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            global_step += 1
            log.append([epoch, global_step, int(sum(labels)), int(len(labels) - sum(labels)),
                        f"{loss.item():.6f}"])

    arrays = {f"model/{k}": v for k, v in ckpt.module_arrays(model).items()}
    path = ckpt.save_checkpoint(out / "classifier.npz", arrays,
                                {"kind": "classifier", "epochs": cfg.classifier_train.epochs,
                                 "global_step": global_step})
    return path
