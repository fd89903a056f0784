import numpy as np
import pytest
import torch

from mitodet.cascade import CascadeConfig
from mitodet.data import SynthSpec, synthesize_dataset
from mitodet.head import Detection, HeadConfig, LevelOutputs, decode_anchor_free
from mitodet.training import (decode_anchor_free_torch, detector_loss,
                              mine_hard_negatives)


def make_outputs(shapes, prior=0.01, seed=0):
    g = torch.Generator().manual_seed(seed)
    out = {}
    for lvl, (h, w) in shapes.items():
        out[lvl] = LevelOutputs(
            ab_cls=torch.rand(1, 9, h, w, generator=g) * 0.2 + prior,
            ab_box=torch.randn(1, 36, h, w, generator=g) * 0.1,
            af_cls=torch.rand(1, 1, h, w, generator=g) * 0.2 + prior,
            af_box=torch.exp(torch.randn(1, 4, h, w, generator=g) * 0.3),
        )
    return out


class TestDetectorLoss:
    SHAPES = {3: (8, 8), 4: (4, 4), 5: (2, 2)}

    def test_no_gts_gives_background_only_loss(self):
        out = make_outputs(self.SHAPES)
        parts = detector_loss(out, [np.zeros((0, 4))], HeadConfig())
        assert parts["ab_box"].item() == 0.0
        assert parts["af_box"].item() == 0.0
        assert parts["ab_cls"].item() > 0.0
        assert torch.isfinite(parts["total"])

    def test_loss_decreases_with_confident_correct_predictions(self):
        from mitodet.head import effective_region

        gt = np.array([[20.0, 20.0, 44.0, 44.0]])
        base = make_outputs(self.SHAPES)
        baseline = detector_loss(base, [gt], HeadConfig())["total"].item()

        # same outputs, but the anchor-free branch is confident exactly on the
        # instance cells and regresses its box perfectly on every level
        good = make_outputs(self.SHAPES)
        for lvl in good:
            h, w = self.SHAPES[lvl]
            stride = 2 ** lvl
            i0, i1, j0, j1 = effective_region(gt[0], stride, h, w, shrink=0.2)
            good[lvl].af_cls[0, 0, i0:i1, j0:j1] = 0.99
            for i in range(h):
                for j in range(w):
                    px, py = (j + 0.5) * stride, (i + 0.5) * stride
                    good[lvl].af_box[0, :, i, j] = torch.tensor(
                        [max(px - gt[0, 0], 1e-3) / stride, max(py - gt[0, 1], 1e-3) / stride,
                         max(gt[0, 2] - px, 1e-3) / stride, max(gt[0, 3] - py, 1e-3) / stride])
        improved = detector_loss(good, [gt], HeadConfig())["total"].item()
        assert improved < baseline

    def test_gradients_flow_to_head_outputs(self):
        out = {}
        for lvl, (h, w) in self.SHAPES.items():
            out[lvl] = LevelOutputs(*(t.clone().requires_grad_(True) for t in
                                      make_outputs(self.SHAPES)[lvl]))
        gt = np.array([[10.0, 10.0, 30.0, 30.0]])
        parts = detector_loss(out, [gt], HeadConfig())
        parts["total"].backward()
        assert out[3].ab_cls.grad is not None
        assert out[3].ab_cls.grad.abs().sum() > 0
        assert out[3].af_cls.grad.abs().sum() > 0


class TestDecodeParity:
    def test_torch_decode_matches_numpy(self, rng):
        dist = rng.uniform(0.1, 3.0, (4, 5, 6))
        got = decode_anchor_free_torch(torch.tensor(dist), stride=8).numpy()
        ref = decode_anchor_free(dist, stride=8)
        assert np.abs(got - ref).max() < 1e-9


class PlantedDetector:
    """Pretends every tile contains one fixed detection near its center."""

    def detect(self, batch, score_thr, nms_iou):
        return [[Detection(24.0, 24.0, 40.0, 40.0, 0.9)] for _ in range(batch.shape[0])]


class TestMining:
    def test_fp_count_matches_match_result(self, tmp_path):
        spec = SynthSpec(image_size=128, mitoses=(2, 3), distractors=(0, 0), margin=20,
                         min_separation=40, mitosis_diameter=(10, 16))
        manifest = synthesize_dataset(4, 2, spec, tmp_path)
        cfg = CascadeConfig(tile=64, stride=32, cls_crop=32)
        fps, (tp, fp, fn) = mine_hard_negatives(PlantedDetector(), manifest, cfg, radius=20.0)
        assert len(fps) == fp
        assert tp + fn == manifest.n_records
        assert fp > 0  # the planted grid cannot match every centroid
        for image_id, center in fps:
            assert image_id in {e.image_id for e in manifest.entries}
