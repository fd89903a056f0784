import hashlib
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from mitodet.data import (AnnotationRecord, SynthSpec, ingest, ingest_dataset,
                          load_image, make_training_crops, records_from_mask,
                          render_synthetic_image, save_image, synthesize_dataset,
                          write_crops)

TINY = SynthSpec(image_size=64, mitoses=(1, 2), distractors=(0, 1), margin=14,
                 min_separation=12, mitosis_diameter=(8, 14), distractor_diameter=(8, 14))


def dir_digest(path):
    h = hashlib.sha256()
    for p in sorted(Path(path).rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestSynthesis:
    def test_same_seed_same_bytes(self, tmp_path):
        synthesize_dataset(7, 3, TINY, tmp_path / "a")
        synthesize_dataset(7, 3, TINY, tmp_path / "b")
        assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")

    def test_different_seed_differs(self, tmp_path):
        synthesize_dataset(7, 2, TINY, tmp_path / "a")
        synthesize_dataset(8, 2, TINY, tmp_path / "b")
        assert dir_digest(tmp_path / "a") != dir_digest(tmp_path / "b")

    def test_exact_counts_when_ranges_fixed(self):
        spec = SynthSpec(image_size=96, mitoses=(5, 5), distractors=(0, 0), margin=16,
                         min_separation=14, mitosis_diameter=(8, 12))
        manifest = synthesize_dataset(3, 4, spec)
        for entry in manifest.entries:
            assert len(entry.records) == 5
            assert len(entry.distractors) == 0

    def test_centroids_match_rendered_masks(self, rng):
        img, records, _, masks = render_synthetic_image(rng, TINY, "probe")
        assert len(records) >= 1
        for record, mask in zip(records, masks):
            ys, xs = np.nonzero(mask)
            assert abs(xs.mean() - record.centroid[0]) <= 1.0
            assert abs(ys.mean() - record.centroid[1]) <= 1.0
            x1, y1, x2, y2 = record.box
            assert (x1, y1, x2, y2) == (xs.min(), ys.min(), xs.max(), ys.max())

    def test_blob_centers_respect_margins(self, rng):
        spec = SynthSpec(image_size=128, margin=24, min_separation=30)
        _, records, distractors, _ = render_synthetic_image(rng, spec, "m")
        pts = [r.centroid for r in records + distractors]
        for i, (x, y) in enumerate(pts):
            for x2, y2 in pts[i + 1:]:
                assert np.hypot(x - x2, y - y2) >= spec.min_separation - 5  # extent-based drift

    def test_file_count(self, tmp_path):
        synthesize_dataset(7, 20, TINY, tmp_path)
        assert len(list((tmp_path / "images").glob("*.png"))) == 20
        assert (tmp_path / "annotations.csv").exists()
        assert (tmp_path / "meta.yaml").exists()


class TestIngestTable:
    def test_round_trip(self, tmp_path):
        manifest = synthesize_dataset(11, 3, TINY, tmp_path)
        back = ingest(tmp_path)
        assert back.errors == []
        assert len(back.entries) == 3
        for a, b in zip(manifest.entries, back.entries):
            assert a.image_id == b.image_id
            assert len(a.records) == len(b.records)
            for ra, rb in zip(a.records, b.records):
                assert ra.centroid == rb.centroid
                assert ra.box == rb.box
            assert len(a.distractors) == len(b.distractors)

    def test_box_only_row_gets_center_centroid(self, tmp_path):
        save_image(tmp_path / "images" / "im0.png", np.zeros((200, 200, 3), np.uint8))
        (tmp_path / "annotations.csv").write_text(
            "image_id,centroid_x,centroid_y,x1,y1,x2,y2\nim0,,,100,100,140,140\n")
        manifest = ingest(tmp_path)
        assert manifest.errors == []
        assert manifest.entries[0].records[0].centroid == (120.0, 120.0)

    def test_malformed_rows_reported_not_fatal(self, tmp_path):
        save_image(tmp_path / "images" / "im0.png", np.zeros((64, 64, 3), np.uint8))
        (tmp_path / "annotations.csv").write_text(
            "image_id,centroid_x,centroid_y,x1,y1,x2,y2\n"
            "im0,10,10,,,,\n"
            "ghost,5,5,,,,\n"          # unknown image
            "im0,not_a_number,3,,,,\n"  # bad float
            "im0,999,3,,,,\n"           # centroid outside image
            "im0,20,20,,,,\n")
        manifest = ingest(tmp_path)
        assert len(manifest.entries[0].records) == 2
        assert len(manifest.errors) == 3

    def test_split_counts_35_15(self, tmp_path):
        synthesize_dataset(1, 35, TINY, tmp_path / "train", split="train")
        synthesize_dataset(2, 15, TINY, tmp_path / "test", split="test")
        manifests = ingest_dataset(tmp_path)
        assert len(manifests["train"].entries) == 35
        assert len(manifests["test"].entries) == 15

    def test_overlapping_splits_rejected(self, tmp_path):
        synthesize_dataset(1, 2, TINY, tmp_path / "train", split="train")
        synthesize_dataset(1, 2, TINY, tmp_path / "test", split="train")  # same ids
        with pytest.raises(ValueError, match="overlap"):
            ingest_dataset(tmp_path)


class TestIngestMasks:
    def test_three_pixel_component(self):
        mask = np.zeros((32, 32), np.uint8)
        mask[10, 10:13] = 255  # pixels (10,10), (11,10), (12,10) in (x, y)
        records = records_from_mask("hpf", mask)
        assert len(records) == 1
        assert records[0].centroid == (11.0, 10.0)
        assert records[0].box == (10.0, 10.0, 12.0, 10.0)
        assert len(records[0].mask) == 3

    def test_mask_layout_ingest(self, tmp_path):
        img = np.full((64, 64, 3), 200, np.uint8)
        save_image(tmp_path / "hpf0.png", img)
        mask = np.zeros((64, 64), np.uint8)
        mask[20:24, 30:34] = 255
        mask[50:52, 10:12] = 255
        Image.fromarray(mask).save(tmp_path / "hpf0_mask.png")
        save_image(tmp_path / "hpf1.png", img)  # no mask: zero records
        manifest = ingest(tmp_path)
        assert manifest.provenance == "icpr-like"
        assert manifest.pixel_spacing_um == pytest.approx(0.2456)
        by_id = {e.image_id: e for e in manifest.entries}
        assert len(by_id["hpf0"].records) == 2
        assert by_id["hpf1"].records == []

    def test_unknown_layout_rejected(self, tmp_path):
        (tmp_path / "images").mkdir()
        with pytest.raises(ValueError, match="neither"):
            ingest(tmp_path)


class TestTrainingCrops:
    def make_manifest(self, tmp_path, n=2):
        spec = SynthSpec(image_size=256, mitoses=(3, 5), distractors=(1, 2), margin=24,
                         min_separation=30)
        return synthesize_dataset(5, n, spec, tmp_path)

    def test_counts_and_containment(self, tmp_path, rng):
        manifest = self.make_manifest(tmp_path)
        crops = make_training_crops(manifest, crop_size=224, negatives_per_image=2, rng=rng)
        n_gts = manifest.n_records
        assert len(crops) == n_gts + 2 * len(manifest.entries)
        for c in crops:
            assert c.image.shape == (224, 224, 3)
            for r in c.records:
                assert 0 <= r.centroid[0] < 224 and 0 <= r.centroid[1] < 224

    def test_positive_crop_contains_its_gt_box(self, tmp_path, rng):
        manifest = self.make_manifest(tmp_path)
        crops = make_training_crops(manifest, crop_size=224, negatives_per_image=0, rng=rng)
        flat_gts = [r for e in manifest.entries for r in e.records]
        assert len(crops) == len(flat_gts)
        for crop, gt in zip(crops, flat_gts):
            x0, y0 = crop.origin
            assert x0 <= gt.box[0] and gt.box[2] <= x0 + 224
            assert y0 <= gt.box[1] and gt.box[3] <= y0 + 224

    def test_remap_inverts_exactly(self, tmp_path, rng):
        manifest = self.make_manifest(tmp_path)
        crops = make_training_crops(manifest, crop_size=224, negatives_per_image=1, rng=rng)
        originals = {e.image_id: {r.centroid for r in e.records} for e in manifest.entries}
        for c in crops:
            for r in c.records:
                mapped_back = (r.centroid[0] + c.origin[0], r.centroid[1] + c.origin[1])
                assert mapped_back in originals[c.source_image]

    def test_crop_pixels_match_source(self, tmp_path, rng):
        manifest = self.make_manifest(tmp_path, n=1)
        crops = make_training_crops(manifest, crop_size=224, negatives_per_image=1, rng=rng)
        src = load_image(manifest.entries[0].path)
        for c in crops:
            x0, y0 = c.origin
            assert np.array_equal(c.image, src[y0:y0 + 224, x0:x0 + 224])

    def test_write_crops_is_ingestible(self, tmp_path, rng):
        manifest = self.make_manifest(tmp_path / "src")
        crops = make_training_crops(manifest, 224, 1, rng)
        write_crops(tmp_path / "crops", crops)
        back = ingest(tmp_path / "crops")
        assert back.errors == []
        assert len(back.entries) == len(crops)
        assert (tmp_path / "crops" / "origins.csv").exists()

    def test_oversized_crop_rejected(self, tmp_path, rng):
        manifest = self.make_manifest(tmp_path)
        with pytest.raises(ValueError, match="crop"):
            make_training_crops(manifest, crop_size=512, negatives_per_image=0, rng=rng)
