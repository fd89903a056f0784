"""Dataset plumbing: annotation records, manifest IO, a deterministic
synthetic histology-like generator, and detector training-crop preparation.

Two directory layouts are understood (see README): a delimited annotation
table next to an ``images/`` directory, or mask images sitting alongside
their HPFs (``<id>.png`` + ``<id>_mask.png``). Annotation boxes use
inclusive pixel extents.
"""

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image, ImageDraw
from scipy import ndimage

MASK_SUFFIX = "_mask"
ANNOTATION_COLUMNS = ["image_id", "centroid_x", "centroid_y", "x1", "y1", "x2", "y2"]
DEFAULT_SPACING = {"icpr-like": 0.2456, "box-like": 0.25, "synthetic": 0.25}


@dataclass
class AnnotationRecord:
    """One ground-truth mitosis: centroid, optional tight box, optional mask."""

    image_id: str
    centroid: tuple  # (x, y) px
    box: tuple | None = None  # (x1, y1, x2, y2) inclusive pixel extents
    mask: np.ndarray | None = None  # (M, 2) integer (x, y) pixels

    def shifted(self, dx, dy):
        box = None if self.box is None else (self.box[0] + dx, self.box[1] + dy,
                                             self.box[2] + dx, self.box[3] + dy)
        mask = None if self.mask is None else self.mask + np.array([[dx, dy]])
        return AnnotationRecord(self.image_id, (self.centroid[0] + dx, self.centroid[1] + dy),
                                box, mask)


@dataclass
class ManifestEntry:
    image_id: str
    path: str
    records: list
    distractors: list = field(default_factory=list)


@dataclass
class DatasetManifest:
    entries: list
    split: str = "train"
    provenance: str = "synthetic"
    pixel_spacing_um: float = 0.25
    errors: list = field(default_factory=list)

    def records_by_image(self):
        return {e.image_id: e.records for e in self.entries}

    def centroids_by_image(self):
        return {e.image_id: [r.centroid for r in e.records] for e in self.entries}

    @property
    def n_records(self):
        return sum(len(e.records) for e in self.entries)


def load_image(path):
    """Read an image file as (H, W, 3) uint8."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_image(path, array):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Knobs of the synthetic generator. Mitoses are dark irregular blobs,
    distractors share the color and size distribution but stay rounder."""

    image_size: int = 512
    mitoses: tuple = (3, 8)          # inclusive count range per image
    distractors: tuple = (3, 8)
    mitosis_diameter: tuple = (8, 24)   # px
    distractor_diameter: tuple = (8, 24)
    mitosis_roughness: tuple = (0.35, 0.6)
    distractor_roughness: tuple = (0.0, 0.08)
    margin: int = 24                 # min distance of blob centers from borders
    min_separation: int = 36         # min distance between blob centers
    noise_amplitude: float = 0.035


def _pink_noise(rng, size):
    """Zero-mean unit-std noise with a 1/f amplitude spectrum."""
    f = np.fft.fftfreq(size)
    fx, fy = np.meshgrid(f, f)
    radial = np.sqrt(fx ** 2 + fy ** 2)
    radial[0, 0] = 1.0
    phases = rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size))
    spectrum = phases / radial
    spectrum[0, 0] = 0.0
    noise = np.fft.ifft2(spectrum).real
    return noise / max(noise.std(), 1e-9)


def _blob_alpha(rng, radius, roughness, supersample=4):
    """Soft coverage mask of one random star-polygon blob, plus its local size."""
    n_vertices = int(rng.integers(12, 17))
    angles = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
    radii = radius * (1.0 + roughness * rng.uniform(-1.0, 1.0, n_vertices))
    radii = np.clip(radii, 0.3 * radius, 1.9 * radius)
    extent = int(math.ceil(radii.max())) + 2
    side = 2 * extent
    canvas = Image.new("L", (side * supersample, side * supersample), 0)
    draw = ImageDraw.Draw(canvas)
    pts = [((extent + r * math.cos(a)) * supersample, (extent + r * math.sin(a)) * supersample)
           for a, r in zip(angles, radii)]
    draw.polygon(pts, fill=255)
    hi = np.asarray(canvas, dtype=np.float64) / 255.0
    # block-mean downsample gives soft 1 px edges
    alpha = hi.reshape(side, supersample, side, supersample).mean(axis=(1, 3))
    return alpha, extent


def _place_centers(rng, count, size, margin, min_separation, existing):
    centers = []
    attempts = 0
    while len(centers) < count and attempts < 2000:
        attempts += 1
        c = rng.uniform(margin, size - margin, 2)
        if all(np.hypot(c[0] - e[0], c[1] - e[1]) >= min_separation for e in existing + centers):
            centers.append((float(c[0]), float(c[1])))
    return centers


def render_synthetic_image(rng, spec: SynthSpec, image_id="synthetic"):
    """Render one image; returns (uint8 image, mitosis records, distractor
    records, list of full-frame boolean masks aligned with the records)."""
    size = spec.image_size
    base = np.array([0.87, 0.76, 0.86])
    img = np.empty((size, size, 3), dtype=np.float64)
    noise = _pink_noise(rng, size)
    for c in range(3):
        img[..., c] = base[c] + spec.noise_amplitude * noise * rng.uniform(0.8, 1.2)
    img = np.clip(img, 0, 1)

    n_mit = int(rng.integers(spec.mitoses[0], spec.mitoses[1] + 1))
    n_dis = int(rng.integers(spec.distractors[0], spec.distractors[1] + 1))
    mit_centers = _place_centers(rng, n_mit, size, spec.margin, spec.min_separation, [])
    dis_centers = _place_centers(rng, n_dis, size, spec.margin, spec.min_separation, mit_centers)

    records, distractors, masks = [], [], []
    for kind, centers in (("mitosis", mit_centers), ("distractor", dis_centers)):
        for cx, cy in centers:
            if kind == "mitosis":
                radius = rng.uniform(*spec.mitosis_diameter) / 2.0
                roughness = rng.uniform(*spec.mitosis_roughness)
            else:
                radius = rng.uniform(*spec.distractor_diameter) / 2.0
                roughness = rng.uniform(*spec.distractor_roughness)
            alpha, extent = _blob_alpha(rng, radius, roughness)
            color = np.array([0.25, 0.13, 0.38]) + rng.uniform(-0.06, 0.06, 3)
            opacity = rng.uniform(0.85, 1.0)

            x0, y0 = int(round(cx)) - extent, int(round(cy)) - extent
            ax0, ay0 = max(0, -x0), max(0, -y0)
            bx0, by0 = max(0, x0), max(0, y0)
            h = min(alpha.shape[0] - ay0, size - by0)
            w = min(alpha.shape[1] - ax0, size - bx0)
            tile = alpha[ay0:ay0 + h, ax0:ax0 + w] * opacity
            region = img[by0:by0 + h, bx0:bx0 + w]
            img[by0:by0 + h, bx0:bx0 + w] = region * (1 - tile[..., None]) + color * tile[..., None]

            full = np.zeros((size, size), dtype=bool)
            full[by0:by0 + h, bx0:bx0 + w] = alpha[ay0:ay0 + h, ax0:ax0 + w] >= 0.5
            ys, xs = np.nonzero(full)
            centroid = (float(xs.mean()), float(ys.mean()))
            box = (float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max()))
            record = AnnotationRecord(image_id, centroid, box)
            if kind == "mitosis":
                records.append(record)
                masks.append(full)
            else:
                distractors.append(record)

    return (np.clip(img * 255, 0, 255).round().astype(np.uint8), records, distractors, masks)


def synthesize_dataset(seed, n_images, spec: SynthSpec = None, out_dir=None,
                       split="train", provenance="synthetic"):
    """Generate a deterministic synthetic dataset; optionally write it to disk.

    A fixed seed reproduces the images and tables byte for byte. Mitosis
    annotations land in ``annotations.csv``; distractor blobs are recorded
    separately in ``distractors.csv`` for diagnostics only.
    """
    spec = spec or SynthSpec()
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_images):
        image_id = f"synth_{split}_{i:04d}"
        img, records, distractors, _ = render_synthetic_image(rng, spec, image_id)
        path = ""
        if out_dir is not None:
            path = os.path.join(out_dir, "images", f"{image_id}.png")
            save_image(path, img)
        entries.append(ManifestEntry(image_id, path, records, distractors))
    manifest = DatasetManifest(entries, split=split, provenance=provenance,
                               pixel_spacing_um=DEFAULT_SPACING[provenance])
    if out_dir is not None:
        write_manifest_tables(out_dir, manifest)
    return manifest


# ---------------------------------------------------------------------------
# manifest / table IO
# ---------------------------------------------------------------------------

def _format_value(v):
    return "" if v is None else repr(float(v))


def write_annotation_table(path, records):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(ANNOTATION_COLUMNS)
        for r in records:
            box = r.box or (None, None, None, None)
            writer.writerow([r.image_id, _format_value(r.centroid[0]), _format_value(r.centroid[1]),
                             *(_format_value(b) for b in box)])


def write_manifest_tables(out_dir, manifest: DatasetManifest):
    out = Path(out_dir)
    write_annotation_table(out / "annotations.csv",
                           [r for e in manifest.entries for r in e.records])
    distractors = [r for e in manifest.entries for r in e.distractors]
    if distractors:
        write_annotation_table(out / "distractors.csv", distractors)
    with open(out / "meta.yaml", "w") as f:
        yaml.safe_dump({"split": manifest.split, "provenance": manifest.provenance,
                        "pixel_spacing_um": manifest.pixel_spacing_um}, f, sort_keys=True)


def _parse_annotation_rows(path, image_sizes, errors):
    """Read the interchange table; malformed rows are reported, not fatal."""
    by_image = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ANNOTATION_COLUMNS:
            errors.append(f"{path}: unexpected header {header}")
            return by_image
        for lineno, row in enumerate(reader, start=2):
            try:
                image_id = row[0]
                if image_id not in image_sizes:
                    raise ValueError(f"unknown image id {image_id!r}")
                vals = [float(v) if v != "" else None for v in row[1:7]]
                cx, cy, x1, y1, x2, y2 = vals
                box = None
                if None not in (x1, y1, x2, y2):
                    box = (x1, y1, x2, y2)
                if cx is None or cy is None:
                    if box is None:
                        raise ValueError("row has neither centroid nor box")
                    cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
                w, h = image_sizes[image_id]
                if not (0 <= cx < w and 0 <= cy < h):
                    raise ValueError(f"centroid ({cx}, {cy}) outside {w}x{h} image")
                if box is not None and not (box[0] <= cx <= box[2] and box[1] <= cy <= box[3]):
                    raise ValueError("centroid outside its box")
                by_image.setdefault(image_id, []).append(
                    AnnotationRecord(image_id, (cx, cy), box))
            except (ValueError, IndexError) as exc:
                errors.append(f"{path}:{lineno}: {exc}")
    return by_image


def detect_layout(path):
    path = Path(path)
    if (path / "annotations.csv").exists():
        return "table"
    images = path / "images" if (path / "images").is_dir() else path
    if any(p.stem.endswith(MASK_SUFFIX) for p in images.glob("*.png")):
        return "masks"
    raise ValueError(f"{path}: neither an annotations.csv table nor *_mask.png files found")


def ingest(path, layout=None):
    """Read one dataset directory into a manifest.

    ``layout`` is ``"table"`` or ``"masks"`` (auto-detected by default).
    Unreadable files and malformed rows are collected on ``manifest.errors``
    while ingestion continues.
    """
    path = Path(path)
    layout = layout or detect_layout(path)
    meta = {}
    if (path / "meta.yaml").exists():
        with open(path / "meta.yaml") as f:
            meta = yaml.safe_load(f) or {}
    provenance = meta.get("provenance", "box-like" if layout == "table" else "icpr-like")
    split = meta.get("split", path.name if path.name in ("train", "test") else "train")
    spacing = meta.get("pixel_spacing_um", DEFAULT_SPACING.get(provenance, 0.25))

    errors = []
    image_dir = path / "images" if (path / "images").is_dir() else path
    entries = []
    if layout == "table":
        paths = sorted(p for p in image_dir.glob("*.png"))
        sizes = {}
        for p in paths:
            try:
                with Image.open(p) as im:
                    sizes[p.stem] = im.size
            except OSError as exc:
                errors.append(f"{p}: {exc}")
        by_image = _parse_annotation_rows(path / "annotations.csv", sizes, errors)
        distractor_table = path / "distractors.csv"
        by_image_dis = {}
        if distractor_table.exists():
            by_image_dis = _parse_annotation_rows(distractor_table, sizes, errors)
        for p in paths:
            if p.stem not in sizes:
                continue
            entries.append(ManifestEntry(p.stem, str(p), by_image.get(p.stem, []),
                                         by_image_dis.get(p.stem, [])))
    elif layout == "masks":
        for p in sorted(image_dir.glob("*.png")):
            if p.stem.endswith(MASK_SUFFIX):
                continue
            mask_path = p.with_name(p.stem + MASK_SUFFIX + ".png")
            records = []
            if mask_path.exists():
                try:
                    records = records_from_mask(p.stem, np.asarray(Image.open(mask_path).convert("L")))
                except OSError as exc:
                    errors.append(f"{mask_path}: {exc}")
            entries.append(ManifestEntry(p.stem, str(p), records))
    else:
        raise ValueError(f"unknown layout {layout!r}")

    return DatasetManifest(entries, split=split, provenance=provenance,
                           pixel_spacing_um=spacing, errors=errors)


def records_from_mask(image_id, mask):
    """Split a label/binary mask into one record per connected component.

    Centroids are the rounded mask-pixel means; boxes are inclusive extents.
    """
    labeled, n = ndimage.label(np.asarray(mask) > 0)
    records = []
    for i in range(1, n + 1):
        ys, xs = np.nonzero(labeled == i)
        centroid = (float(np.round(xs.mean())), float(np.round(ys.mean())))
        box = (float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max()))
        records.append(AnnotationRecord(image_id, centroid, box,
                                        mask=np.stack([xs, ys], axis=1)))
    return records


def ingest_dataset(root, layout=None):
    """Ingest the ``train``/``test`` split subdirectories under ``root``.

    Raises if the two splits share image ids (splits must stay disjoint).
    """
    root = Path(root)
    manifests = {}
    for split in ("train", "test"):
        if (root / split).is_dir():
            manifests[split] = ingest(root / split, layout)
            manifests[split].split = split
    if len(manifests) == 2:
        shared = ({e.image_id for e in manifests["train"].entries} &
                  {e.image_id for e in manifests["test"].entries})
        if shared:
            raise ValueError(f"train/test image sets overlap: {sorted(shared)[:5]}")
    if not manifests:
        raise ValueError(f"{root}: no train/ or test/ subdirectory found")
    return manifests


# ---------------------------------------------------------------------------
# detector training crops
# ---------------------------------------------------------------------------

@dataclass
class CropSample:
    crop_id: str
    image: np.ndarray
    records: list
    source_image: str
    origin: tuple  # (x0, y0) in source pixels


def _positive_origin(rng, record, crop, w, h):
    """Uniform crop origin keeping the gt (box, or centroid with margin) inside."""
    if record.box is not None:
        x1, y1, x2, y2 = record.box
    else:
        m = 20
        x1 = record.centroid[0] - m
        y1 = record.centroid[1] - m
        x2 = record.centroid[0] + m
        y2 = record.centroid[1] + m
    lo_x = max(0, int(math.ceil(x2)) - crop + 1)
    hi_x = min(w - crop, int(math.floor(x1)))
    lo_y = max(0, int(math.ceil(y2)) - crop + 1)
    hi_y = min(h - crop, int(math.floor(y1)))
    if lo_x > hi_x or lo_y > hi_y:  # gt larger than the crop: center on it
        cx, cy = record.centroid
        return (int(np.clip(round(cx) - crop // 2, 0, w - crop)),
                int(np.clip(round(cy) - crop // 2, 0, h - crop)))
    return int(rng.integers(lo_x, hi_x + 1)), int(rng.integers(lo_y, hi_y + 1))


def make_training_crops(manifest: DatasetManifest, crop_size=224, negatives_per_image=2,
                        rng=None, images=None):
    """Cut detector training crops: one jittered gt-centered crop per record
    plus ``negatives_per_image`` random crops per image.

    Annotations are remapped into crop coordinates; records whose centroid
    falls outside a crop are dropped from that crop's list. ``images`` may
    pre-supply {image_id: array} to skip file reads.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    crops = []
    for entry in manifest.entries:
        img = images[entry.image_id] if images else load_image(entry.path)
        h, w = img.shape[:2]
        if crop_size > min(h, w):
            raise ValueError(f"crop {crop_size} larger than image {w}x{h}")
        origins = [_positive_origin(rng, r, crop_size, w, h) for r in entry.records]
        origins += [(int(rng.integers(0, w - crop_size + 1)), int(rng.integers(0, h - crop_size + 1)))
                    for _ in range(negatives_per_image)]
        for k, (x0, y0) in enumerate(origins):
            kept = [r.shifted(-x0, -y0) for r in entry.records
                    if x0 <= r.centroid[0] < x0 + crop_size and y0 <= r.centroid[1] < y0 + crop_size]
            crops.append(CropSample(f"{entry.image_id}_crop{k:03d}",
                                    img[y0:y0 + crop_size, x0:x0 + crop_size].copy(),
                                    kept, entry.image_id, (x0, y0)))
    return crops


def write_crops(out_dir, crops, provenance="synthetic", pixel_spacing_um=0.25):
    """Persist crops as an ingestible dataset plus an origin audit table."""
    out = Path(out_dir)
    records = []
    for c in crops:
        save_image(out / "images" / f"{c.crop_id}.png", c.image)
        for r in c.records:
            records.append(AnnotationRecord(c.crop_id, r.centroid, r.box))
    write_annotation_table(out / "annotations.csv", records)
    with open(out / "meta.yaml", "w") as f:
        yaml.safe_dump({"split": "train", "provenance": provenance,
                        "pixel_spacing_um": pixel_spacing_um}, f, sort_keys=True)
    with open(out / "origins.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["crop_id", "source_image", "x0", "y0"])
        for c in crops:
            writer.writerow([c.crop_id, c.source_image, c.origin[0], c.origin[1]])
