"""Command-line workflow: synthesize data, prepare detector crops, train the
detector, mine its false positives, train the classifier on hardened data,
run two-stage inference and evaluate with centroid matching.

Every command writes its fully resolved configuration and the tool version
next to its outputs; a fixed seed makes synthesis and evaluation
byte-reproducible.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cascade import render_overlay, run_cascade, write_detections, read_detections
from .classifier import build_training_set, save_patch_set
from .config import RunConfig, load_config, save_config
from .data import (CropSample, ingest, ingest_dataset, load_image, make_training_crops,
                   synthesize_dataset, write_crops)
from .evaluation import (evaluate_image_sets, format_metrics_report, write_match_table)
from .training import (build_classifier, build_detector, mine_hard_negatives,
                       train_classifier, train_detector)


def _resolve_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "device", None) is not None:
        cfg.device = args.device
    for attr, target in [("n_train", ("synth", "n_train")), ("n_test", ("synth", "n_test")),
                         ("epochs", None), ("score_thr", ("cascade", "score_thr")),
                         ("accept_thr", ("cascade", "accept_thr")),
                         ("radius", ("evaluate", "radius"))]:
        value = getattr(args, attr, None)
        if value is None:
            continue
        if attr == "epochs":
            if args.command == "train-det":
                cfg.detector_train.epochs = value
            else:
                cfg.classifier_train.epochs = value
        else:
            setattr(getattr(cfg, target[0]), target[1], value)
    return cfg


def _write_audit(out_dir, cfg):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "resolved_config.yaml", cfg)
    (out / "version.txt").write_text(f"mitodet {__version__}\n")


def _load_split(path, split):
    """Accept either a split directory or a dataset root with split subdirs."""
    path = Path(path)
    if (path / split).is_dir():
        return ingest_dataset(path)[split]
    return ingest(path)


def cmd_synth(cfg: RunConfig, args):
    out = Path(args.out)
    _write_audit(out, cfg)
    synthesize_dataset(cfg.seed, cfg.synth.n_train, cfg.synth.spec,
                       out / "train", split="train")
    if cfg.synth.n_test > 0:
        synthesize_dataset(cfg.seed + 1, cfg.synth.n_test, cfg.synth.spec,
                           out / "test", split="test")
    print(f"synthesized {cfg.synth.n_train} train / {cfg.synth.n_test} test images into {out}")
    return 0


def cmd_prepare(cfg: RunConfig, args):
    out = Path(args.out)
    _write_audit(out, cfg)
    manifest = _load_split(args.data, "train")
    rng = np.random.default_rng(cfg.seed + 2)
    crops = make_training_crops(manifest, cfg.prepare.crop_size,
                                cfg.prepare.negatives_per_image, rng)
    write_crops(out / "crops", crops, manifest.provenance, manifest.pixel_spacing_um)
    print(f"prepared {len(crops)} crops into {out / 'crops'}")
    return 0


def _load_crops(crops_dir):
    manifest = ingest(crops_dir)
    return [CropSample(e.image_id, load_image(e.path), e.records, e.image_id, (0, 0))
            for e in manifest.entries]


def cmd_train_det(cfg: RunConfig, args):
    out = Path(args.out)
    _write_audit(out, cfg)
    crops = _load_crops(args.crops)
    path = train_detector(crops, cfg, out, resume=args.resume, device=cfg.device)
    print(f"detector checkpoint written to {path}")
    return 0


def cmd_mine(cfg: RunConfig, args):
    out = Path(args.out)
    _write_audit(out, cfg)
    manifest = _load_split(args.data, "train")
    detector = build_detector(cfg, args.detector, cfg.device)
    fps, (tp, fp, fn) = mine_hard_negatives(detector, manifest, cfg.cascade,
                                            cfg.evaluate.radius, cfg.device)
    with open(out / "fp_centers.csv", "w") as f:
        f.write("image_id,center_x,center_y\n")
        for image_id, (cx, cy) in fps:
            f.write(f"{image_id},{float(cx)!r},{float(cy)!r}\n")
    images = {e.image_id: load_image(e.path) for e in manifest.entries}
    patches = build_training_set(images, {}, fps,
                                 cfg.classifier, np.random.default_rng(cfg.seed + 3))
    hard = [p for p in patches if p.provenance == "detector-fp"]
    save_patch_set(out / "hard_negatives", hard)
    (out / "mine_stats.txt").write_text(f"tp: {tp}\nfp: {fp}\nfn: {fn}\n")
    print(f"mined {len(fps)} hard negatives (detector tp={tp} fp={fp} fn={fn}) into {out}")
    return 0


def _read_fp_centers(path):
    fps = []
    with open(path) as f:
        next(f)
        for line in f:
            image_id, cx, cy = line.strip().split(",")
            fps.append((image_id, (float(cx), float(cy))))
    return fps


def cmd_train_cls(cfg: RunConfig, args):
    out = Path(args.out)
    _write_audit(out, cfg)
    manifest = _load_split(args.data, "train")
    images = {e.image_id: load_image(e.path) for e in manifest.entries}
    fps = _read_fp_centers(Path(args.hard) / "fp_centers.csv") if args.hard else []
    rng = np.random.default_rng(cfg.seed + 4)
    samples = build_training_set(images, manifest.records_by_image(), fps,
                                 cfg.classifier, rng)
    save_patch_set(out / "patch_set", samples)
    path = train_classifier(samples, cfg, out, device=cfg.device)
    n_pos = sum(s.label for s in samples)
    print(f"trained classifier on {n_pos} positives / {len(samples) - n_pos} negatives; "
          f"checkpoint at {path}")
    return 0


def cmd_infer(cfg: RunConfig, args):
    out = Path(args.out)
    _write_audit(out, cfg)
    manifest = _load_split(args.data, args.split)
    detector = build_detector(cfg, args.detector, cfg.device)
    classifier = None
    if args.classifier and not args.no_classifier:
        classifier = build_classifier(cfg, args.classifier, cfg.device)
    detections = {}
    for entry in manifest.entries:
        image = load_image(entry.path)
        dets = run_cascade(image, detector, classifier, cfg.cascade, cfg.device)
        detections[entry.image_id] = dets
        overlay = render_overlay(image, dets)
        overlay_path = out / "overlays" / f"{entry.image_id}.png"
        overlay_path.parent.mkdir(parents=True, exist_ok=True)
        from .data import save_image
        save_image(overlay_path, overlay)
    write_detections(out / "detections.csv", detections)
    total = sum(len(v) for v in detections.values())
    print(f"wrote {total} detections for {len(detections)} images to {out / 'detections.csv'}")
    return 0


def cmd_evaluate(cfg: RunConfig, args):
    out = Path(args.out)
    _write_audit(out, cfg)
    detections = read_detections(args.detections)
    manifest = _load_split(args.data, args.split)
    results, metrics = evaluate_image_sets(detections, manifest.centroids_by_image(),
                                           cfg.evaluate.radius)
    report = format_metrics_report(metrics, cfg.evaluate.radius)
    (out / "metrics.txt").write_text(report)
    write_match_table(out / "matches.csv", results)
    sys.stdout.write(report)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mitodet",
        description="Two-stage mitosis detection workflow (synthesize, train, mine, infer, evaluate)")
    parser.add_argument("--version", action="version", version=f"mitodet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration (defaults used when omitted)")
        p.add_argument("--seed", type=int, help="master RNG seed override")
        p.add_argument("--device", help="torch device override, e.g. cpu or cuda")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--n-train", type=int, help="training image count override")
    p.add_argument("--n-test", type=int, help="test image count override")

    p = sub.add_parser("prepare", help="cut detector training crops from a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset root or split directory")

    p = sub.add_parser("train-det", help="train the detector on prepared crops")
    common(p)
    p.add_argument("--crops", required=True, help="crops directory from 'prepare'")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int, help="epoch count override")

    p = sub.add_parser("mine", help="export detector false positives as hard negatives")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--detector", required=True, help="detector checkpoint")

    p = sub.add_parser("train-cls", help="train the refinement classifier")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--hard", help="mine output directory with fp_centers.csv")
    p.add_argument("--epochs", type=int, help="epoch count override")

    p = sub.add_parser("infer", help="run the cascade and write detections + overlays")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--detector", required=True)
    p.add_argument("--classifier", help="classifier checkpoint (omit for stage one only)")
    p.add_argument("--no-classifier", action="store_true", help="force stage-one-only output")
    p.add_argument("--split", default="test")
    p.add_argument("--score-thr", type=float, dest="score_thr")
    p.add_argument("--accept-thr", type=float, dest="accept_thr")

    p = sub.add_parser("evaluate", help="score a detection table against ground truth")
    common(p)
    p.add_argument("--detections", required=True, help="detection table from 'infer'")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--radius", type=float, help="matching radius override (px)")

    return parser


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train-det": cmd_train_det,
    "mine": cmd_mine,
    "train-cls": cmd_train_cls,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:  # single machine-readable failure line
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
