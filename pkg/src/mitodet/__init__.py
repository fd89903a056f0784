"""Two-stage mitosis nucleus detection.

Stage one is a recall-oriented detector (residual backbone with weight
standardization, group normalization and block attention, a feature pyramid,
and a hybrid anchor-based / anchor-free head). Stage two re-scores each
candidate with a patch classifier trained on oversampled positives and mined
hard negatives. Evaluation counts a detection as correct when its center
lies within 20 px of a ground-truth centroid.
"""

__version__ = "0.1.0"

from .attention import CBAM, ChannelGate, SpatialGate
from .backbone import BackboneConfig, FeaturePyramid, PyramidBackbone, ResNetBackbone
from .cascade import (CascadeConfig, detect_tiled, extract_patch, read_detections,
                      render_overlay, run_cascade, write_detections)
from .classifier import (AugmentParams, ClassifierConfig, PatchClassifier, PatchSample,
                         apply_augment, augment, build_training_set)
from .data import (AnnotationRecord, DatasetManifest, ManifestEntry, SynthSpec, ingest,
                   ingest_dataset, make_training_crops, render_synthetic_image,
                   synthesize_dataset)
from .evaluation import (MatchResult, Metrics, compute_metrics, evaluate_image_sets,
                         match_detections, metrics_from_counts)
from .head import (Detection, DetectionHead, Detector, HeadConfig, anchor_grid,
                   assign_anchors, box_iou, decode_anchor_free, decode_boxes,
                   encode_boxes, focal_loss, generate_anchors, iou_loss, nms,
                   postprocess, select_feature_level)
from .normalization import (GroupNorm2d, WSConv2d, default_group_count, group_normalize,
                            weight_standardize)
