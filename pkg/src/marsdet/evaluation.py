"""
Per-class average precision and mAP at a single IoU threshold.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch

from .boxes import iou, iou_matrix
from .data import CLASSES, DatasetManifest, DetectionDataset
from .detector import Detection, decode_predictions, non_max_suppression
from .errors import ConfigError, DataError

__all__ = [
    "iou", "EvalThresholds", "EvalResult", "match_detections", "average_precision",
    "compute_ap", "compute_map", "evaluate", "evaluate_detections",
]

INTERPOLATIONS = ("all-point", "11-point")


@dataclass(frozen=True)
class EvalThresholds:
    conf_threshold: float = 0.05
    nms_iou: float = 0.45
    match_iou: float = 0.5
    interpolation: str = "all-point"

    def violations(self):
        out = []
        if not 0 <= self.conf_threshold <= 1:
            out.append("eval.conf_threshold must lie in [0, 1]")
        if not 0 < self.nms_iou < 1:
            out.append("eval.nms_iou must lie in (0, 1)")
        if not 0 < self.match_iou <= 1:
            out.append("eval.match_iou must lie in (0, 1]")
        if self.interpolation not in INTERPOLATIONS:
            out.append(f"eval.interpolation must be one of {INTERPOLATIONS}")
        return out


@dataclass
class EvalResult:
    per_class_ap: Dict[str, float]
    map: float
    counts: Dict[str, Dict[str, int]]
    interpolation: str = "all-point"
    records: List[dict] = field(default_factory=list)

    def to_dict(self, with_records=False):
        d = {"per_class_ap": self.per_class_ap, "map": self.map, "counts": self.counts,
             "interpolation": self.interpolation}
        if with_records:
            d["records"] = self.records
        return d


def _det_key(d):
    return (-d.confidence, str(d.image_id), tuple(d.box))


def match_detections(detections, ground_truth, iou_threshold=0.5):
    """Greedy matching of one class's detections against its ground truth.

    Detections are ranked by confidence (ties: image id, then box). Each is
    paired with its best-IoU ground truth box in its image and counts as a
    true positive iff that IoU reaches ``iou_threshold`` and the box is not
    already claimed, so a second hit on a claimed box is a false positive.
    Returns (ranked detections, bool tp flags).
    """
    ranked = sorted(detections, key=_det_key)
    gt = {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in ground_truth.items()}
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gt.items()}
    tp = np.zeros(len(ranked), dtype=bool)
    for n, d in enumerate(ranked):
        boxes = gt.get(d.image_id)
        if boxes is None or not len(boxes):
            continue
        ious = iou_matrix(np.asarray(d.box)[None], boxes)[0]
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold and not used[d.image_id][best]:
            tp[n] = True
            used[d.image_id][best] = True
    return ranked, tp


def average_precision(tp, num_gt, interpolation="all-point"):
    """Area under the precision/recall curve of a ranked tp/fp list."""
    if interpolation not in INTERPOLATIONS:
        raise ConfigError(f"unknown interpolation {interpolation!r}")
    tp = np.asarray(tp, dtype=bool)
    if num_gt == 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    rec = ctp / num_gt
    prec = ctp / (ctp + cfp)
    if interpolation == "11-point":
        ap = 0.0
        for t in np.linspace(0, 1, 11):
            p = prec[rec >= t]
            ap += (p.max() if p.size else 0.0) / 11
        return float(ap)
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def compute_ap(detections, ground_truth, iou_threshold=0.5, interpolation="all-point"):
    """AP for one class. ``ground_truth`` maps image id -> (N, 4) boxes."""
    num_gt = sum(len(np.asarray(v).reshape(-1, 4)) for v in ground_truth.values())
    _, tp = match_detections(detections, ground_truth, iou_threshold)
    return average_precision(tp, num_gt, interpolation)


def compute_map(per_class_ap, classes=CLASSES):
    """Arithmetic mean over the fixed class list; missing classes count as 0."""
    return float(sum(per_class_ap.get(c, 0.0) for c in classes) / len(classes))


def evaluate_detections(detections_by_image, manifest: DatasetManifest, thresholds=EvalThresholds()):
    """Score detections (original-image pixels) against a manifest's ground truth."""
    classes = list(manifest.classes)
    gt = {c: {} for c in classes}
    for r in manifest.records:
        for c in classes:
            gt[c][r.image_id] = np.array([b for name, b in r.objects if name == c], dtype=np.float64).reshape(-1, 4)
    dets = {c: [] for c in classes}
    for image_id, ds in detections_by_image.items():
        for d in ds:
            if not 0 <= d.class_id < len(classes):
                raise DataError(f"detection class id {d.class_id} outside the {len(classes)}-class list")
            dets[classes[d.class_id]].append(Detection(d.box, d.class_id, d.confidence, image_id))
    per_class, counts, records = {}, {}, []
    for c in classes:
        num_gt = sum(len(v) for v in gt[c].values())
        ranked, tp = match_detections(dets[c], gt[c], thresholds.match_iou)
        per_class[c] = average_precision(tp, num_gt, thresholds.interpolation)
        counts[c] = {"num_gt": int(num_gt), "num_det": len(ranked), "tp": int(tp.sum()), "fp": int((~tp).sum())}
        records += [{
            "image_id": d.image_id, "class": c, "confidence": d.confidence,
            "box": [float(v) for v in d.box], "match": "tp" if t else "fp",
        } for d, t in zip(ranked, tp)]
    return EvalResult(per_class, compute_map(per_class, classes), counts, thresholds.interpolation, records)


@torch.no_grad()
def predict(model, dataset: DetectionDataset, thresholds=EvalThresholds(), batch_size=8):
    """Run inference + decode + NMS; detections mapped back to original pixels."""
    model.eval()
    out = {}
    for start in range(0, len(dataset), batch_size):
        items = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
        raw, _ = model(torch.stack([it["image"] for it in items]))
        decoded = decode_predictions(raw, model.cfg, thresholds.conf_threshold)
        for it, dets in zip(items, decoded):
            out[it["image_id"]] = to_original(non_max_suppression(dets, thresholds.nms_iou), it["transform"], it["record"])
    return out


def to_original(dets, transform, record):
    """Map canvas-space detections through the inverse letterbox, clipped to the image."""
    if not dets:
        return []
    boxes = transform.invert([d.box for d in dets])
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, record.width)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, record.height)
    return [Detection(tuple(float(v) for v in b), d.class_id, d.confidence, record.image_id) for d, b in zip(dets, boxes)]


def evaluate(model, data, thresholds=EvalThresholds(), batch_size=8):
    """Inference + decode + NMS + per-class AP over a manifest or DetectionDataset."""
    dataset = data if isinstance(data, DetectionDataset) else DetectionDataset(data, model.cfg.input_size)
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty manifest")
    if model.cfg.num_classes != len(dataset.manifest.classes):
        raise DataError(
            f"model predicts {model.cfg.num_classes} classes, manifest lists {len(dataset.manifest.classes)}"
        )
    dets = predict(model, dataset, thresholds, batch_size)
    return evaluate_detections(dets, dataset.manifest, thresholds)


def oracle_detections(manifest: DatasetManifest):
    """Ground truth replayed as confidence-1 detections."""
    classes = list(manifest.classes)
    return {
        r.image_id: [Detection(tuple(b), classes.index(c), 1.0, r.image_id) for c, b in r.objects]
        for r in manifest.records
    }
