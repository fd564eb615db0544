"""Detection metrics: IOU matching, macro P/R, F1, interpolated AP, mAP.

Matching is per image and per class: detections in confidence order each
claim the highest-IOU unmatched ground truth at or above the threshold
(true positive) or count as a false positive; leftover ground truths are
false negatives. True negatives have no meaning in detection and are
reported as "n/a".

AP integrates the precision-recall curve after making the precision
envelope monotone non-increasing, sampling it at the 101 recall points
0.00, 0.01, ..., 1.00. The range metric averages that AP over the ten
IOU thresholds 0.50 to 0.95 in steps of 0.05.

Conventions (documented decisions): 0/0 precision or recall is 0;
classes absent from the ground truth are excluded from macro averages;
per-class precision/recall in the report are counted at IOU 0.50.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .postprocess import Detection, iou

RANGE_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    TN = "n/a"   # detection defines no true-negative population

    def add(self, other: "ClassCounts") -> "ClassCounts":
        return ClassCounts(self.tp + other.tp, self.fp + other.fp,
                           self.fn + other.fn)


def precision_recall(counts: ClassCounts) -> tuple[float, float]:
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    r = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    return p, r


def macro_average(values) -> float:
    vals = list(values)
    return float(np.mean(vals)) if vals else 0.0


def f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def match_image(dets, gts, iou_threshold: float):
    """Greedy per-class matching for one image.

    ``gts`` is a list of (box, class_id). Returns (counts by class,
    flags) where flags[i] says whether dets[i] is a true positive.
    """
    flags = [False] * len(dets)
    counts: dict[int, ClassCounts] = {}
    gt_classes = {}
    for gi, (_, cls) in enumerate(gts):
        gt_classes.setdefault(cls, []).append(gi)
    det_classes = {}
    for di, det in enumerate(dets):
        det_classes.setdefault(det.class_id, []).append(di)
    for cls in sorted(set(gt_classes) | set(det_classes)):
        cc = counts.setdefault(cls, ClassCounts())
        gt_idx = gt_classes.get(cls, [])
        matched: set[int] = set()
        order = sorted(det_classes.get(cls, []),
                       key=lambda di: -dets[di].confidence)
        for di in order:
            best_gi, best_iou = -1, 0.0
            for gi in gt_idx:
                if gi in matched:
                    continue
                v = iou(dets[di].box, gts[gi][0])
                if v > best_iou:
                    best_gi, best_iou = gi, v
            if best_gi >= 0 and best_iou >= iou_threshold:
                matched.add(best_gi)
                flags[di] = True
                cc.tp += 1
            else:
                cc.fp += 1
        cc.fn += len(gt_idx) - len(matched)
    return counts, flags


def _merge_counts(per_image) -> dict[int, ClassCounts]:
    total: dict[int, ClassCounts] = {}
    for counts in per_image:
        for cls, cc in counts.items():
            total[cls] = total.get(cls, ClassCounts()).add(cc)
    return total


def ap_from_ranking(flags, n_gt: int):
    """101-point AP of a confidence-ranked TP/FP sequence.

    Returns (ap, pr_points) where pr_points are the raw (recall,
    precision) samples after each ranked detection.
    """
    if n_gt <= 0:
        return 0.0, []
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0.0, []
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    ap = float(sampled.mean())
    return ap, list(zip(recall.tolist(), precision.tolist()))


def exact_envelope_ap(flags, n_gt: int) -> float:
    """Exact area under the monotone envelope, no recall-grid sampling.

    Reference implementation for self-checks: integrates the step
    envelope between consecutive distinct recall values.
    """
    if n_gt <= 0:
        return 0.0
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    area, prev = 0.0, 0.0
    for r in sorted(set(recall.tolist())):
        idx = int(np.searchsorted(recall, r, side="left"))
        area += (r - prev) * float(envelope[idx])
        prev = r
    return area


@dataclass(frozen=True)
class ClassReport:
    precision: float
    recall: float
    ap50: float
    ap_range: float


@dataclass(frozen=True)
class EvalReport:
    classes: tuple[int, ...]
    per_class: dict[int, ClassReport]
    precision: float
    recall: float
    f1: float
    map50: float
    map_range: float
    pr_curves: dict[int, list[tuple[float, float]]] = field(repr=False,
                                                            default=None)
    tn: str = ClassCounts.TN

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "per_class": {
                str(c): {"precision": r.precision, "recall": r.recall,
                         "ap50": r.ap50, "ap50_95": r.ap_range}
                for c, r in self.per_class.items()},
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "map50": self.map50,
            "map50_95": self.map_range,
            "true_negatives": self.tn,
        }


def _ranked_class_flags(image_ids, dets_by_image, flags_by_image, cls):
    pairs = []
    for img in image_ids:
        for det, flag in zip(dets_by_image.get(img, []),
                             flags_by_image[img]):
            if det.class_id == cls:
                pairs.append((det.confidence, flag))
    pairs.sort(key=lambda t: -t[0])
    return [f for _, f in pairs]


def evaluate(gt_by_image: dict, dets_by_image: dict) -> EvalReport:
    """Full report over a ground-truth and a prediction set.

    ``gt_by_image`` maps image id to a list of ((x1, y1, x2, y2),
    class_id); ``dets_by_image`` maps image id to Detection lists.
    """
    image_ids = sorted(set(gt_by_image) | set(dets_by_image))
    gt_classes = sorted({cls for gts in gt_by_image.values()
                         for _, cls in gts})
    n_gt = {cls: sum(1 for gts in gt_by_image.values()
                     for _, c in gts if c == cls) for cls in gt_classes}

    ap_by_threshold: dict[float, dict[int, float]] = {}
    counts50: dict[int, ClassCounts] = {}
    curves: dict[int, list[tuple[float, float]]] = {}
    for thr in RANGE_THRESHOLDS:
        per_image_counts = []
        flags_by_image = {}
        for img in image_ids:
            counts, flags = match_image(dets_by_image.get(img, []),
                                        gt_by_image.get(img, []), thr)
            per_image_counts.append(counts)
            flags_by_image[img] = flags
        aps = {}
        for cls in gt_classes:
            ranked = _ranked_class_flags(image_ids, dets_by_image,
                                         flags_by_image, cls)
            ap, points = ap_from_ranking(ranked, n_gt[cls])
            aps[cls] = ap
            if thr == 0.5:
                curves[cls] = points
        ap_by_threshold[thr] = aps
        if thr == 0.5:
            counts50 = _merge_counts(per_image_counts)

    per_class = {}
    for cls in gt_classes:
        p, r = precision_recall(counts50.get(cls, ClassCounts()))
        ap50 = ap_by_threshold[0.5][cls]
        ap_range = macro_average(ap_by_threshold[t][cls]
                                 for t in RANGE_THRESHOLDS)
        per_class[cls] = ClassReport(p, r, ap50, ap_range)
    precision = macro_average(r.precision for r in per_class.values())
    recall = macro_average(r.recall for r in per_class.values())
    return EvalReport(
        classes=tuple(gt_classes), per_class=per_class,
        precision=precision, recall=recall, f1=f1(precision, recall),
        map50=macro_average(r.ap50 for r in per_class.values()),
        map_range=macro_average(r.ap_range for r in per_class.values()),
        pr_curves=curves)
