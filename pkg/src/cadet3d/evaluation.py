"""Detection metrics: 40-point interpolated average precision, per-class
matching, and pseudo-box quality counting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box3D, iou_3d


@dataclass(frozen=True)
class EvalConfig:
    # 3D IoU needed for a true positive, keyed by class id (1=Car, 2=Pedestrian, 3=Cyclist)
    iou_thresholds: tuple[float, ...] = (0.7, 0.5, 0.5)
    recall_positions: int = 40

    def __post_init__(self) -> None:
        if any(not 0.0 < t <= 1.0 for t in self.iou_thresholds):
            raise ValueError("IoU thresholds must lie in (0, 1]")
        if self.recall_positions < 1:
            raise ValueError("need at least one recall position")

    def threshold_for(self, cls_id: int) -> float:
        return self.iou_thresholds[cls_id - 1]


def match_detections(
    det_boxes: list[Box3D],
    det_scores: list[float],
    gt_boxes: list[Box3D],
    iou_thresh: float,
) -> tuple[list[bool], list[tuple[int, int]]]:
    """Greedy same-class matching within one scene.

    Detections are visited in descending confidence (ties keep input order);
    each claims its highest-IoU unmatched ground-truth box if the IoU reaches
    the threshold (ties break toward the lower GT index). Returns TP flags in
    visit order plus (detection index, GT index) pairs.
    """
    order = sorted(range(len(det_boxes)), key=lambda i: (-det_scores[i], i))
    taken = [False] * len(gt_boxes)
    flags: list[bool] = []
    pairs: list[tuple[int, int]] = []
    for di in order:
        best_iou, best_g = 0.0, -1
        for gi, gt in enumerate(gt_boxes):
            if taken[gi]:
                continue
            iou = iou_3d(det_boxes[di], gt)
            if iou > best_iou:
                best_iou, best_g = iou, gi
        if best_g >= 0 and best_iou >= iou_thresh:
            taken[best_g] = True
            flags.append(True)
            pairs.append((di, best_g))
        else:
            flags.append(False)
    return flags, pairs


def ap40(tp_flags: list[bool], n_gt: int, positions: int = 40) -> float | None:
    """Interpolated AP over the recall grid {1/P, ..., P/P}, in [0, 1].

    ``tp_flags`` must be ordered by descending confidence. Undefined (None)
    when there are no ground-truth boxes.
    """
    if n_gt < 0:
        raise ValueError("n_gt must be non-negative")
    if n_gt == 0:
        return None
    if not tp_flags:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    total = 0.0
    for k in range(1, positions + 1):
        r = k / positions
        at_least = precision[recall >= r]
        total += float(at_least.max()) if len(at_least) else 0.0
    return total / positions


@dataclass
class EvalResult:
    ap: dict[int, float | None] = field(default_factory=dict)  # class id -> AP in [0, 1]

    @property
    def map(self) -> float:
        defined = [v for v in self.ap.values() if v is not None]
        return float(np.mean(defined)) if defined else 0.0


def evaluate_scenes(dets_per_scene, scenes, cfg: EvalConfig | None = None) -> EvalResult:
    """Dataset-level per-class AP@positions over per-scene detection lists.

    Detections rank by p_hat * objectness. Matching happens within each scene,
    so flags can be merged across scenes and sorted globally without changing
    which detection claims which box.
    """
    cfg = cfg or EvalConfig()
    result = EvalResult()
    n_classes = len(cfg.iou_thresholds)
    for cls_id in range(1, n_classes + 1):
        scored: list[tuple[float, int, int, bool]] = []
        n_gt = 0
        for si, (dets, scene) in enumerate(zip(dets_per_scene, scenes)):
            gts = [b for b, c in zip(scene.gt_boxes, scene.gt_classes) if c == cls_id]
            n_gt += len(gts)
            sub = [d for d in dets if d.predicted_class == cls_id]
            flags, _ = match_detections(
                [d.box for d in sub],
                [d.confidence for d in sub],
                gts,
                cfg.threshold_for(cls_id),
            )
            confs = sorted((d.confidence for d in sub), reverse=True)
            for di, (conf, flag) in enumerate(zip(confs, flags)):
                scored.append((conf, si, di, flag))
        scored.sort(key=lambda t: (-t[0], t[1], t[2]))
        result.ap[cls_id] = ap40([t[3] for t in scored], n_gt, cfg.recall_positions)
    return result


@dataclass
class PseudoQualityCounts:
    """Incorrect pseudo-box tallies, overall and by assigned level."""

    by_level: dict[str, int] = field(default_factory=dict)

    @property
    def prefilter(self) -> int:
        return sum(self.by_level.values())

    @property
    def postfilter(self) -> int:
        return sum(v for k, v in self.by_level.items() if k in ("high", "ambiguous"))


def pseudo_quality(pseudo_boxes, gt_boxes, gt_classes, cfg: EvalConfig | None = None) -> PseudoQualityCounts:
    """Count pseudo-boxes whose class mismatches their best-IoU ground truth or
    whose IoU misses the class threshold. Expects stratified boxes (``.level``)."""
    cfg = cfg or EvalConfig()
    counts = PseudoQualityCounts(by_level={"high": 0, "ambiguous": 0, "low": 0})
    for pb in pseudo_boxes:
        best_iou, best_cls = 0.0, None
        for gt, gc in zip(gt_boxes, gt_classes):
            iou = iou_3d(pb.box, gt)
            if iou > best_iou:
                best_iou, best_cls = iou, gc
        wrong = best_cls != pb.cls or best_iou < cfg.threshold_for(pb.cls)
        if wrong:
            level = pb.level if pb.level in counts.by_level else "low"
            counts.by_level[level] += 1
    return counts
