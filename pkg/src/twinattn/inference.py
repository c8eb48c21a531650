"""Confidence ranking, point-level expansion and mAP evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .decoder import BlockPrediction
from .scene import Scene, SuperpointPartition

AP_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


@dataclass
class InstancePrediction:
    point_mask: np.ndarray  # (N,) bool
    superpoint_mask: np.ndarray  # (N_h,) bool
    class_id: int
    confidence: float
    factors: tuple = ()  # (class prob, box score, mask score, superpoint mask score)
    proposal: int = -1


@dataclass
class PointInstances:
    """Point-level ground truth of one scene."""

    masks: np.ndarray  # (N_I, N) bool
    classes: np.ndarray  # (N_I,)


@dataclass
class EvalReport:
    mAP: float
    mAP50: float
    mAP25: float
    per_class_ap: dict = field(default_factory=dict)  # class -> {threshold: AP}
    counts: dict = field(default_factory=dict)  # class -> {threshold: (tp, fp, fn)}
    class_names: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"mAP": self.mAP, "mAP50": self.mAP50, "mAP25": self.mAP25}

    def to_text(self) -> str:
        """Per-class table: one row per class with AP, AP50 and AP25 columns."""
        lines = [f"{'class':<12}{'AP':>8}{'AP50':>8}{'AP25':>8}{'TP50':>6}{'FP50':>6}{'FN50':>6}"]
        for c in sorted(self.per_class_ap):
            ap = self.per_class_ap[c]
            mean_ap = np.mean([ap[t] for t in AP_THRESHOLDS])
            tp, fp, fn = self.counts[c][0.5]
            name = self.class_names.get(c, f"class_{c}")
            lines.append(f"{name:<12}{100 * mean_ap:8.1f}{100 * ap[0.5]:8.1f}{100 * ap[0.25]:8.1f}{tp:6d}{fp:6d}{fn:6d}")
        lines.append(f"{'average':<12}{100 * self.mAP:8.1f}{100 * self.mAP50:8.1f}{100 * self.mAP25:8.1f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {
            **self.summary(),
            "per_class_ap": {str(c): {f"{t:.2f}": v for t, v in ap.items()} for c, ap in sorted(self.per_class_ap.items())},
            "counts": {str(c): {f"{t:.2f}": list(v) for t, v in cnt.items()} for c, cnt in sorted(self.counts.items())},
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# ------------------------------------------------------------------ confidence


def superpoint_mask_score(mask_probs_row) -> float:
    """Mean of the probabilities above 0.5; 0 when none are."""
    p = np.asarray(mask_probs_row, dtype=np.float64)
    hit = p > 0.5
    return float(p[hit].mean()) if hit.any() else 0.0


def confidence(pred: BlockPrediction, i: int, use_box_score: bool = True) -> tuple:
    """``(class_id, score, factors)`` for proposal ``i``.

    The class factor is the largest foreground probability, even when the
    no-instance column dominates.
    """
    probs = pred.class_probs[i, :-1]
    class_id = int(np.argmax(probs))
    c = float(probs[class_id])
    b = float(np.clip(pred.box_score.data[i], 0.0, 1.0)) if use_box_score else 1.0
    m = float(np.clip(pred.mask_score.data[i], 0.0, 1.0))
    a = superpoint_mask_score(pred.mask_probs[i])
    return class_id, c * b * m * a, (c, b, m, a)


def expand(superpoint_mask: np.ndarray, part: SuperpointPartition) -> np.ndarray:
    return np.asarray(superpoint_mask, bool)[part.assign_high]


def select_instances(pred: BlockPrediction, k: int, part: SuperpointPartition, use_box_score: bool = True) -> list:
    """Top-``k`` proposals by confidence, masks binarised at 0.5; no NMS."""
    if k < 1:
        raise ValueError("k must be at least 1")
    binary = pred.mask_probs > 0.5
    out = []
    for i in range(binary.shape[0]):
        cid, score, factors = confidence(pred, i, use_box_score)
        out.append(InstancePrediction(expand(binary[i], part), binary[i].copy(), cid, score, factors, i))
    out.sort(key=lambda ip: (-ip.confidence, ip.proposal))
    return out[:k]


def point_instances(scene: Scene) -> PointInstances:
    ids = np.arange(scene.n_instances)
    return PointInstances(scene.instance_of[None, :] == ids[:, None], scene.class_of_instance.copy())


# ------------------------------------------------------------------ evaluation


def point_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def average_precision(is_tp: np.ndarray, n_positive: int) -> float:
    """Area under the precision envelope (all-point interpolation)."""
    if n_positive == 0:
        return float("nan")
    if is_tp.size == 0:
        return 0.0
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    recall = tp / n_positive
    precision = tp / (tp + fp)
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    step = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[step + 1] - r[step]) * p[step + 1]))


def _class_curve(preds: list, gts: list, cls: int, thr: float):
    """Greedy confidence-ordered matching for one class; returns (is_tp, n_gt)."""
    ranked = []
    for s, scene_preds in enumerate(preds):
        for j, ip in enumerate(scene_preds):
            if ip.class_id == cls:
                ranked.append((-ip.confidence, s, j))
    ranked.sort()
    gt_idx = [np.nonzero(g.classes == cls)[0] for g in gts]
    used = [np.zeros(len(ix), bool) for ix in gt_idx]
    n_gt = sum(len(ix) for ix in gt_idx)
    flags = []
    for _, s, j in ranked:
        mask = preds[s][j].point_mask
        best, best_k = -1.0, -1
        for k, g in enumerate(gt_idx[s]):
            if used[s][k]:
                continue
            iou = point_iou(mask, gts[s].masks[g])
            if iou > best:
                best, best_k = iou, k
        hit = best_k >= 0 and best >= thr
        if hit:
            used[s][best_k] = True
        flags.append(hit)
    return np.array(flags, dtype=bool), n_gt


def evaluate(preds: list, gts: list, n_classes: int, thresholds=AP_THRESHOLDS, class_names: dict | None = None) -> EvalReport:
    """mAP over ``thresholds`` plus AP at 0.50 and 0.25.

    Args:
        preds: per scene, a list of :class:`InstancePrediction`.
        gts: per scene, a :class:`PointInstances`.
        n_classes: number of foreground classes.

    Classes without any ground truth are left out of every mean.
    """
    if len(preds) != len(gts):
        raise ValueError("need one prediction list per ground-truth scene")
    all_thr = sorted(set(thresholds) | {0.25, 0.5}, reverse=True)
    per_class, counts = {}, {}
    for c in range(n_classes):
        if sum(int((g.classes == c).sum()) for g in gts) == 0:
            continue
        per_class[c], counts[c] = {}, {}
        for t in all_thr:
            flags, n_gt = _class_curve(preds, gts, c, t)
            per_class[c][t] = average_precision(flags, n_gt)
            tp = int(flags.sum())
            counts[c][t] = (tp, int(flags.size - tp), n_gt - tp)
    if not per_class:
        return EvalReport(0.0, 0.0, 0.0, per_class, counts, class_names or {})

    # fsum keeps the means correctly rounded regardless of class order
    def class_mean(t):
        return math.fsum(ap[t] for ap in per_class.values()) / len(per_class)

    m_ap = math.fsum(class_mean(t) for t in thresholds) / len(thresholds)
    return EvalReport(m_ap, class_mean(0.5), class_mean(0.25), per_class, counts, class_names or {})


def infer(model, scene: Scene, part: SuperpointPartition, k: int = 16) -> list:
    """Run ``model`` on one scene and keep its top-``k`` final-block proposals."""
    final = model(scene, part)[-1]
    return select_instances(final, k, part, model.cfg.use_box_score)


def evaluate_model(model, samples: list, k: int = 16) -> EvalReport:
    preds = [infer(model, s.scene, s.part, k) for s in samples]
    return evaluate(preds, [point_instances(s.scene) for s in samples], model.cfg.n_classes)
