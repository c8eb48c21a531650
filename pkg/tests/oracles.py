"""Independent reference implementations used by the tests.

Each one is written with plain loops (or exact rationals) and shares no
code path with the package it checks.
"""

import itertools
from fractions import Fraction

import numpy as np

from twinattn.inference import AP_THRESHOLDS


def loop_relative_positions(box_pred, scene_box):
    out = np.empty((box_pred.shape[0], scene_box.shape[0], 6))
    for i in range(box_pred.shape[0]):
        for j in range(scene_box.shape[0]):
            for c in range(6):
                out[i, j, c] = box_pred[i, c] - scene_box[j, c]
    return out


def loop_mask_logits(box_pred, scene_box, scene_sem, x, weight, bias):
    n_o, n_h, width = box_pred.shape[0], scene_box.shape[0], x.shape[1]
    out = np.zeros((n_o, n_h))
    for i in range(n_o):
        for j in range(n_h):
            feat = [box_pred[i, c] - scene_box[j, c] for c in range(6)] + list(scene_sem[j])
            acc = 0.0
            for d in range(width):
                e = bias[d]
                for c in range(width):
                    e += feat[c] * weight[c, d]
                acc += e * x[i, d]
            out[i, j] = acc
    return out


def brute_force(cost):
    n_o, n_i = cost.shape
    best = np.inf
    for perm in itertools.permutations(range(n_o), n_i):
        total = 0.0
        for g, p in enumerate(perm):
            total += cost[p, g]
        best = min(best, total)
    return best


def reference_ap(preds, gts, cls, thr):
    """Exhaustive exact AP for one class: every rank prefix, rational arithmetic."""
    items = sorted(
        ((p.confidence, s, j) for s, ps in enumerate(preds) for j, p in enumerate(ps) if p.class_id == cls),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    n_gt = sum(int(c == cls) for g in gts for c in g.classes)
    taken = set()
    hits = []
    for _, s, j in items:
        pm = preds[s][j].point_mask
        best, best_k = Fraction(-1), None
        for k in range(len(gts[s].classes)):
            if gts[s].classes[k] != cls or (s, k) in taken:
                continue
            gm = gts[s].masks[k]
            inter = sum(1 for a, b in zip(pm, gm) if a and b)
            union = sum(1 for a, b in zip(pm, gm) if a or b)
            iou = Fraction(inter, union) if union else Fraction(0)
            if iou > best:
                best, best_k = iou, k
        hit = best_k is not None and best >= Fraction(thr).limit_denominator(1000)
        if hit:
            taken.add((s, best_k))
        hits.append(hit)
    recalls, precisions = [], []
    tp = 0
    for rank, h in enumerate(hits, 1):
        tp += h
        recalls.append(Fraction(tp, n_gt))
        precisions.append(Fraction(tp, rank))
    ap, prev = Fraction(0), Fraction(0)
    for k, r in enumerate(recalls):
        if r > prev:
            ap += (r - prev) * max(precisions[k:])
            prev = r
    return ap


def reference_report(preds, gts, n_classes):
    classes = [c for c in range(n_classes) if any(c in g.classes for g in gts)]

    def class_mean(t):
        return sum(reference_ap(preds, gts, c, t) for c in classes) / len(classes)

    m_ap = sum(class_mean(t) for t in AP_THRESHOLDS) / len(AP_THRESHOLDS)
    return m_ap, class_mean(0.5), class_mean(0.25)
