"""Set matching, the composite loss and the optimiser loop."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .decoder import BlockPrediction
from .scene import GroundTruth, Scene, SuperpointPartition, gt_superpoint_masks, normalize_boxes, partition_superpoints


class CapacityError(ValueError):
    """Fewer proposals than ground-truth instances."""


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class LossConfig:
    beta_mask: float = 1.0
    beta_cls: float = 0.5
    beta_score: float = 0.5
    beta_box: float = 1.0
    beta_box_score: float = 0.5
    eta_mask: float = 0.5
    eta_box: float = 0.5
    lambda_cls: float = 0.5
    lambda_mask: float = 1.0


@dataclass
class MatchResult:
    assignment: list  # [(proposal, gt), ...] sorted by gt
    unmatched_proposals: list
    total_cost: float

    @property
    def proposals(self) -> np.ndarray:
        return np.array([p for p, _ in self.assignment], dtype=np.int64)

    @property
    def gts(self) -> np.ndarray:
        return np.array([g for _, g in self.assignment], dtype=np.int64)


@dataclass
class LossBreakdown:
    cls: float
    bce: float
    dice: float
    mask_score: float
    box: float
    box_score: float
    total: float
    betas: dict = field(default_factory=dict)

    def recompose(self) -> float:
        b = self.betas
        return (
            b["beta_mask"] * (self.bce + self.dice)
            + b["beta_cls"] * self.cls
            + b["beta_score"] * self.mask_score
            + b["beta_box"] * self.box
            + b["beta_box_score"] * self.box_score
        )

    def as_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "betas"}


# ------------------------------------------------------------------ IoU helpers


def mask_iou(a, b) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def box_iou(a, b) -> float:
    """Axis-aligned IoU of ``[min xyz, max xyz]`` boxes; inverted extents count as empty."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    inter = np.prod(np.clip(np.minimum(a[3:], b[3:]) - np.maximum(a[:3], b[:3]), 0.0, None))
    vol_a = np.prod(np.clip(a[3:] - a[:3], 0.0, None))
    vol_b = np.prod(np.clip(b[3:] - b[:3], 0.0, None))
    union = vol_a + vol_b - inter
    return float(inter / union) if union > 0 else 0.0


# --------------------------------------------------------------------- matching


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def dice_cost(p, g) -> np.ndarray:
    """Laplace-smoothed dice cost ``1 - (2 p.g + 1) / (|p| + |g| + 1)`` along the last axis."""
    p, g = np.asarray(p, float), np.asarray(g, float)
    return 1.0 - (2.0 * (p * g).sum(-1) + 1.0) / (p.sum(-1) + g.sum(-1) + 1.0)


def mask_match_cost(pred_logits_row, gt_mask_row) -> float:
    z = np.asarray(pred_logits_row, float)
    g = np.asarray(gt_mask_row, float)
    bce = np.mean(_softplus(z) - z * g)
    return float(bce + dice_cost(nx._sigmoid(z), g))


def pairwise_cost(pred: BlockPrediction, gt_masks, gt_classes, lambda_cls: float = 0.5, lambda_mask: float = 1.0) -> np.ndarray:
    """``C[i, j] = -lambda_cls p_i(c_j) + lambda_mask (BCE + dice)``, shape ``(N_o, N_I)``."""
    z = pred.mask_logits.data
    g = np.asarray(gt_masks, float)
    p = nx._sigmoid(z)
    bce = (_softplus(z).sum(1)[:, None] - z @ g.T) / z.shape[1]
    dice = 1.0 - (2.0 * (p @ g.T) + 1.0) / (p.sum(1)[:, None] + g.sum(1)[None, :] + 1.0)
    cls = pred.class_probs[:, np.asarray(gt_classes, dtype=np.int64)]
    return -lambda_cls * cls + lambda_mask * (bce + dice)


def hungarian(cost) -> MatchResult:
    """Minimum-cost assignment of every column (gt) to a distinct row (proposal).

    Shortest-augmenting-path Kuhn-Munkres with dual potentials, O(N_I^2 N_o).
    Ground truths are inserted in index order and candidate proposals are
    scanned in index order with strict improvement, so ties resolve toward
    lower indices deterministically.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n_prop, n_gt = cost.shape
    if n_prop < n_gt:
        raise CapacityError(f"{n_prop} proposals cannot cover {n_gt} ground-truth instances")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    if n_gt == 0:
        return MatchResult([], list(range(n_prop)), 0.0)
    a = cost.T  # rows = gts, cols = proposals (1-based below, 0 = virtual)
    n, m = n_gt, n_prop
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[col] = row matched to col
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            cur = a[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    pairs = sorted((int(col - 1), int(owner[col] - 1)) for col in range(1, m + 1) if owner[col] > 0)
    pairs.sort(key=lambda pg: pg[1])
    matched = {p for p, _ in pairs}
    total = 0.0
    for p, g in pairs:
        total += cost[p, g]
    return MatchResult(pairs, [p for p in range(n_prop) if p not in matched], float(total))


# ------------------------------------------------------------------------ losses


@dataclass
class TrainTarget:
    """Ground truth prepared for the loss, boxes in unit-cube scene coordinates."""

    masks: np.ndarray  # (N_I, N_h) float
    boxes: np.ndarray  # (N_I, 6)
    classes: np.ndarray  # (N_I,)

    @property
    def n_instances(self) -> int:
        return self.classes.shape[0]


def make_target(scene: Scene, gt: GroundTruth) -> TrainTarget:
    return TrainTarget(gt.masks.astype(np.float64), normalize_boxes(gt.boxes, scene), gt.classes.copy())


def match_block(pred: BlockPrediction, target: TrainTarget, cfg: LossConfig) -> MatchResult:
    if target.n_instances == 0:
        return MatchResult([], list(range(pred.class_logits.shape[0])), 0.0)
    return hungarian(pairwise_cost(pred, target.masks, target.classes, cfg.lambda_cls, cfg.lambda_mask))


def score_targets(pred: BlockPrediction, target: TrainTarget, match: MatchResult):
    """IoU regression targets for matched proposals: (mask IoU, box IoU) arrays."""
    iou_m, iou_b = [], []
    binary = pred.mask_logits.data > 0.0
    for p, g in match.assignment:
        iou_m.append(mask_iou(binary[p], target.masks[g] > 0.5))
        iou_b.append(box_iou(pred.box.data[p], target.boxes[g]))
    return np.array(iou_m), np.array(iou_b)


def _indicator_l2(score: nx.Tensor, idx, iou: np.ndarray, eta: float) -> nx.Tensor:
    keep = iou > eta
    if not keep.any():
        return nx.Tensor(0.0)
    sel = np.asarray(idx)[keep]
    diff = nx.sub(nx.take(score, sel), iou[keep])
    return nx.mul(nx.sum(nx.square(diff)), 1.0 / keep.sum())


def block_terms(pred: BlockPrediction, target: TrainTarget, match: MatchResult, cfg: LossConfig, ious=None) -> dict:
    """The six loss terms of one block as tensors."""
    n_o, n_cls1 = pred.class_logits.shape
    labels = np.full(n_o, n_cls1 - 1, dtype=np.int64)
    prop, gts = match.proposals, match.gts
    labels[prop] = target.classes[gts]
    logp = nx.log_softmax(pred.class_logits)
    cls = nx.mul(nx.sum(nx.take(logp, (np.arange(n_o), labels))), -1.0 / n_o)
    zero = nx.Tensor(0.0)
    if prop.size == 0:
        return {"cls": cls, "bce": zero, "dice": zero, "mask_score": zero, "box": zero, "box_score": zero}

    z = nx.take(pred.mask_logits, prop)
    g = target.masks[gts]
    bce = nx.mean(nx.bce_with_logits(z, g))
    p = nx.sigmoid(z)
    num = nx.add(nx.mul(nx.sum(nx.mul(p, g), axis=1), 2.0), 1.0)
    den = nx.add(nx.sum(p, axis=1), g.sum(axis=1) + 1.0)
    dice = nx.sub(1.0, nx.mean(nx.div(num, den)))

    iou_m, iou_b = score_targets(pred, target, match) if ious is None else ious
    box = nx.mul(nx.sum(nx.absolute(nx.sub(nx.take(pred.box, prop), target.boxes[gts]))), 1.0 / target.n_instances)
    return {
        "cls": cls,
        "bce": bce,
        "dice": dice,
        "mask_score": _indicator_l2(pred.mask_score, prop, iou_m, cfg.eta_mask),
        "box": box,
        "box_score": _indicator_l2(pred.box_score, prop, iou_b, cfg.eta_box),
    }


TERMS = ("cls", "bce", "dice", "mask_score", "box", "box_score")


def effective_betas(cfg: LossConfig, use_box_loss: bool = True, use_box_score: bool = True) -> dict:
    return {
        "beta_mask": cfg.beta_mask,
        "beta_cls": cfg.beta_cls,
        "beta_score": cfg.beta_score,
        "beta_box": cfg.beta_box if use_box_loss else 0.0,
        "beta_box_score": cfg.beta_box_score if use_box_score else 0.0,
    }


_TERM_BETA = {"cls": "beta_cls", "bce": "beta_mask", "dice": "beta_mask", "mask_score": "beta_score", "box": "beta_box", "box_score": "beta_box_score"}


def losses(preds: list, target: TrainTarget, matches: list, cfg: LossConfig, betas: dict | None = None, ious: list | None = None):
    """Block-averaged loss terms and their weighted total.

    Returns ``(total_tensor, LossBreakdown)``. ``ious`` optionally freezes
    the IoU regression targets per block.
    """
    betas = betas or effective_betas(cfg)
    sums = {t: nx.Tensor(0.0) for t in TERMS}
    for k, (pred, match) in enumerate(zip(preds, matches)):
        terms = block_terms(pred, target, match, cfg, None if ious is None else ious[k])
        for t in TERMS:
            sums[t] = nx.add(sums[t], terms[t])
    scale = 1.0 / len(preds)
    avg = {t: nx.mul(sums[t], scale) for t in TERMS}
    total = nx.Tensor(0.0)
    for t in TERMS:
        total = nx.add(total, nx.mul(avg[t], betas[_TERM_BETA[t]]))
    parts = {t: float(avg[t].data) for t in TERMS}
    return total, LossBreakdown(total=float(total.data), betas=dict(betas), **parts)


# --------------------------------------------------------------------- optimiser


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    poly_power: float = 0.9
    total_steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamW:
    """Adam with decoupled weight decay and a polynomial learning-rate decay.

    Weight decay applies to matrices only; vectors (biases, norms) are exempt.
    """

    def __init__(self, params, cfg: OptimizerConfig):
        self.params = list(params)
        self.cfg = cfg
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def lr_at(self, step: int) -> float:
        frac = min(step / max(self.cfg.total_steps, 1), 1.0)
        return self.cfg.lr * (1.0 - frac) ** self.cfg.poly_power

    def step(self) -> float:
        c = self.cfg
        lr = self.lr_at(self.step_count)
        self.step_count += 1
        t = self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.frozen:
                continue
            g = p.grad
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            mhat = m / (1 - c.beta1**t)
            vhat = v / (1 - c.beta2**t)
            if p.data.ndim >= 2:
                p.data -= lr * c.weight_decay * p.data
            p.data -= lr * mhat / (np.sqrt(vhat) + c.eps)
        return lr

    def state(self) -> dict:
        out = {"optim.step": np.array([float(self.step_count)])}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"optim.m.{p.name}"] = m.copy()
            out[f"optim.v.{p.name}"] = v.copy()
        return out


# ------------------------------------------------------------------- train loop


@dataclass
class Sample:
    scene: Scene
    part: SuperpointPartition
    gt: GroundTruth
    target: TrainTarget


def prepare(scene: Scene, cell_low: float = 1.0, cell_high: float = 0.25) -> Sample:
    part = partition_superpoints(scene, cell_low, cell_high)
    gt = gt_superpoint_masks(scene, part)
    return Sample(scene, part, gt, make_target(scene, gt))


_PRED_FIELDS = ("mask_logits", "class_logits", "mask_score", "box", "box_score")


def sample_loss(model, sample: Sample, cfg: LossConfig):
    preds = model(sample.scene, sample.part)
    bad = sorted({f for pr in preds for f in _PRED_FIELDS if not np.all(np.isfinite(getattr(pr, f).data))})
    if bad:
        raise NonFiniteLossError(f"non-finite predictions before matching: {', '.join(bad)}")
    matches = [match_block(p, sample.target, cfg) for p in preds]
    betas = effective_betas(cfg, model.cfg.use_box_loss, model.cfg.use_box_score)
    return losses(preds, sample.target, matches, cfg, betas)


def _check_finite(br: LossBreakdown) -> None:
    bad = [t for t in TERMS + ("total",) if not np.isfinite(getattr(br, t))]
    if bad:
        raise NonFiniteLossError(f"non-finite loss term(s): {', '.join(bad)}")


def train_step(model, batch: list, optimizer: AdamW, cfg: LossConfig) -> tuple:
    """Forward, match, backprop and update on a batch; returns ``(LossBreakdown, lr)``."""
    model.params.zero_grad()
    parts = []
    scale = 1.0 / len(batch)
    for sample in batch:
        total, br = sample_loss(model, sample, cfg)
        _check_finite(br)
        nx.mul(total, scale).backward()
        parts.append(br)
    lr = optimizer.step()
    mean = {t: float(np.mean([getattr(b, t) for b in parts])) for t in TERMS + ("total",)}
    return LossBreakdown(betas=parts[0].betas, **mean), lr


def train(model, samples: list, loss_cfg: LossConfig, opt_cfg: OptimizerConfig, steps: int, batch_size: int = 2, seed: int = 0, log=None, on_step=None) -> list:
    """Run ``steps`` optimiser steps over ``samples``, drawing batches from a seeded shuffle.

    ``log`` (a writable text stream) receives one JSON line per step. The
    records hold no timing so that reruns produce identical logs.
    """
    rng = np.random.default_rng(seed)
    opt = AdamW(model.params.trainable(), opt_cfg)
    history = []
    order = []
    for step in range(steps):
        batch = []
        for _ in range(min(batch_size, len(samples))):
            if not order:
                order = list(rng.permutation(len(samples)))
            batch.append(samples[order.pop()])
        br, lr = train_step(model, batch, opt, loss_cfg)
        history.append(br)
        if log is not None:
            rec = {"step": step + 1, **br.as_dict(), "lr": lr}
            log.write(json.dumps(rec) + "\n")
        if on_step is not None:
            on_step(step + 1, model, opt)
    model.optimizer = opt
    return history
