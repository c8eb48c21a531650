"""Synthetic scenes, two-scale superpoints, ground truth and superpoint pooling.

Scenes are rooms with a floor and two walls (background, label ``-1``) and a
handful of object instances sampled on primitive surfaces. The floor and walls
sit just below the zero plane of their axis so that grid cells anchored at the
origin never mix background with objects resting on the floor.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx

SCENE_FORMAT = "twinattn-scene/1"
PRIMITIVES = ("box", "sphere", "plane")

# one base colour per class (cycled when there are more classes)
_PALETTE = np.array(
    [
        [0.85, 0.20, 0.15],
        [0.15, 0.55, 0.85],
        [0.20, 0.75, 0.30],
        [0.90, 0.75, 0.15],
        [0.60, 0.25, 0.75],
        [0.95, 0.50, 0.70],
        [0.30, 0.30, 0.30],
        [0.10, 0.80, 0.75],
    ]
)


class SceneConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    n_points: int = 4096
    min_instances: int = 3
    max_instances: int = 8
    n_classes: int = 6
    room: tuple = (4.0, 4.0, 2.0)
    background_fraction: float = 0.25
    min_points_per_instance: int = 48
    primitive_mix: tuple = (1.0, 1.0, 1.0)
    min_gap: float = 0.35
    wall_offset: float = 0.06
    position_noise: float = 0.004
    color_noise: float = 0.04

    def validate(self) -> None:
        if self.n_points < 1:
            raise SceneConfigError("n_points must be positive")
        if not 0 <= self.min_instances <= self.max_instances:
            raise SceneConfigError("need 0 <= min_instances <= max_instances")
        if self.n_classes < 1:
            raise SceneConfigError("n_classes must be positive")
        if not 0.0 <= self.background_fraction < 1.0:
            raise SceneConfigError("background_fraction must lie in [0, 1)")
        if len(self.primitive_mix) != len(PRIMITIVES) or min(self.primitive_mix) < 0 or max(self.primitive_mix) <= 0:
            raise SceneConfigError(f"primitive_mix needs {len(PRIMITIVES)} non-negative weights")
        n_bg = int(round(self.n_points * self.background_fraction))
        if self.max_instances * self.min_points_per_instance > self.n_points - n_bg:
            raise SceneConfigError(
                f"{self.max_instances} instances x {self.min_points_per_instance} points "
                f"exceed the {self.n_points - n_bg} non-background points"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["room"] = list(self.room)
        d["primitive_mix"] = list(self.primitive_mix)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        d["room"] = tuple(d.get("room", cls.room))
        d["primitive_mix"] = tuple(d.get("primitive_mix", cls.primitive_mix))
        return cls(**d)


@dataclass
class Scene:
    points: np.ndarray  # (N, 6): x, y, z, r, g, b
    instance_of: np.ndarray  # (N,) in [0, N_I) or -1
    class_of_instance: np.ndarray  # (N_I,)
    seed: int
    config: dict = field(default_factory=dict)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_instances(self) -> int:
        return self.class_of_instance.shape[0]

    def check(self) -> None:
        n = self.points.shape[0]
        if n < 1 or self.points.shape != (n, 6) or self.instance_of.shape != (n,):
            raise ValueError("malformed scene arrays")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("non-finite coordinates")
        if np.any(self.points[:, 3:] < 0) or np.any(self.points[:, 3:] > 1):
            raise ValueError("colours must lie in [0, 1]")
        counts = np.bincount(self.instance_of[self.instance_of >= 0], minlength=self.n_instances)
        if counts.shape[0] != self.n_instances or np.any(counts == 0):
            raise ValueError("every instance must own at least one point")


@dataclass
class SuperpointPartition:
    assign_low: np.ndarray
    assign_high: np.ndarray
    n_low: int
    n_high: int


@dataclass
class GroundTruth:
    masks: np.ndarray  # (N_I, N_h) bool
    boxes: np.ndarray  # (N_I, 6) min xyz, max xyz in scene coordinates
    classes: np.ndarray  # (N_I,)
    empty: np.ndarray  # (N_I,) bool, instance lost every superpoint to voting
    fidelity: float  # fraction of points whose projected label is correct
    superpoint_label: np.ndarray  # (N_h,) instance id or -1

    @property
    def n_instances(self) -> int:
        return self.classes.shape[0]


# ------------------------------------------------------------------ generation


def _allocate(total: int, weights: np.ndarray, minimum: int) -> np.ndarray:
    """Split ``total`` into integer shares >= ``minimum``, proportional to weights."""
    k = weights.shape[0]
    spare = total - k * minimum
    share = spare * weights / weights.sum()
    base = np.floor(share).astype(int)
    left = spare - base.sum()
    order = np.argsort(-(share - base), kind="stable")
    base[order[:left]] += 1
    return base + minimum


def _sample_box(rng, n, size):
    sx, sy, sz = size
    areas = np.array([sx * sy, sx * sz, sx * sz, sy * sz, sy * sz])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    pts = np.empty((n, 3))
    # top, y-, y+, x-, x+ (no bottom face)
    faces = [
        lambda: np.stack([u * sx, v * sy, np.full(n, sz)], 1),
        lambda: np.stack([u * sx, np.zeros(n), v * sz], 1),
        lambda: np.stack([u * sx, np.full(n, sy), v * sz], 1),
        lambda: np.stack([np.zeros(n), u * sy, v * sz], 1),
        lambda: np.stack([np.full(n, sx), u * sy, v * sz], 1),
    ]
    for f, make in enumerate(faces):
        sel = face == f
        pts[sel] = make()[sel]
    return pts


def _sample_sphere(rng, n, radius):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return radius * (d + 1.0)


def _sample_plane(rng, n, size, height):
    return np.stack([rng.random(n) * size[0], rng.random(n) * size[1], np.full(n, height)], 1)


def _primitive_shape(kind: str, rng) -> dict:
    if kind == "box":
        return {"extent": rng.uniform([0.4, 0.4, 0.3], [1.0, 1.0, 0.9])}
    if kind == "sphere":
        r = rng.uniform(0.2, 0.45)
        return {"extent": np.array([2 * r, 2 * r, 2 * r]), "radius": r}
    xy = rng.uniform([0.6, 0.5], [1.2, 1.0])
    h = rng.uniform(0.55, 0.95)
    return {"extent": np.array([xy[0], xy[1], h]), "height": h}


def _surface_area(kind: str, shape: dict) -> float:
    sx, sy, sz = shape["extent"]
    if kind == "box":
        return sx * sy + 2 * sz * (sx + sy)
    if kind == "sphere":
        return 4 * np.pi * shape["radius"] ** 2
    return sx * sy


def _place(rng, footprints, room, gap, tries: int = 200):
    """Rejection-sample non-overlapping floor positions; returns (x, y) corners or None."""
    placed = []
    margin = gap
    for w, d in footprints:
        for _ in range(tries):
            x = rng.uniform(margin, room[0] - margin - w)
            y = rng.uniform(margin, room[1] - margin - d)
            ok = all(
                x + w + gap <= px or px + pw + gap <= x or y + d + gap <= py or py + pd + gap <= y
                for px, py, pw, pd in placed
            )
            if ok:
                placed.append((x, y, w, d))
                break
        else:
            return None
    return [(p[0], p[1]) for p in placed]


def class_primitive(class_id: int) -> str:
    """Each class has a fixed primitive kind so the label is learnable from geometry."""
    return PRIMITIVES[class_id % len(PRIMITIVES)]


def generate_scene(cfg: SceneConfig | None = None, seed: int = 0) -> Scene:
    """Build a deterministic synthetic room for ``(cfg, seed)``."""
    cfg = cfg or SceneConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    room = np.asarray(cfg.room, dtype=float)
    mix = np.asarray(cfg.primitive_mix, dtype=float)

    # classes whose primitive kind has zero weight in the mix are never drawn
    class_w = np.array([mix[PRIMITIVES.index(class_primitive(c))] for c in range(cfg.n_classes)])
    if class_w.sum() <= 0:
        raise SceneConfigError("primitive_mix excludes every class")
    class_w = class_w / class_w.sum()

    for _attempt in range(50):
        n_inst = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
        classes = rng.choice(cfg.n_classes, size=n_inst, p=class_w)
        kinds = [class_primitive(int(c)) for c in classes]
        shapes = [_primitive_shape(k, rng) for k in kinds]
        spots = _place(rng, [s["extent"][:2] for s in shapes], room, cfg.min_gap)
        if spots is not None:
            break
    else:
        raise SceneConfigError("could not place instances without overlap; enlarge the room")

    n_bg = int(round(cfg.n_points * cfg.background_fraction))
    if n_inst == 0:
        n_bg = cfg.n_points
    areas = np.array([_surface_area(k, s) for k, s in zip(kinds, shapes)])
    counts = _allocate(cfg.n_points - n_bg, areas, cfg.min_points_per_instance) if n_inst else np.zeros(0, int)

    xyz, rgb, labels = [], [], []
    for i, (kind, shape, (x0, y0), n) in enumerate(zip(kinds, shapes, spots, counts)):
        if kind == "box":
            p = _sample_box(rng, n, shape["extent"])
        elif kind == "sphere":
            p = _sample_sphere(rng, n, shape["radius"])
        else:
            p = _sample_plane(rng, n, shape["extent"][:2], shape["height"])
        p = p + np.array([x0, y0, 0.0])
        base = _PALETTE[classes[i] % len(_PALETTE)] + rng.normal(0, 0.04, size=3)
        xyz.append(p)
        rgb.append(base + rng.normal(0, cfg.color_noise, size=(n, 3)))
        labels.append(np.full(n, i))

    xyz.append(_sample_shell(rng, n_bg, room, cfg.wall_offset))
    rgb.append(0.55 + rng.normal(0, cfg.color_noise, size=(n_bg, 3)))
    labels.append(np.full(n_bg, -1))

    xyz = np.concatenate(xyz) + rng.normal(0, cfg.position_noise, size=(cfg.n_points, 3))
    # keep objects on the non-negative side of z so they never share a cell with the floor
    obj = np.concatenate(labels) >= 0
    xyz[obj, 2] = np.abs(xyz[obj, 2])
    points = np.concatenate([xyz, np.clip(np.concatenate(rgb), 0.0, 1.0)], axis=1)
    scene = Scene(points, np.concatenate(labels).astype(np.int64), classes.astype(np.int64), int(seed), cfg.to_dict())
    scene.check()
    return scene


def _sample_shell(rng, n, room, offset):
    """Floor plus the x=0 and y=0 walls, pushed ``offset`` below zero."""
    w, d, h = room
    areas = np.array([w * d, d * h, w * h])
    which = rng.choice(3, size=n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    floor = np.stack([u * w, v * d, np.full(n, -offset)], 1)
    wall_x = np.stack([np.full(n, -offset), u * d, v * h], 1)
    wall_y = np.stack([u * w, np.full(n, -offset), v * h], 1)
    return np.where(which[:, None] == 0, floor, np.where(which[:, None] == 1, wall_x, wall_y))


# ------------------------------------------------------------------ superpoints


def partition_superpoints(scene: Scene, cell_low: float = 1.0, cell_high: float = 0.25) -> SuperpointPartition:
    """Grid-cluster points at two resolutions.

    Fine cells come from ``floor(xyz / cell_high)``. A point's coarse cell is
    the ``cell_low`` cell containing the centre of its fine cell, so every
    fine superpoint nests inside exactly one coarse superpoint even when the
    two cell sizes are not integer multiples.
    """
    if not cell_low > cell_high > 0:
        raise ValueError("need cell_low > cell_high > 0")
    xyz = scene.points[:, :3]
    hi_cells = np.floor(xyz / cell_high).astype(np.int64)
    lo_cells = np.floor((hi_cells + 0.5) * cell_high / cell_low).astype(np.int64)
    _, assign_high = np.unique(hi_cells, axis=0, return_inverse=True)
    _, assign_low = np.unique(lo_cells, axis=0, return_inverse=True)
    assign_high = assign_high.reshape(-1)
    assign_low = assign_low.reshape(-1)
    return SuperpointPartition(assign_low, assign_high, int(assign_low.max()) + 1, int(assign_high.max()) + 1)


def gt_superpoint_masks(scene: Scene, part: SuperpointPartition) -> GroundTruth:
    """Project point labels onto fine superpoints by strict majority.

    Ties and background majorities leave the superpoint unassigned. Boxes are
    taken from the raw instance points.
    """
    n_inst = scene.n_instances
    labels = scene.instance_of + 1  # 0 = background
    votes = np.zeros((part.n_high, n_inst + 1), dtype=np.int64)
    np.add.at(votes, (part.assign_high, labels), 1)
    size = votes.sum(axis=1)
    winner = votes.argmax(axis=1)
    strict = 2 * votes[np.arange(part.n_high), winner] > size
    sp_label = np.where(strict & (winner > 0), winner - 1, -1)

    masks = np.zeros((n_inst, part.n_high), dtype=bool)
    assigned = sp_label >= 0
    masks[sp_label[assigned], np.nonzero(assigned)[0]] = True

    boxes = np.zeros((n_inst, 6))
    xyz = scene.points[:, :3]
    for i in range(n_inst):
        member = xyz[scene.instance_of == i]
        boxes[i, :3] = member.min(axis=0)
        boxes[i, 3:] = member.max(axis=0)

    fidelity = float(np.mean(sp_label[part.assign_high] == scene.instance_of))
    return GroundTruth(masks, boxes, scene.class_of_instance.copy(), ~masks.any(axis=1), fidelity, sp_label)


# -------------------------------------------------------------- normalisation


def scene_frame(scene: Scene) -> tuple:
    """Origin and per-axis extent mapping the scene's bounding box to the unit cube."""
    xyz = scene.points[:, :3]
    lo = xyz.min(axis=0)
    extent = np.maximum(xyz.max(axis=0) - lo, 1e-6)
    return lo, extent


def normalize_points(scene: Scene) -> np.ndarray:
    lo, extent = scene_frame(scene)
    out = scene.points.copy()
    out[:, :3] = (out[:, :3] - lo) / extent
    return out


def normalize_boxes(boxes: np.ndarray, scene: Scene) -> np.ndarray:
    lo, extent = scene_frame(scene)
    return (boxes - np.concatenate([lo, lo])) / np.concatenate([extent, extent])


# --------------------------------------------------------------- point encoder


class PointEncoder:
    """Per-point stand-in for the sparse-conv backbone.

    Input is the normalised ``(x, y, z, r, g, b)`` row plus a fixed sinusoidal
    lift of ``(x, y, z)``; three affine layers with GELU after the first two.
    """

    def __init__(self, params: nx.ParameterSet, rng, out_dim: int = 32, hidden: int = 64, n_freqs: int = 4, prefix: str = "encoder"):
        self.n_freqs = n_freqs
        self.out_dim = out_dim
        in_dim = 6 + 6 * n_freqs
        self.l1 = params.linear(f"{prefix}.fc1", in_dim, hidden, rng)
        self.l2 = params.linear(f"{prefix}.fc2", hidden, hidden, rng)
        self.l3 = params.linear(f"{prefix}.fc3", hidden, out_dim, rng)

    def lift(self, points: np.ndarray) -> np.ndarray:
        xyz = points[:, :3]
        freqs = (2.0 ** np.arange(self.n_freqs)) * np.pi
        ang = (xyz[:, :, None] * freqs).reshape(xyz.shape[0], -1)
        return np.concatenate([points, np.sin(ang), np.cos(ang)], axis=1)

    def __call__(self, points: np.ndarray) -> nx.Tensor:
        h = nx.gelu(nx.affine(self.lift(points), *self.l1))
        h = nx.gelu(nx.affine(h, *self.l2))
        return nx.affine(h, *self.l3)


def encode_points(scene: Scene, encoder: PointEncoder) -> nx.Tensor:
    return encoder(normalize_points(scene))


def pool(features, assign: np.ndarray, count: int) -> nx.Tensor:
    """Mean-pool point features into ``count`` superpoints."""
    assign = np.asarray(assign)
    if assign.size and assign.max() >= count:
        raise ValueError(f"superpoint id {assign.max()} out of range for {count} superpoints")
    return nx.segment_mean(features, assign, count)


# ----------------------------------------------------------------- persistence


def scene_to_json(scene: Scene) -> str:
    doc = {
        "format": SCENE_FORMAT,
        "seed": scene.seed,
        "config": scene.config,
        "points": scene.points.tolist(),
        "instance_of": scene.instance_of.tolist(),
        "class_of_instance": scene.class_of_instance.tolist(),
    }
    return json.dumps(doc, separators=(",", ":"))


def scene_from_json(text: str) -> Scene:
    doc = json.loads(text)
    if doc.get("format") != SCENE_FORMAT:
        raise ValueError(f"unsupported scene format {doc.get('format')!r}")
    scene = Scene(
        np.asarray(doc["points"], dtype=np.float64).reshape(-1, 6),
        np.asarray(doc["instance_of"], dtype=np.int64),
        np.asarray(doc["class_of_instance"], dtype=np.int64),
        int(doc["seed"]),
        doc.get("config", {}),
    )
    scene.check()
    return scene


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(scene_to_json(scene))


def load_scene(path) -> Scene:
    return scene_from_json(Path(path).read_text())
