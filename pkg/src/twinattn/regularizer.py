"""Box regularizer: scene-wise heads, relative box positions and mask logits.

For query ``i`` with box ``b_i`` and fused embedding ``x_i``, superpoint ``j``
gets the logit ``x_i . ([b_i - F_b[j], F_m[j]] W + w0)``. The positional
block always comes first in the concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import numerics as nx


@dataclass
class SceneWise:
    semantic: nx.Tensor  # F_m, (N_h, D_s)
    box: nx.Tensor  # F_b, (N_h, 6)


class RegularizerParams:
    def __init__(self, params: nx.ParameterSet, rng, d_in: int, d_sem: int, prefix: str = "regularizer"):
        self.d_sem = d_sem
        self.d_model = d_sem + 6
        self.semantic = params.linear(f"{prefix}.scene_semantic", d_in, d_sem, rng)
        self.box = params.linear(f"{prefix}.scene_box", d_in, 6, rng)
        self.embed = params.linear(f"{prefix}.mask_embed", self.d_model, self.d_model, rng)


def scene_heads(s_high, reg: RegularizerParams) -> SceneWise:
    """Two affine maps (no nonlinearity) from pooled fine features."""
    return SceneWise(nx.affine(s_high, *reg.semantic), nx.affine(s_high, *reg.box))


def relative_positions(box_pred, scene_box) -> nx.Tensor:
    """``R[i, j] = box_pred[i] - scene_box[j]``, shape ``(N_o, N_h, 6)``."""
    box_pred, scene_box = nx.as_tensor(box_pred), nx.as_tensor(scene_box)
    return nx.sub(nx.reshape(box_pred, (box_pred.shape[0], 1, 6)), nx.reshape(scene_box, (1, scene_box.shape[0], 6)))


def regularized_masks(rel, scene_semantic, x, weight, bias) -> nx.Tensor:
    """Mask logits from the explicit ``(N_o, N_h, D_o)`` feature tensor.

    Args:
        rel: relative positions, ``(N_o, N_h, 6)``.
        scene_semantic: ``F_m``, ``(N_h, D_s)``.
        x: fused query embeddings, ``(N_o, D_o)``.
        weight, bias: the shared ``D_o -> D_o`` affine map.

    Returns:
        ``(N_o, N_h)`` logits.
    """
    rel, scene_semantic, x = nx.as_tensor(rel), nx.as_tensor(scene_semantic), nx.as_tensor(x)
    n_o, n_h, _ = rel.shape
    width = 6 + scene_semantic.shape[1]
    if width != x.shape[1] or weight.shape != (width, width):
        raise nx.DimensionError(
            f"regularized_masks: [R ; F_m] width {width} does not match query width {x.shape[1]} "
            f"and weight {weight.shape}"
        )
    sem = nx.broadcast_to(nx.reshape(scene_semantic, (1, n_h, width - 6)), (n_o, n_h, width - 6))
    feats = nx.affine(nx.concat([rel, sem], axis=-1), weight, bias)
    return nx.sum(nx.mul(feats, nx.reshape(x, (n_o, 1, width))), axis=-1)


def regularized_masks_fast(box_pred, scene: SceneWise, x, reg: RegularizerParams) -> nx.Tensor:
    """Same logits as :func:`regularized_masks` without the 3-D intermediate.

    Splitting the weight rows into the positional part ``W_r`` and the
    semantic part ``W_m`` gives
    ``logit[i, j] = x_i . (b_i W_r + w0) + x_i . (F_m[j] W_m - F_b[j] W_r)``.
    """
    weight, bias = reg.embed
    w_pos = nx.take(weight, slice(0, 6))
    w_sem = nx.take(weight, slice(6, None))
    per_query = nx.sum(nx.mul(x, nx.affine(box_pred, w_pos, bias)), axis=1, keepdims=True)
    per_superpoint = nx.sub(nx.matmul(scene.semantic, w_sem), nx.matmul(scene.box, w_pos))
    return nx.add(per_query, nx.matmul(x, nx.transpose(per_superpoint)))

