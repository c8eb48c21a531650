"""Full pipeline model: point encoder, pooling, twin-attention decoder, heads."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .decoder import (
    BlockPrediction,
    DecoderConfig,
    PredictionHeads,
    TwinBlock,
    box_head,
    init_queries,
    mask_attention_bias,
    predict,
)
from .regularizer import RegularizerParams, regularized_masks_fast, scene_heads
from .scene import PointEncoder, Scene, SuperpointPartition, encode_points, pool

# Row groups of the parameter report, in print order.
PARAM_GROUPS = (
    ("Backbone (point encoder)", ("encoder.",)),
    ("Input Projection", ("decoder.input_proj",)),
    ("Query-related", ("decoder.query",)),
    ("Cross-attention", (".cross.",)),
    ("Self-attention", (".self.",)),
    ("Feedforward", (".ffn.",)),
    ("Prediction Head", ("decoder.head.", "regularizer.", "decoder.mask_embed")),
)


class TwinAttnModel:
    """Everything with learnable weights, addressed through one ``ParameterSet``."""

    def __init__(self, cfg: DecoderConfig | None = None, seed: int = 0):
        self.cfg = cfg = cfg or DecoderConfig()
        cfg.validate()
        rng = np.random.default_rng(seed)
        self.params = nx.ParameterSet()
        self.encoder = PointEncoder(self.params, rng, cfg.d_backbone, cfg.encoder_hidden)
        self.input_proj = self.params.linear("decoder.input_proj", cfg.d_backbone, cfg.d_model, rng)
        self.input_norm = self.params.norm("decoder.input_proj.norm", cfg.d_model)
        self.query = init_queries(cfg, self.params, rng)
        self.blocks = [TwinBlock(self.params, rng, f"decoder.block{i + 1}", cfg) for i in range(cfg.blocks)]
        self.heads = PredictionHeads(self.params, rng, cfg.d_model, cfg.n_classes)
        if cfg.use_regularizer:
            self.regularizer = RegularizerParams(self.params, rng, cfg.d_backbone, cfg.d_sem)
        else:
            self.mask_embed = self.params.linear("decoder.mask_embed", cfg.d_model, cfg.d_model, rng)

    def superpoint_features(self, scene: Scene, part: SuperpointPartition):
        """Pooled ``(S_l, S_h)`` from the encoded points."""
        feats = encode_points(scene, self.encoder)
        return pool(feats, part.assign_low, part.n_low), pool(feats, part.assign_high, part.n_high)

    def forward(self, scene: Scene, part: SuperpointPartition) -> list:
        s_low, s_high = self.superpoint_features(scene, part)
        return self.decode(s_low, s_high)

    __call__ = forward

    def decode(self, s_low, s_high, query=None) -> list:
        """Run every block; block ``L`` is masked by block ``L-1``'s mask logits."""
        cfg = self.cfg
        p_high = nx.layer_norm(nx.affine(s_high, *self.input_proj), *self.input_norm)
        p_low = nx.layer_norm(nx.affine(s_low, *self.input_proj), *self.input_norm)
        scene_wise = scene_heads(s_high, self.regularizer) if cfg.use_regularizer else None
        x = self.query if query is None else query
        bias = None
        preds: list[BlockPrediction] = []
        for block in self.blocks:
            x = block(x, p_high, p_low, bias)
            box = box_head(x, self.heads)
            if cfg.use_regularizer:
                logits = regularized_masks_fast(box, scene_wise, x, self.regularizer)
            else:
                logits = nx.matmul(nx.affine(x, *self.mask_embed), nx.transpose(p_high))
            preds.append(predict(x, self.heads, logits, box))
            if cfg.scales != "low":
                bias = mask_attention_bias(logits.data, cfg.tau)
        return preds

    def parameter_report(self) -> list:
        """``[(row, count), ...]`` grouped like the decoder complexity table."""
        rows, used = [], set()
        for label, keys in PARAM_GROUPS:
            names = [n for n in self.params.names() if n not in used and any(k in n for k in keys)]
            used.update(names)
            rows.append((label, int(sum(self.params[n].data.size for n in names))))
        rest = [n for n in self.params.names() if n not in used]
        if rest:
            rows.append(("Others", int(sum(self.params[n].data.size for n in rest))))
        return rows
