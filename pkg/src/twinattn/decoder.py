"""Twin-attention decoder.

One set of attention weights per block serves both superpoint scales: the
fine branch additionally receives the mask-attention bias derived from the
previous block's mask logits. The two branch outputs are merged by an
elementwise product followed by a feed-forward layer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx

SCALES = ("multi", "low", "high")


@dataclass
class DecoderConfig:
    n_classes: int = 6
    n_queries: int = 32
    d_sem: int = 58
    blocks: int = 6
    heads: int = 8
    tau: float = 0.5
    ffn_hidden: int = 128
    d_backbone: int = 32
    encoder_hidden: int = 64
    scales: str = "multi"
    use_regularizer: bool = True
    use_box_loss: bool = True
    use_box_score: bool = True

    @property
    def d_model(self) -> int:
        return self.d_sem + 6

    def validate(self) -> None:
        if self.n_queries <= 0 or self.blocks <= 0 or self.heads <= 0:
            raise ValueError("n_queries, blocks and heads must be positive")
        if self.d_model % self.heads:
            raise ValueError(f"query width {self.d_model} is not divisible by {self.heads} heads")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.scales not in SCALES:
            raise ValueError(f"scales must be one of {SCALES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BlockPrediction:
    mask_logits: nx.Tensor  # (N_o, N_h), pre-sigmoid
    class_logits: nx.Tensor  # (N_o, N_C + 1), last column = no instance
    mask_score: nx.Tensor  # (N_o,)
    box: nx.Tensor  # (N_o, 6)
    box_score: nx.Tensor  # (N_o,)

    @property
    def class_probs(self) -> np.ndarray:
        z = self.class_logits.data
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    @property
    def mask_probs(self) -> np.ndarray:
        return nx._sigmoid(self.mask_logits.data)

    def permuted(self, order) -> "BlockPrediction":
        return BlockPrediction(*(nx.Tensor(t.data[order]) for t in (self.mask_logits, self.class_logits, self.mask_score, self.box, self.box_score)))


def init_queries(cfg: DecoderConfig, params: nx.ParameterSet, rng, name: str = "decoder.query") -> nx.Parameter:
    """Learned ``[X_s ; X_b]``: normal(0, 0.02) semantic part, unit box part."""
    sem = rng.normal(0.0, 0.02, size=(cfg.n_queries, cfg.d_sem))
    box = np.tile([0.0, 0.0, 0.0, 1.0, 1.0, 1.0], (cfg.n_queries, 1))
    return params.add(name, np.concatenate([sem, box], axis=1))


def mask_attention_bias(prev_mask_logits: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """``0`` where ``sigmoid(logit) >= tau`` else ``-inf``; fully masked rows fall back to ``0``."""
    logits = np.asarray(prev_mask_logits, dtype=np.float64)
    keep = nx._sigmoid(logits) >= tau
    bias = np.where(keep, 0.0, nx.NEG_INF)
    bias[~keep.any(axis=1)] = 0.0
    return bias


class AttentionParams:
    """Query/key/value/output projections plus the post-residual layer norm."""

    def __init__(self, params: nx.ParameterSet, rng, prefix: str, width: int):
        self.q = params.linear(f"{prefix}.proj_q", width, width, rng)
        self.k = params.linear(f"{prefix}.proj_k", width, width, rng)
        self.v = params.linear(f"{prefix}.proj_v", width, width, rng)
        self.o = params.linear(f"{prefix}.proj_out", width, width, rng)
        self.norm = params.norm(f"{prefix}.norm", width)


class FeedForwardParams:
    def __init__(self, params: nx.ParameterSet, rng, prefix: str, width: int, hidden: int):
        self.fc1 = params.linear(f"{prefix}.fc1", width, hidden, rng)
        self.fc2 = params.linear(f"{prefix}.fc2", hidden, width, rng)
        self.norm = params.norm(f"{prefix}.norm", width)


def _split_heads(t: nx.Tensor, heads: int) -> nx.Tensor:
    n, width = t.shape
    return nx.transpose(nx.reshape(t, (n, heads, width // heads)), (1, 0, 2))


def attention_weights(x, source, attn: AttentionParams, heads: int, bias=None) -> nx.Tensor:
    """Per-head softmax weights, shape ``(heads, N_query, N_source)``."""
    q = _split_heads(nx.affine(x, *attn.q), heads)
    k = _split_heads(nx.affine(source, *attn.k), heads)
    scores = nx.mul(nx.matmul(q, nx.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(q.shape[-1]))
    return nx.row_softmax(scores, None if bias is None else bias[None])


def attend(x, source, attn: AttentionParams, heads: int, bias=None) -> nx.Tensor:
    """Multi-head attention from ``x`` to ``source``, then residual and layer norm."""
    x = nx.as_tensor(x)
    weights = attention_weights(x, source, attn, heads, bias)
    v = _split_heads(nx.affine(source, *attn.v), heads)
    mixed = nx.matmul(weights, v)
    merged = nx.reshape(nx.transpose(mixed, (1, 0, 2)), x.shape)
    return nx.layer_norm(nx.add(x, nx.affine(merged, *attn.o)), *attn.norm)


def twin_cross_attention(x, s_high, s_low, attn: AttentionParams, heads: int, bias_high=None):
    """Cross-attend the shared queries to both scales with one weight set.

    Only the fine branch sees ``bias_high``. Returns ``(Y_h, Y_l)``.
    """
    if bias_high is not None:
        bias_high = np.asarray(bias_high)
        if np.any(np.all(np.isneginf(bias_high), axis=1)):
            raise nx.DegenerateRowError("mask bias has a fully masked query row")
    return attend(x, s_high, attn, heads, bias_high), attend(x, s_low, attn, heads)


def twin_self_attention(y_high, y_low, attn: AttentionParams, heads: int):
    """Unmasked self-attention over the queries of each branch, shared weights."""
    return attend(y_high, y_high, attn, heads), attend(y_low, y_low, attn, heads)


def fusion_input(z_high, z_low) -> nx.Tensor:
    return nx.mul(z_low, z_high)


def feed_forward(h, ffn: FeedForwardParams) -> nx.Tensor:
    return nx.affine(nx.gelu(nx.affine(h, *ffn.fc1)), *ffn.fc2)


def fuse(z_high, z_low, ffn: FeedForwardParams) -> nx.Tensor:
    """``LN(FFN(Z_l * Z_h) + Z_h)``."""
    return nx.layer_norm(nx.add(feed_forward(fusion_input(z_high, z_low), ffn), z_high), *ffn.norm)


class PredictionHeads:
    """Class MLP (softmax over N_C + 1) and affine mask-score, box and box-score heads."""

    def __init__(self, params: nx.ParameterSet, rng, width: int, n_classes: int, prefix: str = "decoder.head"):
        self.cls_hidden = params.linear(f"{prefix}.cls_fc1", width, width, rng)
        self.cls_out = params.linear(f"{prefix}.cls_fc2", width, n_classes + 1, rng)
        self.mask_score = params.linear(f"{prefix}.mask_score", width, 1, rng)
        self.box = params.linear(f"{prefix}.box", width, 6, rng)
        self.box_score = params.linear(f"{prefix}.box_score", width, 1, rng)


def class_logits(x, heads: PredictionHeads) -> nx.Tensor:
    return nx.affine(nx.gelu(nx.affine(x, *heads.cls_hidden)), *heads.cls_out)


def box_head(x, heads: PredictionHeads) -> nx.Tensor:
    return nx.affine(x, *heads.box)


def predict(x, heads: PredictionHeads, mask_logits, box=None) -> BlockPrediction:
    """Assemble one block's outputs. ``mask_logits`` come from the mask head."""
    n = x.shape[0]
    return BlockPrediction(
        mask_logits=nx.as_tensor(mask_logits),
        class_logits=class_logits(x, heads),
        mask_score=nx.reshape(nx.affine(x, *heads.mask_score), (n,)),
        box=box_head(x, heads) if box is None else box,
        box_score=nx.reshape(nx.affine(x, *heads.box_score), (n,)),
    )


class TwinBlock:
    def __init__(self, params: nx.ParameterSet, rng, prefix: str, cfg: DecoderConfig):
        self.heads = cfg.heads
        self.scales = cfg.scales
        self.cross = AttentionParams(params, rng, f"{prefix}.cross", cfg.d_model)
        self.self_attn = AttentionParams(params, rng, f"{prefix}.self", cfg.d_model)
        self.ffn = FeedForwardParams(params, rng, f"{prefix}.ffn", cfg.d_model, cfg.ffn_hidden)

    def __call__(self, x, s_high, s_low, bias_high=None) -> nx.Tensor:
        if self.scales == "multi":
            y_h, y_l = twin_cross_attention(x, s_high, s_low, self.cross, self.heads, bias_high)
            z_h, z_l = twin_self_attention(y_h, y_l, self.self_attn, self.heads)
            return fuse(z_h, z_l, self.ffn)
        # single-scale ablations: one branch, FFN on its own output
        if self.scales == "high":
            y = attend(x, s_high, self.cross, self.heads, bias_high)
        else:
            y = attend(x, s_low, self.cross, self.heads)
        z = attend(y, y, self.self_attn, self.heads)
        return nx.layer_norm(nx.add(feed_forward(z, self.ffn), z), *self.ffn.norm)
