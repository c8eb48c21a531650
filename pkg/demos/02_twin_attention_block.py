"""
Inside one twin-attention block
===============================

Queries attend to both superpoint scales with a single set of attention
weights. Only the fine branch is restricted by the previous block's masks.
The two branch outputs are multiplied, passed through a feed-forward layer
and normalised.
"""

import numpy as np

from twinattn import numerics as nx
from twinattn.decoder import AttentionParams, DecoderConfig, attention_weights, mask_attention_bias, twin_cross_attention
from twinattn.model import TwinAttnModel
from twinattn.scene import SceneConfig, generate_scene, partition_superpoints

rng = np.random.default_rng(0)
attn = AttentionParams(nx.ParameterSet(), rng, "demo", 16)

# previous-block mask logits for 3 queries over 5 superpoints; query 2 has
# nothing above 0.5 and falls back to attending everywhere
logits = np.array([[3.0, -2.0, 1.0, -4.0, 0.5], [-1.0, 2.0, 2.0, -3.0, -1.0], [-3.0, -3.0, -2.0, -5.0, -1.0]])
bias = mask_attention_bias(logits, tau=0.5)
print("attention bias:\n", bias)

x, s = rng.normal(size=(3, 16)), rng.normal(size=(5, 16))
weights = attention_weights(x, s, attn, 4, bias).data
np.set_printoptions(precision=3, suppress=True)
print("head 0 weights (masked entries are exactly 0):\n", weights[0])

# shared weights: identical inputs on both scales give identical outputs
y_h, y_l = twin_cross_attention(x, s, s, attn, 4, np.zeros((3, 5)))
print("\nbranches bit-identical for equal inputs:", np.array_equal(y_h.data, y_l.data))

# a full model on a small scene returns one prediction per block
scene = generate_scene(SceneConfig(n_points=1024, max_instances=4), 1)
part = partition_superpoints(scene)
model = TwinAttnModel(DecoderConfig(), seed=0)
preds = model(scene, part)
print(f"\n{len(preds)} blocks, final mask logits {preds[-1].mask_logits.shape}, class logits {preds[-1].class_logits.shape}")

# parameter budget grouped like a decoder complexity table
for row, count in model.parameter_report():
    print(f"{row:<26}{count:>9,d}")
print(f"{'Total parameters':<26}{model.params.count():>9,d}")
