"""
Set matching and the composite loss
===================================

Each block's proposals are matched one-to-one to ground-truth objects by a
minimum-cost assignment. Matched proposals are trained on their object's
mask, class, box and quality scores, while the rest learn "no instance".
"""

import itertools

import numpy as np

from twinattn.decoder import DecoderConfig
from twinattn.model import TwinAttnModel
from twinattn.scene import SceneConfig, generate_scene
from twinattn.training import LossConfig, hungarian, losses, match_block, pairwise_cost, prepare

# a padded 3x2 problem: the spare third proposal stays unmatched
cost = np.array([[1.0, 2.0], [2.0, 1.0], [5.0, 5.0]])
res = hungarian(cost)
print("pairs (proposal, object):", res.assignment, "total", res.total_cost, "unmatched", res.unmatched_proposals)

# agrees with trying every assignment
best = min(sum(cost[p, g] for g, p in enumerate(perm)) for perm in itertools.permutations(range(3), 2))
print("brute force total:", best)

# on a real scene with an untrained model
sample = prepare(generate_scene(SceneConfig(n_points=2048, max_instances=5), 2))
model = TwinAttnModel(DecoderConfig(), seed=0)
preds = model(sample.scene, sample.part)
cfg = LossConfig()
c = pairwise_cost(preds[-1], sample.target.masks, sample.target.classes, cfg.lambda_cls, cfg.lambda_mask)
print(f"\ncost matrix {c.shape}: proposals x objects, range [{c.min():.3f}, {c.max():.3f}]")

matches = [match_block(p, sample.target, cfg) for p in preds]
total, br = losses(preds, sample.target, matches, cfg)
for term, value in br.as_dict().items():
    print(f"  {term:<11}{value:9.4f}")
print(f"recomposed from parts: {br.recompose():.12f}")
