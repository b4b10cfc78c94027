"""The pieces underneath SAMIL, one at a time, on a single toy bag.

Shows the attention weights of a fresh model, the relevance target built from
view scores, the KL term, the flexible combination of both attention branches,
and one InfoNCE value against a queue of negatives.
"""

import numpy as np

from samil.milmodel import MILModel, ModelConfig, combine_attention, relevance_targets, supervised_attention_loss
from samil.pretrain import NegativeQueue, info_nce

np.set_printoptions(precision=3, suppress=True)
rng = np.random.default_rng(0)

bag = rng.normal(size=(6, 12))
model = MILModel(ModelConfig(input_dim=12, hidden=(10, 6), attention_dim=4, variant="samil"), seed=0)
out = model.forward([bag])
print("class probabilities ", out.probs.data[0])
print("supervised attention", out.A.data)
print("flexible attention  ", out.B.data)

views = np.array([0.9, 0.1, 0.8, 0.0, 0.05, 0.7])  # view-classifier relevance scores
target = relevance_targets(views, tau_v=0.1)
print("relevance target    ", target)
print("KL(target || A)      %.4f" % supervised_attention_loss(target, out.A).item())
print("combined attention  ", combine_attention(out.A, out.B).data)

q = rng.normal(size=8)
q /= np.linalg.norm(q)
queue = NegativeQueue.random(16, 8, rng)
print("InfoNCE, positive = query: %.4f" % info_nce(q, q, queue.contents(), 0.1).item())
