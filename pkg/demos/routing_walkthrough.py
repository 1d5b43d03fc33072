"""Follow a handful of tokens through noisy top-K routing, the capacity
buffer and the weighted combine, then look at the load-balance loss."""

import numpy as np

from widenet import moe
from widenet.tensor import RngStream, Tensor

rng = np.random.default_rng(0)
d, E, K = 6, 4, 2
N, L = 2, 5  # two sequences of five tokens

x = Tensor(rng.normal(size=(N * L, d)))
router = moe.RouterParams(Tensor(rng.normal(scale=0.5, size=(d, E))))

# route with exploration noise (std 1/E), as during training
out = moe.route(x, router, K, RngStream(7), training=True)
print("router probabilities (rows sum to 1):")
print(np.round(out.probs.data, 3))
print("chosen experts per token:", out.indices.tolist())

# gates keep the chosen probabilities as they are; no renormalization
print("gate mass per token:", np.round(out.gates.data.sum(axis=1), 3))

# per-expert buffer
B = moe.buffer_capacity(1.0, K, N, L, E)
print(f"\nbuffer per expert B = {B}")
kept = moe.dispatch_with_capacity(out, B)
print("assignments before capacity:", kept.dispatch_count.tolist())
print("assignments kept:           ", kept.per_expert_count.tolist())
print(f"dropped {kept.dropped} of {kept.indices.size} assignments")

# the load-balance loss sits at 1 for perfectly even routing and E for full collapse
print("\nbalance loss of this batch:", float(moe.balance_loss(kept).data))
print("uniform:", float(moe.balance_loss_from_stats([0.25] * 4, [0.25] * 4, 4).data))
print("collapsed:", float(moe.balance_loss_from_stats([1, 0, 0, 0], [1, 0, 0, 0], 4).data))

# experts and combine
experts = moe.ExpertParams(
    [Tensor(rng.normal(scale=0.3, size=(d, 8))) for _ in range(E)],
    [Tensor(np.zeros(8)) for _ in range(E)],
    [Tensor(rng.normal(scale=0.3, size=(8, d))) for _ in range(E)],
    [Tensor(np.zeros(d)) for _ in range(E)],
)
y = moe.combine(x, experts, kept)
silent = ~kept.kept.any(axis=1)
print("\ntokens with every assignment dropped get a zero MoE output:", np.flatnonzero(silent).tolist())
print("output norms:", np.round(np.linalg.norm(y.data, axis=1), 3))
