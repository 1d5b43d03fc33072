"""Compare how far the per-block layer-norm vectors drift apart with and
without parameter sharing."""

import numpy as np

from widenet import analysis
from widenet.model import WideNetConfig
from widenet.train import DataConfig, ToyDataset, TrainConfig, train

base = dict(depth=4, d_model=32, d_ff=64, heads=4, num_experts=4, top_k=2, groups=4, vocab_size=32, e_embed=16,
            seq_len=8, num_classes=4)
variants = {
    "shared weights, own norms": {},
    "nothing shared": {"share_attn": False, "share_moe": False},
    "shared norms": {"share_ln": True},
}
tcfg = TrainConfig(steps=300, batch_size=32, lr=3e-3, warmup_steps=15)

for name, extra in variants.items():
    cfg = WideNetConfig(**{**base, **extra})
    result = train(cfg, ToyDataset(DataConfig.for_model(cfg)), tcfg)
    rep = analysis.divergence_report(result.params, "moe")
    print(f"{name:28s} y_gamma {rep.y_gamma:.5f}  y_beta {rep.y_beta:.5f}  "
          f"eval acc {result.final_eval.accuracy:.3f}")

# the metric on raw vectors: every element against every element of the other blocks
print("\ntwo blocks (0, 0) and (1, 1):", analysis.ln_divergence(np.array([[0.0, 0.0], [1.0, 1.0]])))
