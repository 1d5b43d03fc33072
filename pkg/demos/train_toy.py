"""Train a small WideNet on the synthetic majority-cluster task and watch
the loss, the routing balance and the per-expert share."""

import sys
import tempfile
from pathlib import Path

import numpy as np

from widenet import analysis
from widenet.model import WideNetConfig, count_parameters
from widenet.train import DataConfig, ToyDataset, TrainConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 400

cfg = WideNetConfig(depth=4, d_model=64, d_ff=128, heads=4, num_experts=4, top_k=2, groups=4,
                    vocab_size=32, e_embed=16, seq_len=8, num_classes=4)
print("parameters:", count_parameters(cfg))
print("same model without sharing:",
      count_parameters(WideNetConfig(**{**cfg.to_dict(), "share_attn": False, "share_moe": False})))

data = ToyDataset(DataConfig.for_model(cfg))
tcfg = TrainConfig(steps=steps, batch_size=32, lr=3e-3, warmup_steps=steps // 20, eval_every=steps // 4)

out = Path(tempfile.mkdtemp(prefix="widenet-demo-"))
result = train(cfg, data, tcfg, out_dir=out)

history = [r for r in result.history if r["kind"] == "train"]
for r in history[:: max(1, steps // 10)]:
    print(f"step {r['step']:4d}  loss {r['total']:.4f}  balance {np.mean(r['l_balance']):.4f}  "
          f"drop {np.mean(r['drop_rate']):.3f}")
print("eval accuracy:", result.final_eval.accuracy)

util = analysis.expert_utilization(out / "routing.jsonl")
for g in util.groups:
    print(f"routing group {g}: final expert share {np.round(util.share[g][-1], 3).tolist()}")
print("outputs written to", out)
