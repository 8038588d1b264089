"""GRPO against ToR-GRPO on a shortened ShapeCount run.

This is a small version of the desk-scale comparison: few batches, one
seed, so it finishes in a couple of minutes. The full protocol is run by
tests/test_acceptance.py or `tor-rlvr compare`.

Run: python3 demos/03_grpo_vs_tor.py [n_batches]
"""
import sys
import time
from dataclasses import replace

from tor_rlvr import trainer as tr
from tor_rlvr.selection import SelectionConfig

n_batches = int(sys.argv[1]) if len(sys.argv) > 1 else 60

runs = {
    "grpo": tr.TrainConfig(algorithm="grpo"),
    "tor-grpo": tr.TrainConfig(algorithm="tor-grpo",
                               selection=SelectionConfig(alpha_r=0.3, alpha_p=0.3, gamma_r=1.0, gamma_p=0.5)),
}

for name, cfg in runs.items():
    cfg = replace(cfg, total_rollout_batches=n_batches, eval_every=max(1, n_batches // 3))
    start = time.perf_counter()
    res = tr.train_loop(cfg)
    curve = ", ".join(f"{e['batch']}: {e['greedyReward']:.2f}" for e in res.evals)
    overlap = sum(r["overlapRatio"] for r in res.history) / max(1, len(res.history))
    print(f"{name:>8}  greedy reward by batch [{curve}]  mean overlap {overlap:.3f}  "
          f"({time.perf_counter() - start:.0f}s)")
