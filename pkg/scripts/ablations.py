"""Median final metrics over several seeds for the main ablations.

Mirrors the comparisons used in acceptance: decoupled vs image-only training on
the K=4 disjoint task, SFT->RL vs SFT-only vs RL-only, and the reference choice.
"""

import argparse
from dataclasses import replace

import numpy as np

from dualfed.config import RunConfig
from dualfed.experiment import run_experiment, variant_config

p = argparse.ArgumentParser()
p.add_argument("--seeds", type=int, default=5)
p.add_argument("--clients", type=int, default=4)
p.add_argument("--variants", default="base,decoupled_off,sft_only,rl_only,ref_latest,ref_final_sft,"
                                     "dr_grpo,gmpo,dapo,liteppo")
args = p.parse_args()

rows = {}
for name in args.variants.split(","):
    vals = []
    for seed in range(args.seeds):
        cfg = RunConfig(seed=seed)
        cfg = replace(cfg, partition=replace(cfg.partition, num_clients=args.clients))
        f = run_experiment(variant_config(cfg, name)).final
        vals.append((f.base_acc, f.novel_acc, f.hm))
    rows[name] = np.median(np.array(vals), axis=0)
    print(f"{name:14s} base {rows[name][0]:.4f}  novel {rows[name][1]:.4f}  hm {rows[name][2]:.4f}", flush=True)
