"""Novel-class accuracy per round for SFT->RL and SFT-only on the same seed."""

import argparse
from dataclasses import replace

from dualfed.config import RunConfig
from dualfed.experiment import run_experiment, variant_config

p = argparse.ArgumentParser()
p.add_argument("--seed", type=int, default=0)
p.add_argument("--clients", type=int, default=4)
args = p.parse_args()

cfg = RunConfig(seed=args.seed)
cfg = replace(cfg, partition=replace(cfg.partition, num_clients=args.clients))
rl = run_experiment(cfg)
M = rl.transition_round
sft = run_experiment(variant_config(replace(cfg, stage=replace(cfg.stage, fixed_m=M)), "sft_only"))
print(f"switch after round {M}")
print("round  sft_rl  sft_only")
for a, b in zip(rl.history, sft.history):
    print(f"{a.round:5d}  {a.novel_acc:.4f}  {b.novel_acc:.4f}")
