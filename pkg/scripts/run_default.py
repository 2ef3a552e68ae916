"""Run one configuration and print the per-round metrics table."""

import argparse

from dualfed.config import RunConfig, load_config
from dualfed.experiment import metrics_csv, run_experiment

p = argparse.ArgumentParser()
p.add_argument("config", nargs="?", help="config file; defaults are used when omitted")
p.add_argument("--out", help="directory for metrics.csv, summary.json and checkpoints")
args = p.parse_args()

cfg = load_config(args.config) if args.config else RunConfig()
res = run_experiment(cfg, args.out)
print(metrics_csv(res.history), end="")
z = res.history[0]
print(f"# zero-shot base={z.base_acc:.4f} novel={z.novel_acc:.4f}; switch to RL after round "
      f"{res.transition_round}; {res.wall_time:.1f}s")
