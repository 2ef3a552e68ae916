"""Final base accuracy against the embedding upload ratio (median over seeds).

With ``--match-steps`` the server runs 1/ratio epochs so that every ratio gets
the same number of text-encoder steps per round.
"""

import argparse
import math

import numpy as np

from dualfed.config import RunConfig
from dualfed.experiment import run_experiment, variant_config

p = argparse.ArgumentParser()
p.add_argument("--seeds", type=int, default=5)
p.add_argument("--ratios", default="1.0,0.5,0.2,0.1")
p.add_argument("--match-steps", action="store_true")
args = p.parse_args()

for r in (float(x) for x in args.ratios.split(",")):
    ov = f"upload.ratio={r}"
    if args.match_steps:
        ov += f";train.server_epochs={math.ceil(1 / r)}"
    accs = [run_experiment(variant_config(RunConfig(seed=s), ov)).final.base_acc for s in range(args.seeds)]
    print(f"ratio {r:4.2f}  base {np.median(accs):.4f}  per seed {np.round(accs, 4).tolist()}", flush=True)
