"""End-to-end runs: build data and models from a RunConfig, iterate rounds,
evaluate the global model after each, and write result files."""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import wire
from .config import RunConfig, dump_config
from .data import SyntheticTask, generate_synthetic, partition
from .encoders import init_pretrained_like
from .evaluation import RoundMetrics, evaluate_global
from .federation import Channel, ClientState, ServerState, run_round
from .local_training import StageController


@dataclass
class ExperimentResult:
    config: RunConfig
    history: list[RoundMetrics]
    server: ServerState
    clients: list[ClientState]
    task: SyntheticTask
    channel: Channel
    wall_time: float

    @property
    def final(self) -> RoundMetrics:
        return self.history[-1]

    @property
    def transition_round(self) -> int | None:
        return self.server.controller.transition_round


def setup(cfg: RunConfig) -> tuple[SyntheticTask, ServerState, list[ClientState], Channel]:
    cfg.validate()
    task = generate_synthetic(replace(cfg.data, seed=cfg.seed))
    shards = partition(task.train.restrict(task.base), cfg.partition, cfg.seed)
    m = cfg.model
    model = init_pretrained_like(cfg.seed, dim=m.dim, hidden=m.hidden, n_layers=m.layers, rank=m.rank,
                                 lora_start=m.lora_start, scale=m.init_scale, tau=m.tau,
                                 lora_init=m.lora_init)
    st = cfg.stage
    controller = StageController(st.eps_acc, st.patience, st.fixed_m)
    server = ServerState(model, task.bank, list(task.base), model.image.lora_state(),
                         model.text.lora_state(), controller)
    if cfg.train.schedule == "rl_only" or (cfg.train.schedule == "sft_rl" and st.fixed_m == 0):
        controller.stage, controller.transition_round = "RL", 0
        server.set_sft_checkpoint(server.global_lora)
    clients = [ClientState(k, s, model.image.copy()) for k, s in enumerate(shards)]
    return task, server, clients, Channel(frozenset(task.base))


def _evaluate(server: ServerState, clients, task: SyntheticTask):
    views = [(c.classes, c.domains) for c in clients]
    return evaluate_global(server.model.image, server.global_lora, server.text_embs, task.test,
                           task.base, task.novel, views)


def run_experiment(cfg: RunConfig, out_dir: str | Path | None = None) -> ExperimentResult:
    """Round 0 holds zero-shot metrics; rounds 1..T follow the training schedule."""
    start = time.perf_counter()
    task, server, clients, channel = setup(cfg)
    history = [RoundMetrics(0, "zero_shot", [], **_evaluate(server, clients, task))]
    pool = ThreadPoolExecutor(cfg.train.workers) if cfg.train.workers > 1 else None
    try:
        for t in range(1, cfg.train.rounds + 1):
            out = run_round(server, clients, cfg, t, channel, pool)
            history.append(RoundMetrics(t, out.stage, out.train_acc, train_loss=out.train_loss,
                                        text_loss=out.text_loss, skipped_steps=out.skipped,
                                        **_evaluate(server, clients, task)))
    finally:
        if pool is not None:
            pool.shutdown()
    result = ExperimentResult(cfg, history, server, clients, task, channel, time.perf_counter() - start)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6g}"


def metrics_csv(history: list[RoundMetrics]) -> str:
    domains = sorted({d for r in history for d in r.domain_acc})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "stage", "train_acc_mean", "local_acc", "base_acc", "novel_acc", "hm"]
               + [f"domain{d}_acc" for d in domains])
    for r in history:
        if r.round == 0:
            continue
        w.writerow([r.round, r.stage, _fmt(r.train_acc_mean), _fmt(r.local_acc), _fmt(r.base_acc),
                    _fmt(r.novel_acc), _fmt(r.hm)] + [_fmt(r.domain_acc.get(d)) for d in domains])
    return buf.getvalue()


def summary(result: ExperimentResult) -> dict:
    f, z = result.final, result.history[0]
    return {
        "final": {"round": f.round, "stage": f.stage, "local_acc": f.local_acc, "base_acc": f.base_acc,
                  "novel_acc": f.novel_acc, "hm": f.hm, "domain_acc": f.domain_acc},
        "zero_shot": {"local_acc": z.local_acc, "base_acc": z.base_acc, "novel_acc": z.novel_acc, "hm": z.hm},
        "transition_round": result.transition_round,
        "wall_time_s": result.wall_time,
        "config": dump_config(result.config),
    }


def write_outputs(result: ExperimentResult, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(result.history))
    (out / "summary.json").write_text(json.dumps(summary(result), indent=2, sort_keys=True) + "\n")
    (out / "image_lora.bin").write_bytes(wire.encode_lora(result.server.global_lora))
    (out / "text_lora.bin").write_bytes(wire.encode_lora(result.server.text_lora))
    return out


VARIANTS = {
    "base": {},
    "sft_rl": {"train.schedule": "sft_rl"},
    "sft_only": {"train.schedule": "sft_only"},
    "rl_only": {"train.schedule": "rl_only"},
    "ref_mix": {"train.reference": "mix"},
    "ref_latest": {"train.reference": "latest"},
    "ref_final_sft": {"train.reference": "final_sft"},
    "decoupled_off": {"train.decoupled": False},
    "grpo": {"rl.variant": "grpo"},
    "dr_grpo": {"rl.variant": "dr_grpo"},
    "gmpo": {"rl.variant": "gmpo"},
    "dapo": {"rl.variant": "dapo"},
    "liteppo": {"rl.variant": "liteppo"},
}


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    from .config import parse_config
    return parse_config("\n".join(f"{k} = {v}" for k, v in overrides.items()), base=cfg)


def variant_config(cfg: RunConfig, name: str) -> RunConfig:
    """Named ablation, or an inline override list such as ``upload.ratio=0.2``."""
    if name in VARIANTS:
        return apply_overrides(cfg, VARIANTS[name])
    if "=" in name:
        pairs = dict(p.split("=", 1) for p in name.split(";"))
        return apply_overrides(cfg, pairs)
    raise KeyError(f"unknown variant {name!r}; known: {', '.join(VARIANTS)}")
