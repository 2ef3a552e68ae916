"""Random small instances of every trainable loss, checked against central differences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoders import ClassTextBank, EncoderStack, LoraLinear, encode_image, encode_text
from .federation import text_loss
from .local_training import (VARIANTS, PolicySnapshot, RlConfig, SampleGroup, compute_rewards,
                             group_advantages, policy_log_probs, rl_loss, sft_loss)

LOSSES = ("ce",) + VARIANTS + ("text",)
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    which: str
    errors: list[float]

    @property
    def worst(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE


def _stack(rng, dim: int, rank: int) -> EncoderStack:
    layers = [LoraLinear(np.eye(dim) + 0.3 * rng.standard_normal((dim, dim)))]
    # B is nonzero so that gradients reach A as well
    layers.append(LoraLinear(np.eye(dim) + 0.3 * rng.standard_normal((dim, dim)),
                             0.5 * rng.standard_normal((rank, dim)),
                             0.5 * rng.standard_normal((dim, rank))))
    return EncoderStack(layers)


def _away_from_kinks(rng, shape, lo: float, hi: float, margin: float = 0.02) -> np.ndarray:
    """Offsets ``u`` with ``ratio = exp(-u)`` kept clear of the clip boundaries."""
    bounds = -np.log([lo, hi])
    u = rng.uniform(-0.5, 0.5, shape)
    bad = np.min(np.abs(u[..., None] - bounds), axis=-1) < margin
    while bad.any():
        u[bad] = rng.uniform(-0.5, 0.5, bad.sum())
        bad = np.min(np.abs(u[..., None] - bounds), axis=-1) < margin
    return u


def instance(which: str, rng):
    """Return ``(loss_fn, params)`` where ``loss_fn(params) -> (tape, loss Var)``."""
    dim, rank = int(rng.integers(4, 7)), int(rng.integers(1, 3))
    n_cls, bs = int(rng.integers(2, 5)), int(rng.integers(2, 6))
    tau = float(rng.uniform(0.2, 1.0))
    stack = _stack(rng, dim, rank)
    bank = ClassTextBank.generate(n_cls, dim, int(rng.integers(1 << 30)))
    classes = list(range(n_cls))
    X = rng.standard_normal((bs, dim))
    y = rng.integers(0, n_cls, bs)
    lora = stack.lora_state()
    text_embs = encode_text(stack, bank, classes)

    if which == "ce":
        return (lambda p: sft_loss(stack, p, X, y, text_embs, classes, tau)), lora

    if which == "text":
        emb = encode_image(stack, X)
        cols = np.asarray(y)
        return (lambda p: text_loss(stack, bank, classes, p, emb, cols, tau)), lora

    if which not in VARIANTS:
        raise ValueError(f"unknown loss {which!r}; expected one of {LOSSES}")
    G = 3
    cfg = RlConfig(variant=which, beta=float(rng.uniform(0.1, 1.0)))
    lo, hi = cfg.clip_range
    actions = rng.integers(0, n_cls, (bs, G))
    rewards = compute_rewards(actions, y)
    # force at least one mixed group so the policy term is active
    rewards[0] = (1.0, 0.0, 0.0)
    adv = group_advantages(rewards, which)
    logp_now = policy_log_probs(stack, lora, X, actions, text_embs, tau)
    old = np.exp(logp_now + _away_from_kinks(rng, (bs, G), lo, hi))
    group = SampleGroup(actions, np.zeros((bs, G, dim)), old, rewards, adv)
    ref_lora = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in lora.items()}
    reference = PolicySnapshot.freeze(ref_lora, "reference")
    logp_ref = policy_log_probs(stack, ref_lora, X, actions, text_embs, tau)
    return (lambda p: rl_loss(stack, p, X, group, reference, text_embs, tau, cfg, logp_ref)), lora


def check_one(which: str, rng) -> float:
    fn, params = instance(which, rng)
    tape, loss = fn(params)
    analytic = nx.backward(tape, loss)
    numeric = nx.finite_diff_gradient(lambda p: float(fn(p)[1].value), params)
    return nx.max_relative_error(analytic, numeric)


def run_checks(which=LOSSES, n: int = 50, seed: int = 0) -> list[CheckResult]:
    out = []
    for w in which:
        rng = np.random.default_rng([seed, LOSSES.index(w)])
        out.append(CheckResult(w, [check_one(w, rng) for _ in range(n)]))
    return out
