"""Client-side optimisation of the image-encoder LoRA: SFT epochs and the
group-relative RL stage with latent-noise sampling.

The policy is the categorical distribution induced by the similarity
softmax. During sampling, Gaussian noise is added to the image latent before
normalisation; everything that is differentiated (current-policy ratio and
KL term) is evaluated noise-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from . import numerics as nx
from .encoders import EncoderStack, LoraState, encode_image, encode_image_var
from .numerics import AdamState, NonFiniteError, Tape, Var

VARIANTS = ("grpo", "dr_grpo", "gmpo", "dapo", "liteppo")
REFERENCE_MODES = ("mix", "latest", "final_sft")


@dataclass(frozen=True)
class RlConfig:
    group_size: int = 3
    sigma: float = 0.1
    eps_clip: float = 0.2
    beta: float = 0.5
    variant: str = "grpo"
    eps_low: float | None = None
    eps_high: float | None = None
    epochs: int = 3
    sample_std: bool = False

    def validate(self) -> None:
        if self.group_size < 2:
            raise ValueError("rl.group_size must be >= 2")
        if not self.sigma > 0:
            raise ValueError("rl.sigma must be positive")
        if not 0 < self.eps_clip < 1:
            raise ValueError("rl.eps_clip must be in (0, 1)")
        if self.beta < 0:
            raise ValueError("rl.beta must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"rl.variant: unknown RL variant {self.variant!r}; expected one of {VARIANTS}")
        if self.epochs < 0:
            raise ValueError("rl.epochs must be >= 0")

    @property
    def clip_range(self) -> tuple[float, float]:
        if self.variant in ("gmpo", "dapo"):
            lo = self.eps_clip if self.eps_low is None else self.eps_low
            hi = self.eps_clip if self.eps_high is None else self.eps_high
            return 1 - lo, 1 + hi
        return 1 - self.eps_clip, 1 + self.eps_clip


@dataclass(frozen=True)
class PolicySnapshot:
    lora: Mapping[str, np.ndarray]
    role: str

    @classmethod
    def freeze(cls, lora: Mapping[str, np.ndarray], role: str) -> "PolicySnapshot":
        frozen = {}
        for k, v in lora.items():
            a = np.array(v, dtype=np.float64)
            a.flags.writeable = False
            frozen[k] = a
        return cls(MappingProxyType(frozen), role)


def build_reference(final_sft: Mapping[str, np.ndarray], latest: Mapping[str, np.ndarray],
                    mode: str = "mix") -> PolicySnapshot:
    if mode not in REFERENCE_MODES:
        raise ValueError(f"unknown reference mode {mode!r}")
    if final_sft.keys() != latest.keys() or any(final_sft[k].shape != latest[k].shape for k in latest):
        raise ValueError("reference sources have mismatched LoRA shapes")
    if mode == "mix":
        lora = {k: 0.5 * (final_sft[k] + latest[k]) for k in latest}
    elif mode == "latest":
        lora = dict(latest)
    else:
        lora = dict(final_sft)
    return PolicySnapshot.freeze(lora, "reference")


# ---------------------------------------------------------------- stage control

@dataclass
class StageController:
    eps_acc: float = 0.003
    patience: int = 2
    fixed_m: int | None = None
    history: list[float] = field(default_factory=list)
    stage: str = "SFT"
    transition_round: int | None = None

    def should_transition(self, acc: float) -> bool:
        """Record this round's client-mean accuracy; True once training looks stable."""
        if self.stage != "SFT":
            raise RuntimeError("stage controller consulted after the RL transition")
        self.history.append(float(acc))
        t = len(self.history)
        if self.fixed_m is not None:
            fire = t >= self.fixed_m
        else:
            h = self.history
            fire = t > self.patience and all(
                abs(h[-i] - h[-i - 1]) < self.eps_acc for i in range(1, self.patience + 1))
        if fire:
            self.stage = "RL"
            self.transition_round = t
        return fire


# ---------------------------------------------------------------- SFT

def _label_columns(y, class_ids) -> np.ndarray:
    col = {int(c): i for i, c in enumerate(class_ids)}
    try:
        return np.array([col[int(c)] for c in y], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]} is not among the candidate classes") from None


def _lora_vars(tape: Tape, lora: Mapping[str, np.ndarray]) -> dict[str, Var]:
    return {k: tape.param(v, k) for k, v in lora.items()}


def cross_entropy(z_img: Var, text_embs, cols, tau: float) -> Var:
    """Mean CE of similarity-softmax predictions; ``text_embs`` may be a Var."""
    if isinstance(text_embs, Var):
        sims = nx.matmul(z_img, text_embs.T)
    else:
        sims = nx.matmul(z_img, np.asarray(text_embs).T)
    return -nx.mean(nx.pick(nx.log_softmax(sims, tau), cols))


def sft_loss(stack: EncoderStack, lora: Mapping[str, np.ndarray], X, y, text_embs,
             class_ids, tau: float) -> tuple[Tape, Var]:
    tape = Tape()
    z = encode_image_var(stack, X, _lora_vars(tape, lora), tape)
    return tape, cross_entropy(z, text_embs, _label_columns(y, class_ids), tau)


@dataclass
class EpochResult:
    lora: LoraState
    loss: float
    accuracy: float
    skipped: int = 0


def sft_epoch(stack: EncoderStack, lora: Mapping[str, np.ndarray], X, y, text_embs, class_ids,
              tau: float, lr: float, bs: int, rng, adam: AdamState) -> EpochResult:
    """One shuffled pass of minibatch CE steps on the LoRA factors only."""
    lora = {k: v.copy() for k, v in lora.items()}
    cols_all = _label_columns(y, class_ids)
    order = rng.permutation(len(y))
    losses, correct, skipped = [], 0, 0
    for start in range(0, len(order), bs):
        b = order[start:start + bs]
        try:
            tape, loss = sft_loss(stack, lora, X[b], y[b], text_embs, class_ids, tau)
        except nx.DegenerateEmbeddingError:
            skipped += len(b)
            continue
        # accuracy of the pre-update prediction on this batch
        z = encode_image(stack, X[b], lora=lora)
        correct += int(np.sum(np.argmax(z @ np.asarray(text_embs).T, axis=1) == cols_all[b]))
        grads = nx.backward(tape, loss)
        lora = nx.adam_step(lora, grads, adam, lr)
        losses.append(float(loss.value) * len(b))
    n = max(len(y) - skipped, 1)
    return EpochResult(lora, sum(losses) / n, correct / n, skipped + adam.skipped)


# ---------------------------------------------------------------- RL pieces

@dataclass
class SampleGroup:
    """Per image (rows) and per draw (columns) sampling record."""

    actions: np.ndarray          # (bs, G) candidate-column indices
    noise: np.ndarray            # (bs, G, d)
    old_probs: np.ndarray        # (bs, G) pi_old(a | x, eps)
    rewards: np.ndarray | None = None
    advantages: np.ndarray | None = None

    @property
    def group_size(self) -> int:
        return self.actions.shape[1]


def noisy_probabilities(stack: EncoderStack, lora, X, noise, text_embs, tau: float) -> np.ndarray:
    """Class probabilities with latent noise; ``noise`` is (bs, G, d), returns (bs, G, C)."""
    z = stack.latent(X, lora)[:, None, :] + noise
    z = z / np.linalg.norm(z, axis=-1, keepdims=True)
    return nx.softmax_with_temperature(z @ np.asarray(text_embs).T, tau)


def sample_actions(stack: EncoderStack, old: PolicySnapshot, X, text_embs, tau: float,
                   group_size: int, sigma: float, rng) -> SampleGroup:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    X = np.asarray(X)
    noise = sigma * rng.standard_normal((X.shape[0], group_size, stack.d_out))
    probs = noisy_probabilities(stack, old.lora, X, noise, text_embs, tau)
    u = rng.random((X.shape[0], group_size, 1))
    cdf = np.cumsum(probs, axis=-1)
    actions = np.minimum((u > cdf).sum(axis=-1), probs.shape[-1] - 1)
    old_probs = np.take_along_axis(probs, actions[..., None], axis=-1)[..., 0]
    return SampleGroup(actions, noise, old_probs)


def compute_rewards(actions, labels) -> np.ndarray:
    actions = np.asarray(actions)
    labels = np.asarray(labels).reshape(-1, *([1] * (actions.ndim - 1)))
    return (actions == labels).astype(np.float64)


def group_advantages(rewards, variant: str = "grpo", sample_std: bool = False) -> np.ndarray:
    """Group-relative advantages; rows are images, columns the G draws."""
    r = np.asarray(rewards, dtype=np.float64)
    centred = r - r.mean(axis=1, keepdims=True)
    if variant == "dr_grpo":
        return centred
    ddof = 1 if sample_std else 0
    if variant == "liteppo":
        s = r.std(ddof=ddof) if r.size > ddof else 0.0
        return centred / s if s >= 1e-12 else np.zeros_like(r)
    if variant not in VARIANTS:
        raise ValueError(f"unknown RL variant {variant!r}")
    s = r.std(axis=1, ddof=ddof, keepdims=True)
    safe = np.where(s < 1e-12, 1.0, s)
    return np.where(s < 1e-12, 0.0, centred / safe)


def clipped_policy_term(ratio, adv, eps_clip: float = 0.2, lo=None, hi=None):
    """``min(ratio*A, clip(ratio, 1-eps, 1+eps)*A)`` on arrays or Vars."""
    lo = 1 - eps_clip if lo is None else lo
    hi = 1 + eps_clip if hi is None else hi
    if isinstance(ratio, Var):
        return nx.minimum(ratio * adv, nx.clip(ratio, lo, hi) * adv)
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, lo, hi) * adv)


def kl_estimate(p_ref, p_cur):
    """Non-negative ``q - ln q - 1`` with ``q = p_ref / p_cur``."""
    p_cur = np.asarray(p_cur, dtype=np.float64)
    if np.any(p_cur < 1e-300):
        raise NonFiniteError("kl_estimate: current-policy probability underflowed")
    q = np.asarray(p_ref, dtype=np.float64) / p_cur
    return q - np.log(q) - 1.0


def _kl_var(logp_ref: np.ndarray, logp_cur: Var) -> Var:
    log_q = logp_ref - logp_cur
    return nx.exp(log_q) - log_q - 1.0


def geometric_policy_term(m: Var, adv: np.ndarray) -> Var:
    """Signed geometric-mean aggregation over images, summed over draws.

    For each draw the positive- and negative-advantage images form separate
    products (a single product would vanish on any zero advantage); each
    geometric mean is weighted by its share of the batch and carries the
    sign of its advantages.
    """
    bs = adv.shape[0]
    # zero-advantage entries are masked out below; lift them to 1 so log stays finite
    log_abs = nx.log(nx.absolute(m) + (adv == 0).astype(np.float64))
    terms = []
    for sign in (1.0, -1.0):
        mask = (np.sign(adv) == sign).astype(np.float64)
        count = mask.sum(axis=0)
        active = count > 0
        if not active.any():
            continue
        # mean of log|m| over the masked rows of each column
        mean_log = nx.total(log_abs * mask, axis=0) * (1.0 / np.where(active, count, 1.0))
        gm = nx.exp(mean_log)
        terms.append(nx.total(gm * (sign * count / bs * active)))
    if not terms:
        return nx.total(m * 0.0)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def rl_objective(logp_cur: Var, group: SampleGroup, logp_ref: np.ndarray, cfg: RlConfig) -> Var:
    """Variant-specific RL loss from current log-probs of the sampled actions."""
    adv = group.advantages
    if adv is None:
        raise ValueError("advantages must be computed before the loss")
    bs, G = adv.shape
    ratio = nx.exp(logp_cur - np.log(group.old_probs))
    lo, hi = cfg.clip_range
    lp = clipped_policy_term(ratio, adv, lo=lo, hi=hi)
    kl = _kl_var(logp_ref, logp_cur)
    for name, v in (("ratio", ratio), ("policy term", lp), ("kl", kl)):
        if not np.all(np.isfinite(v.value)):
            raise NonFiniteError(f"non-finite {name} in RL loss")
    beta = cfg.beta
    if cfg.variant in ("grpo", "dapo", "liteppo"):
        # 1/G sum_j 1/bs sum_i equals 1/(sum_j bs_j) sum_j sum_i for equal batch sizes
        return -nx.mean(lp - kl * beta)
    if cfg.variant == "dr_grpo":
        return -nx.total(lp - kl * beta) * (1.0 / G)
    return -(geometric_policy_term(lp, adv) - nx.total(kl) * (beta / bs)) * (1.0 / G)


def action_log_probs(stack: EncoderStack, lora_vars: Mapping[str, Var], X, actions, text_embs,
                     tau: float, tape: Tape) -> Var:
    """Noise-free log pi(a_ij | x_i) for every draw, shape (bs, G)."""
    z = encode_image_var(stack, X, lora_vars, tape)
    logp = nx.log_softmax(nx.matmul(z, np.asarray(text_embs).T), tau)
    bs, G = actions.shape
    rows = np.repeat(np.arange(bs), G)
    picked = nx.pick(nx.take_rows(logp, rows), actions.reshape(-1))
    return _reshape(picked, (bs, G))


def _reshape(x: Var, shape) -> Var:
    old = x.shape
    return x.tape.record(x.value.reshape(shape), (x,),
                         lambda g: nx._accumulate(x, g.reshape(old)), "reshape")


def policy_log_probs(stack: EncoderStack, lora, X, actions, text_embs, tau: float) -> np.ndarray:
    z = encode_image(stack, X, lora=lora)
    p = nx.softmax_with_temperature(z @ np.asarray(text_embs).T, tau)
    return np.log(np.take_along_axis(p, actions, axis=1))


def rl_loss(stack: EncoderStack, lora: Mapping[str, np.ndarray], X, group: SampleGroup,
            reference: PolicySnapshot, text_embs, tau: float, cfg: RlConfig,
            logp_ref: np.ndarray | None = None) -> tuple[Tape, Var]:
    if logp_ref is None:
        logp_ref = policy_log_probs(stack, reference.lora, X, group.actions, text_embs, tau)
    tape = Tape()
    logp = action_log_probs(stack, _lora_vars(tape, lora), X, group.actions, text_embs, tau, tape)
    return tape, rl_objective(logp, group, logp_ref, cfg)


@dataclass
class RlBatchResult:
    lora: LoraState
    group: SampleGroup
    old: PolicySnapshot
    losses: list[float]
    accuracy: float


def rl_batch_update(stack: EncoderStack, lora: Mapping[str, np.ndarray], X, y, text_embs,
                    class_ids, tau: float, reference: PolicySnapshot, cfg: RlConfig,
                    lr: float, adam: AdamState, rng) -> RlBatchResult:
    """Freeze pi_old, sample once, then take ``cfg.epochs`` steps on that sample."""
    old = PolicySnapshot.freeze(lora, "old")
    cols = _label_columns(y, class_ids)
    group = sample_actions(stack, old, X, text_embs, tau, cfg.group_size, cfg.sigma, rng)
    group.rewards = compute_rewards(group.actions, cols)
    group.advantages = group_advantages(group.rewards, cfg.variant, cfg.sample_std)
    logp_ref = policy_log_probs(stack, reference.lora, X, group.actions, text_embs, tau)
    z = encode_image(stack, X, lora=old.lora)
    acc = float(np.mean(np.argmax(z @ np.asarray(text_embs).T, axis=1) == cols))
    lora = {k: np.array(v) for k, v in old.lora.items()}
    losses = []
    for _ in range(cfg.epochs):
        tape, loss = rl_loss(stack, lora, X, group, reference, text_embs, tau, cfg, logp_ref)
        grads = nx.backward(tape, loss)
        lora = nx.adam_step(lora, grads, adam, lr)
        losses.append(float(loss.value))
    return RlBatchResult(lora, group, old, losses, acc)


def rl_epoch(stack: EncoderStack, lora: Mapping[str, np.ndarray], X, y, text_embs, class_ids,
             tau: float, reference: PolicySnapshot, cfg: RlConfig, lr: float, bs: int, rng,
             adam: AdamState) -> EpochResult:
    lora = {k: v.copy() for k, v in lora.items()}
    order = rng.permutation(len(y))
    losses, acc_sum = [], 0.0
    for start in range(0, len(order), bs):
        b = order[start:start + bs]
        res = rl_batch_update(stack, lora, X[b], y[b], text_embs, class_ids, tau, reference,
                              cfg, lr, adam, rng)
        lora = res.lora
        if res.losses:
            losses.append(float(np.mean(res.losses)) * len(b))
        acc_sum += res.accuracy * len(b)
    n = max(len(y), 1)
    return EpochResult(lora, sum(losses) / n, acc_sum / n, adam.skipped)
