"""Server/client orchestration: broadcast, local updates, weighted LoRA
averaging for the image tower and server-side training of the text tower
on uploaded embeddings.

All client->server traffic goes through :class:`Channel` as bytes in the
formats of :mod:`dualfed.wire`; the channel refuses any other message kind.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from . import wire
from .config import RunConfig, UploadConfig
from .data import Dataset
from .encoders import ClassTextBank, DualEncoder, EncoderStack, LoraState, encode_image, encode_text_var
from .local_training import (PolicySnapshot, StageController, build_reference, cross_entropy, rl_epoch,
                             sft_epoch, _lora_vars)
from .numerics import AdamState, Tape

log = logging.getLogger(__name__)

UPLINK_KINDS = ("lora", "embeddings", "report")


class PrivacyViolation(RuntimeError):
    pass


class ClientFailure(RuntimeError):
    def __init__(self, client_id: int, cause: BaseException):
        super().__init__(f"client {client_id} failed: {cause}")
        self.client_id = client_id


@dataclass
class Channel:
    """In-process transport. Every uplink message is audited before delivery."""

    base_classes: frozenset[int]
    log: list[tuple[str, int, str, int]] = field(default_factory=list)
    hooks: list[Callable[[int, str, bytes], None]] = field(default_factory=list)

    def uplink(self, client_id: int, kind: str, payload: bytes) -> bytes:
        if kind not in UPLINK_KINDS:
            raise PrivacyViolation(f"client {client_id} tried to send a {kind!r} message")
        if not isinstance(payload, bytes):
            raise PrivacyViolation("uplink payloads must be serialized bytes")
        # decoding validates the format; raw features have no encoder and cannot pass
        if kind == "lora":
            wire.decode_lora_matrices(payload)
        elif kind == "embeddings":
            emb, labels = wire.decode_embeddings(payload)
            if not set(labels.tolist()) <= self.base_classes:
                raise PrivacyViolation(f"client {client_id} uploaded non-base class labels")
        else:
            wire.decode_report(payload)
        for hook in self.hooks:
            hook(client_id, kind, payload)
        self.log.append(("up", client_id, kind, len(payload)))
        return payload

    def downlink(self, kind: str, payload: bytes) -> bytes:
        self.log.append(("down", -1, kind, len(payload)))
        return payload


# ---------------------------------------------------------------- aggregation

def aggregate_lora(deltas: Sequence[Mapping[str, np.ndarray]], sizes: Sequence[int]) -> LoraState:
    """Sample-size weighted average, applied independently to every matrix."""
    if not deltas:
        raise ValueError("nothing to aggregate")
    total = float(sum(sizes))
    if total <= 0:
        raise ValueError("total sample count must be positive")
    keys = deltas[0].keys()
    for d in deltas[1:]:
        if d.keys() != keys or any(d[k].shape != deltas[0][k].shape for k in keys):
            raise ValueError("client LoRA deltas have mismatched shapes")
    out = {}
    for k in keys:
        acc = np.zeros_like(deltas[0][k])
        for d, n in zip(deltas, sizes):
            acc = acc + (n / total) * d[k]
        out[k] = acc
    return out


# ---------------------------------------------------------------- uploads

def select_upload_embeddings(emb: np.ndarray, labels: np.ndarray, policy: UploadConfig,
                             rng) -> tuple[np.ndarray, np.ndarray]:
    """Apply subsampling (ratio / per-class cap) then the privacy transform."""
    emb, labels = np.asarray(emb), np.asarray(labels)
    idx = np.arange(len(labels))
    if policy.ratio < 1.0:
        n = math.ceil(policy.ratio * len(idx))
        idx = np.sort(rng.choice(idx, size=n, replace=False))
    if policy.per_class_cap is not None:
        keep = []
        for c in np.unique(labels[idx]):
            members = idx[labels[idx] == c]
            if len(members) > policy.per_class_cap:
                members = np.sort(rng.choice(members, size=policy.per_class_cap, replace=False))
            keep.append(members)
        idx = np.sort(np.concatenate(keep)) if keep else idx[:0]
    emb, labels = emb[idx], labels[idx]
    if policy.groups is not None:
        out_e, out_l = [], []
        for c in np.unique(labels):
            members = rng.permutation(np.flatnonzero(labels == c))
            for g in np.array_split(members, min(policy.groups, len(members))):
                out_e.append(emb[g].mean(axis=0))
                out_l.append(c)
        emb = np.array(out_e).reshape(len(out_l), emb.shape[1])
        labels = np.array(out_l, dtype=np.int64)
    if policy.noise_sigma > 0:
        emb = emb + policy.noise_sigma * rng.standard_normal(emb.shape)
    return emb, labels


# ---------------------------------------------------------------- state

@dataclass
class ClientState:
    client_id: int
    shard: Dataset
    stack: EncoderStack
    lora: LoraState = field(default_factory=dict)
    train_acc: float | None = None

    @property
    def num_samples(self) -> int:
        return len(self.shard)

    @property
    def classes(self) -> list[int]:
        return self.shard.classes

    @property
    def domains(self) -> list[int]:
        return sorted(int(d) for d in np.unique(self.shard.domain))


@dataclass
class ServerState:
    model: DualEncoder
    bank: ClassTextBank
    base: list[int]
    global_lora: LoraState
    text_lora: LoraState
    controller: StageController
    text_embs: np.ndarray = None
    text_version: int = 0
    sft_checkpoint: LoraState | None = None
    round: int = 0
    text_adam: AdamState = field(default_factory=AdamState)

    def __post_init__(self):
        if self.text_embs is None:
            self.refresh_text()

    def refresh_text(self) -> None:
        z = self.model.text.latent(self.bank.vectors, self.text_lora)
        self.text_embs = z / np.linalg.norm(z, axis=1, keepdims=True)
        self.text_version += 1

    def set_sft_checkpoint(self, lora: Mapping[str, np.ndarray]) -> None:
        if self.sft_checkpoint is not None:
            raise RuntimeError("SFT checkpoint is already fixed")
        self.sft_checkpoint = PolicySnapshot.freeze(lora, "final_sft").lora


def server_text_update(server: ServerState, emb: np.ndarray, labels: np.ndarray, lr: float,
                       bs: int, rng, epochs: int = 1) -> float | None:
    """Minibatch CE on uploaded embeddings, moving only the text LoRA."""
    if len(labels) == 0:
        log.warning("no embeddings uploaded; text encoder left unchanged")
        return None
    if not set(np.unique(labels).tolist()) <= set(server.base):
        raise ValueError("text update received non-base labels")
    col = {c: i for i, c in enumerate(server.base)}
    cols_all = np.array([col[int(c)] for c in labels])
    lora = {k: v.copy() for k, v in server.text_lora.items()}
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for start in range(0, len(order), bs):
            b = order[start:start + bs]
            tape, loss = text_loss(server.model.text, server.bank, server.base, lora, emb[b],
                                   cols_all[b], server.model.tau)
            grads = nx.backward(tape, loss)
            lora = nx.adam_step(lora, grads, server.text_adam, lr)
            losses.append(float(loss.value) * len(b))
    server.text_lora = lora
    server.refresh_text()
    return sum(losses) / (len(labels) * max(epochs, 1)) if losses else None


def text_loss(text: EncoderStack, bank: ClassTextBank, base: Sequence[int], lora: Mapping[str, np.ndarray],
              emb: np.ndarray, cols: np.ndarray, tau: float) -> tuple[Tape, nx.Var]:
    """CE of fixed image embeddings against trainable base-class text embeddings."""
    tape = Tape()
    t = encode_text_var(text, bank, list(base), _lora_vars(tape, lora), tape)
    return tape, cross_entropy(tape.const(emb), t, cols, tau)


# ---------------------------------------------------------------- rounds

@dataclass
class Broadcast:
    global_lora: bytes
    text_embs: bytes
    reference: bytes | None
    stage: str
    text_version: int


@dataclass
class ClientResult:
    client_id: int
    messages: dict[str, bytes]
    loss: float
    skipped: int


def client_rng(seed: int, client_id: int, t: int, stream: int = 0):
    return np.random.default_rng([seed, client_id, t, stream])


def local_update(client: ClientState, bc: Broadcast, cfg: RunConfig, base: list[int], t: int) -> ClientResult:
    """Runs entirely on client-owned state plus the immutable broadcast."""
    keys = list(client.stack.lora_state())
    lora = wire.decode_lora(bc.global_lora, keys)
    text_all, text_ids = wire.decode_embeddings(bc.text_embs)
    text_embs = text_all[np.searchsorted(text_ids, base)]
    rng = client_rng(cfg.seed, client.client_id, t)
    adam = AdamState()
    X, y = client.shard.X, client.shard.y
    tau, tr = cfg.model.tau, cfg.train
    if bc.stage == "SFT":
        res = None
        for _ in range(tr.epochs_sft):
            res = sft_epoch(client.stack, lora, X, y, text_embs, base, tau, tr.lr, tr.batch_size, rng, adam)
            lora = res.lora
        if res is None:
            z = encode_image(client.stack, X, lora=lora)
            acc = float(np.mean(np.asarray(base)[np.argmax(z @ text_embs.T, axis=1)] == y))
            loss, skipped = float("nan"), 0
        else:
            acc, loss, skipped = res.accuracy, res.loss, res.skipped
    else:
        ref = PolicySnapshot.freeze(wire.decode_lora(bc.reference, keys), "reference")
        res = rl_epoch(client.stack, lora, X, y, text_embs, base, tau, ref, cfg.rl, tr.lr,
                       tr.batch_size, rng, adam)
        lora, acc, loss, skipped = res.lora, res.accuracy, res.loss, res.skipped
    client.lora = lora
    client.train_acc = acc
    messages = {"lora": wire.encode_lora(lora),
                "report": wire.encode_report(acc, client.num_samples)}
    if cfg.train.decoupled:
        emb = encode_image(client.stack, X, lora=lora)
        up_e, up_l = select_upload_embeddings(emb, y, cfg.upload, client_rng(cfg.seed, client.client_id, t, 1))
        messages["embeddings"] = wire.encode_embeddings(up_e, up_l)
    return ClientResult(client.client_id, messages, loss, skipped)


@dataclass
class RoundOutcome:
    stage: str
    train_acc: list[float]
    train_loss: float
    text_loss: float | None
    skipped: int
    transitioned: bool


def make_broadcast(server: ServerState, cfg: RunConfig, channel: Channel, stage: str) -> Broadcast:
    ref = None
    if stage == "RL":
        ref = build_reference(server.sft_checkpoint, server.global_lora, cfg.train.reference).lora
        ref = channel.downlink("reference", wire.encode_lora(ref))
    ids = np.arange(server.bank.num_classes)
    return Broadcast(channel.downlink("lora", wire.encode_lora(server.global_lora)),
                     channel.downlink("text", wire.encode_embeddings(server.text_embs, ids)),
                     ref, stage, server.text_version)


def participants(cfg: RunConfig, n_clients: int, t: int) -> list[int]:
    if cfg.train.participation >= 1.0:
        return list(range(n_clients))
    m = max(1, math.ceil(cfg.train.participation * n_clients))
    rng = np.random.default_rng([cfg.seed, 0xC11E, t])
    return sorted(rng.choice(n_clients, size=m, replace=False).tolist())


def run_round(server: ServerState, clients: list[ClientState], cfg: RunConfig, t: int,
              channel: Channel, pool: ThreadPoolExecutor | None = None) -> RoundOutcome:
    if t < 1:
        raise ValueError("rounds are numbered from 1")
    stage = server.controller.stage
    bc = make_broadcast(server, cfg, channel, stage)
    active = [clients[k] for k in participants(cfg, len(clients), t)]

    def work(c: ClientState) -> ClientResult:
        try:
            return local_update(c, bc, cfg, server.base, t)
        except Exception as exc:  # the round aborts naming the client
            raise ClientFailure(c.client_id, exc) from exc

    results = list(pool.map(work, active)) if pool is not None else [work(c) for c in active]

    keys = list(server.global_lora)
    deltas, sizes, accs, embs, labels = [], [], [], [], []
    for r in results:
        msgs = {kind: channel.uplink(r.client_id, kind, payload) for kind, payload in r.messages.items()}
        deltas.append(wire.decode_lora(msgs["lora"], keys))
        acc, n = wire.decode_report(msgs["report"])
        sizes.append(n)
        accs.append(acc)
        if "embeddings" in msgs:
            e, l = wire.decode_embeddings(msgs["embeddings"])
            embs.append(e)
            labels.append(l)
    server.global_lora = aggregate_lora(deltas, sizes)

    text_loss_value = None
    if cfg.train.decoupled and cfg.train.server_epochs > 0:
        dim = server.text_embs.shape[1]
        all_e = np.concatenate([e.reshape(-1, dim) for e in embs]) if embs else np.zeros((0, dim))
        all_l = np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)
        text_loss_value = server_text_update(server, all_e, all_l, cfg.train.lr, cfg.train.batch_size,
                                             np.random.default_rng([cfg.seed, 0x5E7, t]),
                                             cfg.train.server_epochs)
    server.round = t

    transitioned = False
    if (stage == "SFT" and cfg.train.schedule == "sft_rl"
            and server.controller.should_transition(float(np.mean(accs)))):
        server.set_sft_checkpoint(server.global_lora)
        transitioned = True
    losses = [r.loss for r in results if np.isfinite(r.loss)]
    return RoundOutcome(stage, accs, float(np.mean(losses)) if losses else float("nan"),
                        text_loss_value, sum(r.skipped for r in results), transitioned)
