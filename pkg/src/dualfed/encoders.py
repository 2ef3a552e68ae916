"""Dual MLP encoders with LoRA on the deeper layers.

Both towers map into one unit-norm latent space; classification is a
temperature softmax over cosine similarities between an image embedding
and the per-class text embeddings.

LoRA parameters are kept outside the stack as a flat ``{"<layer>.A": ...,
"<layer>.B": ...}`` dict so that clients, the server and the reference
policy can hold different deltas over the same frozen weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .numerics import (Array, DegenerateEmbeddingError, Tape, Var, l2_normalize, matmul,
                       softmax_with_temperature, tanh)

LoraState = dict[str, Array]


def _frozen(a: Array) -> Array:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass
class LoraLinear:
    """``y = (W0 + B A) x`` with ``W0`` frozen. ``A``/``B`` are None on plain frozen layers."""

    W0: Array
    A: Array | None = None
    B: Array | None = None

    def __post_init__(self):
        self.W0 = _frozen(self.W0)
        if (self.A is None) != (self.B is None):
            raise ValueError("A and B must both be set or both be None")
        if self.A is not None:
            d1, d2 = self.W0.shape
            r = self.A.shape[0]
            if self.A.shape != (r, d2) or self.B.shape != (d1, r):
                raise ValueError(f"LoRA shapes A{self.A.shape} B{self.B.shape} do not fit W0{self.W0.shape}")
            if r > min(d1, d2) / 2:
                raise ValueError(f"rank {r} too large for a {d1}x{d2} layer (max {min(d1, d2) // 2})")

    @property
    def rank(self) -> int:
        return 0 if self.A is None else self.A.shape[0]

    @property
    def has_lora(self) -> bool:
        return self.A is not None


def lora_forward(layer: LoraLinear, x) -> Array:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.W0.shape[1]:
        raise ValueError(f"input has {x.shape[-1]} features, layer expects {layer.W0.shape[1]} (W0 {layer.W0.shape})")
    y = x @ layer.W0.T
    if layer.has_lora:
        y = y + (x @ layer.A.T) @ layer.B.T
    return y


@dataclass
class EncoderStack:
    layers: list[LoraLinear]

    def __post_init__(self):
        for i in range(1, len(self.layers)):
            if self.layers[i].W0.shape[1] != self.layers[i - 1].W0.shape[0]:
                raise ValueError(f"layer {i} input dim does not chain with layer {i - 1}")

    @property
    def d_in(self) -> int:
        return self.layers[0].W0.shape[1]

    @property
    def d_out(self) -> int:
        return self.layers[-1].W0.shape[0]

    @property
    def lora_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.has_lora]

    def lora_state(self) -> LoraState:
        out = {}
        for i in self.lora_layers:
            out[f"{i}.A"] = self.layers[i].A.copy()
            out[f"{i}.B"] = self.layers[i].B.copy()
        return out

    def load_lora(self, state: Mapping[str, Array]) -> None:
        for i in self.lora_layers:
            A, B = np.asarray(state[f"{i}.A"]), np.asarray(state[f"{i}.B"])
            if A.shape != self.layers[i].A.shape or B.shape != self.layers[i].B.shape:
                raise ValueError(f"LoRA state shape mismatch at layer {i}")
            self.layers[i].A = np.array(A, dtype=np.float64)
            self.layers[i].B = np.array(B, dtype=np.float64)

    def copy(self) -> "EncoderStack":
        # frozen weights are shared, LoRA factors are copied
        return EncoderStack([LoraLinear(l.W0, None if l.A is None else l.A.copy(),
                                        None if l.B is None else l.B.copy()) for l in self.layers])

    def latent(self, x, lora: Mapping[str, Array] | None = None) -> Array:
        """Pre-normalization output for a vector or a row batch."""
        h = np.asarray(x, dtype=np.float64)
        if h.shape[-1] != self.d_in:
            raise ValueError(f"input has {h.shape[-1]} features, encoder expects {self.d_in}")
        for i, layer in enumerate(self.layers):
            if i > 0:
                h = np.tanh(h)
            h2 = h @ layer.W0.T
            if layer.has_lora:
                A = layer.A if lora is None else lora[f"{i}.A"]
                B = layer.B if lora is None else lora[f"{i}.B"]
                h2 = h2 + (h @ A.T) @ B.T
            h = h2
        return h

    def latent_var(self, x: Var, lora: Mapping[str, Var]) -> Var:
        """Same computation as :meth:`latent`, recorded on ``x.tape``."""
        h = x
        for i, layer in enumerate(self.layers):
            if i > 0:
                h = tanh(h)
            out = matmul(h, layer.W0.T)
            if layer.has_lora:
                out = out + matmul(matmul(h, lora[f"{i}.A"].T), lora[f"{i}.B"].T)
            h = out
        return h


def _normalize(z: Array, min_norm: float = 1e-12) -> Array:
    n = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(n < min_norm):
        raise DegenerateEmbeddingError(f"latent norm below {min_norm}")
    return z / n


def encode_image(enc: EncoderStack, x, noise=None, lora: Mapping[str, Array] | None = None) -> Array:
    """Unit image embedding; ``noise`` is added to the latent before normalization."""
    z = enc.latent(x, lora)
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape[-1] != enc.d_out:
            raise ValueError(f"noise dim {noise.shape[-1]} != embedding dim {enc.d_out}")
        z = z + noise
    return _normalize(z)


def encode_image_var(enc: EncoderStack, x, lora: Mapping[str, Var], tape: Tape) -> Var:
    return l2_normalize(enc.latent_var(tape.const(x), lora))


@dataclass
class ClassTextBank:
    """Fixed unit 'class name' vectors, one row per class id."""

    vectors: Array
    seed: int = 0

    @classmethod
    def generate(cls, num_classes: int, dim: int, seed: int) -> "ClassTextBank":
        rng = np.random.default_rng([seed, 0x7E47])
        v = rng.standard_normal((num_classes, dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return cls(_frozen(v), seed)

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]

    def __getitem__(self, class_id) -> Array:
        ids = np.atleast_1d(class_id)
        if np.any(ids < 0) or np.any(ids >= self.num_classes):
            raise KeyError(f"unknown class id {class_id}")
        return self.vectors[class_id]


def encode_text(enc: EncoderStack, bank: ClassTextBank, class_id,
                lora: Mapping[str, Array] | None = None) -> Array:
    return _normalize(enc.latent(bank[class_id], lora))


def encode_text_var(enc: EncoderStack, bank: ClassTextBank, class_ids,
                    lora: Mapping[str, Var], tape: Tape) -> Var:
    return l2_normalize(enc.latent_var(tape.const(bank[np.asarray(class_ids)]), lora))


def class_probabilities(z_img, text_embs, tau: float) -> Array:
    """Softmax over cosine similarities; rows of ``text_embs`` are classes."""
    sims = np.asarray(z_img) @ np.asarray(text_embs).T
    return softmax_with_temperature(sims, tau)


@dataclass
class DualEncoder:
    image: EncoderStack
    text: EncoderStack
    tau: float = 0.05
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.d_out != self.text.d_out:
            raise ValueError("image and text towers must share the embedding dimension")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


def _make_stack(rng, dims: list[int], rank: int, lora_start: int, scale: float,
                lora_init: float | None) -> EncoderStack:
    layers = []
    for i in range(len(dims) - 1):
        d2, d1 = dims[i], dims[i + 1]
        W0 = np.eye(d1, d2) + scale * rng.standard_normal((d1, d2))
        if i >= lora_start and rank > 0:
            std = 1 / np.sqrt(d2) if lora_init is None else lora_init
            A = std * rng.standard_normal((rank, d2))
            B = np.zeros((d1, rank))
            layers.append(LoraLinear(W0, A, B))
        else:
            layers.append(LoraLinear(W0))
    return EncoderStack(layers)


def init_pretrained_like(seed: int, dim: int = 16, hidden: int = 16, n_layers: int = 2,
                         rank: int = 4, lora_start: int = 1, scale: float = 0.02,
                         tau: float = 0.05, lora_init: float | None = None) -> DualEncoder:
    """Near-identity frozen towers standing in for an aligned pre-trained model.

    With ``scale=0`` both towers are exact identities (up to the tanh between
    layers, which preserves direction only approximately).
    """
    if n_layers < 1:
        raise ValueError("need at least one layer")
    if lora_start >= n_layers:
        raise ValueError(f"lora_start={lora_start} leaves no LoRA layer in a {n_layers}-layer stack")
    dims = [dim] + [hidden] * (n_layers - 1) + [dim]
    rng = np.random.default_rng([seed, 0xE1C])
    image = _make_stack(rng, dims, rank, lora_start, scale, lora_init)
    text = _make_stack(rng, dims, rank, lora_start, scale, lora_init)
    return DualEncoder(image, text, tau)
