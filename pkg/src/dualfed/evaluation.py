"""Accuracy metrics for the global model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import EncoderStack, encode_image


def harmonic_mean(base: float, novel: float) -> float:
    if base < 0 or novel < 0:
        raise ValueError("accuracies must be non-negative")
    if base + novel == 0:
        return 0.0
    return 2 * base * novel / (base + novel)


def predict(z_img: np.ndarray, text_embs: np.ndarray, candidates) -> np.ndarray:
    """Argmax class id among ``candidates``; ties go to the lowest id.

    The softmax is monotone in the similarities, so the argmax does not
    depend on the temperature and is taken on raw similarities.
    """
    cand = np.sort(np.asarray(list(candidates), dtype=np.int64))
    if cand.size == 0:
        raise ValueError("candidate class set is empty")
    sims = z_img @ text_embs[cand].T
    return cand[np.argmax(sims, axis=1)]


def accuracy(stack: EncoderStack, lora, text_embs: np.ndarray, X, y, candidates) -> float | None:
    """Fraction of samples whose best candidate is the label; None on an empty set."""
    y = np.asarray(y)
    if y.size == 0:
        return None
    if not set(np.unique(y).tolist()) <= set(int(c) for c in candidates):
        raise ValueError("sample labels must be a subset of the candidate classes")
    z = encode_image(stack, X, lora=lora)
    return float(np.mean(predict(z, text_embs, candidates) == y))


@dataclass
class RoundMetrics:
    round: int
    stage: str
    train_acc: list[float]
    local_acc: float | None
    base_acc: float | None
    novel_acc: float | None
    hm: float | None
    domain_acc: dict[int, float] = field(default_factory=dict)
    train_loss: float | None = None
    text_loss: float | None = None
    skipped_steps: int = 0

    @property
    def train_acc_mean(self) -> float | None:
        return float(np.mean(self.train_acc)) if self.train_acc else None


def evaluate_global(stack: EncoderStack, lora, text_embs: np.ndarray, test, base, novel,
                    client_views: list[tuple[list[int], list[int]]]) -> dict:
    """Local/base/novel accuracies plus per-domain base accuracy.

    ``client_views`` holds (classes, domains) per client; local accuracy uses the
    test samples matching both and candidates restricted to the client's classes,
    averaged uniformly over clients.
    """
    base_set = test.restrict(base)
    novel_set = test.restrict(novel)
    b = accuracy(stack, lora, text_embs, base_set.X, base_set.y, base)
    n = accuracy(stack, lora, text_embs, novel_set.X, novel_set.y, novel) if novel else None
    locals_ = []
    for classes, domains in client_views:
        m = np.isin(test.y, classes) & np.isin(test.domain, domains)
        a = accuracy(stack, lora, text_embs, test.X[m], test.y[m], classes)
        if a is not None:
            locals_.append(a)
    dom = {}
    if len(np.unique(test.domain)) > 1:
        for d in sorted(np.unique(base_set.domain)):
            m = base_set.domain == d
            dom[int(d)] = accuracy(stack, lora, text_embs, base_set.X[m], base_set.y[m], base)
    hm = harmonic_mean(b, n) if (b is not None and n is not None) else None
    return {"local_acc": float(np.mean(locals_)) if locals_ else None, "base_acc": b,
            "novel_acc": n, "hm": hm, "domain_acc": dom}
