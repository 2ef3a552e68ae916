"""Synthetic vision-language task and federated partitions.

Samples are noisy copies of per-class prototypes, optionally pushed through
a per-domain affine map. Only base classes are ever partitioned to clients;
novel classes live in the test split alone.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .encoders import ClassTextBank


@dataclass(frozen=True)
class DataSpec:
    num_classes: int = 32
    base_fraction: float = 0.5
    samples_per_class: int = 100
    test_per_class: int = 200
    dim: int = 16
    noise: float = 0.2
    # norm of a class-specific offset between the image-side class centre and the
    # class-name vector; 0 gives perfectly aligned prototypes
    align_gap: float = 1.5
    num_domains: int = 1
    domain_mix: float = 0.5
    domain_shift: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if not 0 < self.base_fraction <= 1:
            raise ValueError(f"base_fraction must be in (0, 1], got {self.base_fraction}")
        if self.base_fraction * self.num_classes < 1:
            raise ValueError("base_fraction * num_classes must be at least 1")
        if self.noise < 0 or self.align_gap < 0:
            raise ValueError("noise and align_gap must be non-negative")
        if self.num_domains < 1 or self.samples_per_class < 1 or self.test_per_class < 0:
            raise ValueError("num_domains and samples_per_class must be positive")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    domain: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, mask_or_idx) -> "Dataset":
        return Dataset(self.X[mask_or_idx], self.y[mask_or_idx], self.domain[mask_or_idx],
                       self.ids[mask_or_idx])

    def restrict(self, classes) -> "Dataset":
        return self.subset(np.isin(self.y, list(classes)))

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.y))


@dataclass
class DomainTransform:
    matrix: np.ndarray
    shift: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        return X @ self.matrix.T + self.shift


@dataclass
class SyntheticTask:
    spec: DataSpec
    train: Dataset
    test: Dataset
    bank: ClassTextBank
    prototypes: np.ndarray
    transforms: list[DomainTransform]
    base: list[int] = field(default_factory=list)
    novel: list[int] = field(default_factory=list)


def split_base_novel(num_classes: int, fraction: float) -> tuple[list[int], list[int]]:
    if fraction * num_classes < 1:
        raise ValueError("fraction * num_classes must be at least 1")
    n_base = min(num_classes, math.ceil(fraction * num_classes - 1e-9))
    return list(range(n_base)), list(range(n_base, num_classes))


def _domain_transforms(spec: DataSpec, rng) -> list[DomainTransform]:
    if spec.num_domains == 1:
        return [DomainTransform(np.eye(spec.dim), np.zeros(spec.dim))]
    out = []
    for _ in range(spec.num_domains):
        q, r = np.linalg.qr(rng.standard_normal((spec.dim, spec.dim)))
        q = q * np.sign(np.diag(r))
        m = (1 - spec.domain_mix) * np.eye(spec.dim) + spec.domain_mix * q
        b = rng.standard_normal(spec.dim)
        b *= spec.domain_shift / np.linalg.norm(b)
        out.append(DomainTransform(m, b))
    return out


def generate_synthetic(spec: DataSpec) -> SyntheticTask:
    """Build train/test splits and the class-name bank from ``spec`` alone."""
    spec.validate()
    bank = ClassTextBank.generate(spec.num_classes, spec.dim, spec.seed)
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    offsets = rng.standard_normal((spec.num_classes, spec.dim))
    offsets *= spec.align_gap / np.linalg.norm(offsets, axis=1, keepdims=True)
    prototypes = bank.vectors + offsets
    transforms = _domain_transforms(spec, rng)

    def draw(per_class: int, id_offset: int) -> Dataset:
        n = spec.num_classes * spec.num_domains * per_class
        y = np.repeat(np.arange(spec.num_classes), spec.num_domains * per_class)
        dom = np.tile(np.repeat(np.arange(spec.num_domains), per_class), spec.num_classes)
        X = prototypes[y] + spec.noise * rng.standard_normal((n, spec.dim))
        for d, tf in enumerate(transforms):
            m = dom == d
            X[m] = tf.apply(X[m])
        return Dataset(X, y, dom, np.arange(n) + id_offset)

    train = draw(spec.samples_per_class, 0)
    test = draw(spec.test_per_class, len(train))
    base, novel = split_base_novel(spec.num_classes, spec.base_fraction)
    return SyntheticTask(spec, train, test, bank, prototypes, transforms, base, novel)


# ---------------------------------------------------------------- partitions

SCHEMES = ("iid", "dirichlet", "noniid_disjoint", "feature_shift")
WITHIN = ("one", "iid", "dirichlet")


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str = "noniid_disjoint"
    num_clients: int = 5
    alpha: float = 0.5
    within: str = "one"
    clients_per_domain: int = 1
    shots: int | None = None

    def validate(self, num_domains: int = 1) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not self.alpha > 0:
            raise ValueError("dirichlet alpha must be positive")
        if self.shots is not None and self.shots < 1:
            raise ValueError("shots must be >= 1")
        if self.scheme == "feature_shift":
            if self.within not in WITHIN:
                raise ValueError(f"unknown within-domain scheme {self.within!r}")
            if self.within == "one" and self.clients_per_domain != 1:
                raise ValueError("within=one assigns a whole domain to one client")
            if self.num_clients != num_domains * self.clients_per_domain:
                raise ValueError(f"feature_shift needs num_clients = domains*clients_per_domain "
                                 f"= {num_domains * self.clients_per_domain}, got {self.num_clients}")


class PartitionError(ValueError):
    pass


def _iid(idx: np.ndarray, k: int, rng) -> list[np.ndarray]:
    return [np.sort(p) for p in np.array_split(rng.permutation(idx), k)]


def _dirichlet(idx: np.ndarray, labels: np.ndarray, k: int, alpha: float, rng) -> list[np.ndarray]:
    parts: list[list[np.ndarray]] = [[] for _ in range(k)]
    for c in np.unique(labels):
        members = rng.permutation(idx[labels == c])
        share = rng.dirichlet(np.full(k, alpha))
        counts = rng.multinomial(len(members), share)
        for client, chunk in enumerate(np.split(members, np.cumsum(counts)[:-1])):
            parts[client].append(chunk)
    return [np.sort(np.concatenate(p)) if p else np.array([], dtype=np.int64) for p in parts]


def disjoint_class_sets(classes: list[int], k: int) -> list[list[int]]:
    q = len(classes) // k
    sets = [list(classes[i * q:(i + 1) * q]) for i in range(k)]
    for j, c in enumerate(classes[k * q:]):
        sets[j % k].append(c)
    return sets


def _partition_once(data: Dataset, spec: PartitionSpec, rng) -> list[np.ndarray]:
    idx = np.arange(len(data))
    k = spec.num_clients
    if spec.scheme == "iid":
        return _iid(idx, k, rng)
    if spec.scheme == "dirichlet":
        return _dirichlet(idx, data.y, k, spec.alpha, rng)
    if spec.scheme == "noniid_disjoint":
        return [idx[np.isin(data.y, s)] for s in disjoint_class_sets(data.classes, k)]
    shards = []
    for d in sorted(np.unique(data.domain)):
        dom_idx = idx[data.domain == d]
        if spec.within == "one":
            shards.append(dom_idx)
        elif spec.within == "iid":
            shards.extend(_iid(dom_idx, spec.clients_per_domain, rng))
        else:
            shards.extend(_dirichlet(dom_idx, data.y[dom_idx], spec.clients_per_domain, spec.alpha, rng))
    return shards


def partition(data: Dataset, spec: PartitionSpec, seed: int) -> list[Dataset]:
    """Split ``data`` into ``spec.num_clients`` disjoint non-empty shards."""
    spec.validate(len(np.unique(data.domain)))
    for attempt in range(10):
        rng = np.random.default_rng([seed, 0x9A27, attempt])
        parts = _partition_once(data, spec, rng)
        if len(parts) == spec.num_clients and all(len(p) for p in parts):
            shards = [data.subset(p) for p in parts]
            if spec.shots is not None:
                shards = [few_shot_subsample(s, spec.shots, seed * 1000 + i) for i, s in enumerate(shards)]
            return shards
    raise PartitionError(f"{spec.scheme} partition left an empty shard after 10 attempts "
                         f"(K={spec.num_clients}, n={len(data)}); lower K or raise alpha")


def few_shot_subsample(shard: Dataset, shots: int, seed: int) -> Dataset:
    if shots < 1:
        raise ValueError("shots must be >= 1")
    rng = np.random.default_rng([seed, 0x5407])
    keep = []
    for c in shard.classes:
        members = np.flatnonzero(shard.y == c)
        if len(members) > shots:
            members = np.sort(rng.choice(members, size=shots, replace=False))
        keep.append(members)
    return shard.subset(np.sort(np.concatenate(keep)))


def partition_counts_csv(shards: list[Dataset]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["client_id", "class_id", "count"])
    for k, s in enumerate(shards):
        classes, counts = np.unique(s.y, return_counts=True)
        for c, n in zip(classes, counts):
            w.writerow([k, int(c), int(n)])
    return buf.getvalue()

