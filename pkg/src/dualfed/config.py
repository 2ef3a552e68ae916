"""Run configuration and the flat ``section.key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import DataSpec, PartitionSpec
from .local_training import REFERENCE_MODES, RlConfig

SCHEDULES = ("sft_rl", "sft_only", "rl_only")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 16
    hidden: int = 16
    layers: int = 2
    rank: int = 4
    lora_start: int = 1
    init_scale: float = 0.02
    tau: float = 0.05
    # std of the LoRA A factor at init; None means 1/sqrt(fan_in)
    lora_init: float | None = 1.0


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 20
    epochs_sft: int = 2
    lr: float = 1e-3
    batch_size: int = 64
    server_epochs: int = 1
    schedule: str = "sft_rl"
    reference: str = "mix"
    decoupled: bool = True
    participation: float = 1.0
    workers: int = 1


@dataclass(frozen=True)
class StageConfig:
    eps_acc: float = 0.003
    patience: int = 2
    fixed_m: int | None = None


@dataclass(frozen=True)
class UploadConfig:
    ratio: float = 1.0
    per_class_cap: int | None = None
    noise_sigma: float = 0.0
    groups: int | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataSpec = field(default_factory=DataSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    stage: StageConfig = field(default_factory=StageConfig)
    upload: UploadConfig = field(default_factory=UploadConfig)
    output_dir: str = "runs/default"

    def validate(self) -> None:
        """Collect every violated rule and raise once, before any work starts."""
        problems = []

        def check(fn):
            try:
                fn()
            except ValueError as exc:
                problems.append(str(exc))

        check(self.data.validate)
        check(lambda: self.partition.validate(self.data.num_domains))
        check(self.rl.validate)
        m, t, s, u = self.model, self.train, self.stage, self.upload
        rules = [
            (m.tau > 0, "model.tau must be positive"),
            (m.layers >= 1 and 0 <= m.lora_start < m.layers, "model.lora_start must index an existing layer"),
            (1 <= m.rank <= min(m.dim, m.hidden) // 2, "model.rank must satisfy 1 <= r <= min(dim, hidden)/2"),
            (m.dim == self.data.dim, "model.dim must equal data.dim"),
            (t.rounds >= 0, "train.rounds must be >= 0"),
            (t.epochs_sft >= 0, "train.epochs_sft must be >= 0"),
            (t.lr > 0, "train.lr must be positive"),
            (t.batch_size >= 1, "train.batch_size must be >= 1"),
            (t.server_epochs >= 0, "train.server_epochs must be >= 0"),
            (t.schedule in SCHEDULES, f"train.schedule must be one of {SCHEDULES}"),
            (t.reference in REFERENCE_MODES, f"train.reference must be one of {REFERENCE_MODES}"),
            (0 < t.participation <= 1, "train.participation must be in (0, 1]"),
            (t.workers >= 1, "train.workers must be >= 1"),
            (s.eps_acc > 0, "stage.eps_acc must be positive"),
            (s.patience >= 1, "stage.patience must be >= 1"),
            (s.fixed_m is None or s.fixed_m >= 0, "stage.fixed_m must be >= 0"),
            (0 < u.ratio <= 1, "upload.ratio must be in (0, 1]"),
            (u.per_class_cap is None or u.per_class_cap >= 1, "upload.per_class_cap must be >= 1"),
            (u.noise_sigma >= 0, "upload.noise_sigma must be >= 0"),
            (u.groups is None or u.groups >= 1, "upload.groups must be >= 1"),
        ]
        problems += [msg for ok, msg in rules if not ok]
        if problems:
            raise ConfigError("; ".join(problems))


# data.seed is driven by the top-level seed
_HIDDEN = {("data", "seed")}


def _sections():
    return [f for f in fields(RunConfig) if f.default_factory is not dataclasses.MISSING]


def _coerce(raw: str, current, name: str):
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        return None
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected an integer, got {raw!r}") from None
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {raw!r}") from None
    if current is None:
        # optional numeric knobs default to None
        for cast in (int, float):
            try:
                return cast(raw)
            except ValueError:
                pass
        return raw
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; '#' starts a comment; unknown keys are errors."""
    cfg = base or RunConfig()
    sections = {f.name for f in _sections()}
    updates: dict[str, dict] = {}
    top: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in sections or (sec, name) in _HIDDEN:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            obj = getattr(cfg, sec)
            if name not in {f.name for f in fields(obj)}:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            updates.setdefault(sec, {})[name] = _coerce(value, getattr(obj, name), key)
        else:
            if key not in ("seed", "output_dir"):
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            top[key] = _coerce(value, getattr(cfg, key), key) if key == "seed" else value
    for sec, vals in updates.items():
        top[sec] = replace(getattr(cfg, sec), **vals)
    return replace(cfg, **top)


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    lines = [f"seed = {cfg.seed}", f"output_dir = {cfg.output_dir}"]
    for f in _sections():
        obj = getattr(cfg, f.name)
        for sub in fields(obj):
            if (f.name, sub.name) in _HIDDEN:
                continue
            lines.append(f"{f.name}.{sub.name} = {getattr(obj, sub.name)!r}".replace("'", ""))
    return "\n".join(lines) + "\n"
