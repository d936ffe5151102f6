"""Run configuration: one JSON document with a schema version."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .models.completion import ModelConfig
from .models.denoise import DenoiserConfig, StepSchedule
from .synth import CorpusConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    decay: str = "cosine"  # or "constant"; cosine follows a half cosine down to lr * final_ratio
    final_ratio: float = 0.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not self.lr > 0:
            raise ConfigError("optimizer lr must be positive")
        if self.decay not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr decay {self.decay!r}")

    def lr_at(self, step: int, total: int) -> float:
        if self.decay == "constant" or total <= 1:
            return self.lr
        frac = 0.5 * (1 + math.cos(math.pi * step / (total - 1)))
        return self.lr * (self.final_ratio + (1 - self.final_ratio) * frac)


@dataclass
class DenoiseTrainConfig:
    """Synthetic sphere/torus pairs for the denoiser."""
    families: list[str] = field(default_factory=lambda: ["sphere", "torus"])
    train_shapes: int = 16
    test_shapes: int = 4
    points: int = 1024
    epochs: int = 10
    batch_size: int = 1
    lr: float = 3e-3  # own rate; the score net tolerates more than the completion model


@dataclass
class RunConfig:
    corpus: str = "corpus"
    out: str = "run"
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion: bool = False
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: StepSchedule = field(default_factory=StepSchedule)
    optim: OptimConfig = field(default_factory=OptimConfig)
    gen: CorpusConfig = field(default_factory=CorpusConfig)
    denoise_train: DenoiseTrainConfig = field(default_factory=DenoiseTrainConfig)
    epochs: int = 50
    batch_size: int = 2
    threshold: float = 0.01
    emd_mode: str = "auto"
    eval_workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.emd_mode not in ("exact", "approximate", "auto"):
            raise ConfigError(f"unknown emd_mode {self.emd_mode!r}")

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one seed to every stochastic component."""
        self.seed = seed
        self.model.seed = seed
        self.denoiser.seed = seed
        self.gen.seed = seed
        return self

    def model_config(self) -> ModelConfig:
        d = self.model.to_dict()
        d["fusion"] = self.fusion
        return ModelConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        version = d.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {version!r} unsupported (expected {SCHEMA_VERSION})")
        sections = {"model": ModelConfig, "denoiser": DenoiserConfig, "schedule": StepSchedule,
                    "optim": OptimConfig, "gen": CorpusConfig, "denoise_train": DenoiseTrainConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            for key, typ in sections.items():
                if key in d:
                    d[key] = typ(**d[key])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from exc
    return RunConfig.from_dict(data)
