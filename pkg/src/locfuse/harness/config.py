"""Training configuration, JSON (de)serialization and ablation presets."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..data import AugmentConfig, TaskKind
from ..errors import ConfigError
from ..locality import LocalityConfig, PriorKind
from ..losses import LossWeights

TASK_SIGMA = {TaskKind.SEGMENTATION: 0.65, TaskKind.DETECTION: 0.5, TaskKind.COLORIZATION: 2.5}
TASK_EPOCHS = {TaskKind.SEGMENTATION: 50, TaskKind.DETECTION: 50, TaskKind.COLORIZATION: 5}


@dataclass(frozen=True)
class SchedulerConfig:
    T_0: int = 10
    T_mult: int = 2
    eta_min: float = 0.0


@dataclass(frozen=True)
class FusionConfig:
    num_prompts: int = 4
    patch_size: int = 4
    dim: int = 32


@dataclass(frozen=True)
class Paths:
    data: str = "data/seg"
    backbone: str = "runs/backbone_seg"
    out: str = "runs/seg"


@dataclass(frozen=True)
class TrainConfig:
    task: TaskKind = TaskKind.SEGMENTATION
    epochs: int = 50
    batch_size: int = 16
    lr_init: float = 0.04
    seed: int = 0
    holdout: float = 0.1
    eval_every: int = 1
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    locality: LocalityConfig = field(default_factory=LocalityConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    paths: Paths = field(default_factory=Paths)

    def __post_init__(self):
        object.__setattr__(self, "task", TaskKind.parse(self.task))
        for name in ("epochs", "batch_size", "eval_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr_init <= 0:
            raise ConfigError("lr_init must be positive")
        if not 0 <= self.holdout < 1:
            raise ConfigError("holdout must be in [0, 1)")
        if self.fusion.num_prompts <= 0:
            raise ConfigError("fusion.num_prompts must be positive")
        if self.scheduler.T_0 <= 0 or self.scheduler.T_mult < 1:
            raise ConfigError("scheduler needs T_0 > 0 and T_mult >= 1")

    @classmethod
    def for_task(cls, task: str | TaskKind, **overrides) -> "TrainConfig":
        kind = TaskKind.parse(task)
        base = cls(task=kind, epochs=TASK_EPOCHS[kind], locality=LocalityConfig(sigma=TASK_SIGMA[kind]),
                   paths=Paths(f"data/{kind.value}", f"runs/backbone_{kind.value}", f"runs/{kind.value}"))
        return dataclasses.replace(base, **overrides)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------ JSON

    def to_dict(self, with_paths: bool = True) -> dict:
        d = {
            "task": self.task.value, "epochs": self.epochs, "batch_size": self.batch_size,
            "lr_init": self.lr_init, "seed": self.seed, "holdout": self.holdout, "eval_every": self.eval_every,
            "scheduler": dataclasses.asdict(self.scheduler),
            "loss": {"lambda": self.loss.lam, "gamma": self.loss.gamma, "prediction": self.loss.prediction},
            "locality": {"kind": self.locality.kind.value, "sigma": self.locality.sigma,
                         "adaptive": self.locality.adaptive},
            "augment": dataclasses.asdict(self.augment),
            "fusion": dataclasses.asdict(self.fusion),
        }
        if with_paths:
            d["paths"] = dataclasses.asdict(self.paths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            kind = TaskKind.parse(d.get("task", "seg"))
            base = cls.for_task(kind)
            loss = d.pop("loss", None)
            if loss is not None:
                loss = LossWeights(lam=loss.get("lambda", 0.5), gamma=loss.get("gamma", 0.2),
                                   prediction=loss.get("prediction", 1.0))
                d["loss"] = loss
            loc = d.pop("locality", None)
            if loc is not None:
                merged = {"kind": base.locality.kind.value, "sigma": base.locality.sigma, "adaptive": False, **loc}
                d["locality"] = LocalityConfig(kind=PriorKind(merged["kind"]), sigma=float(merged["sigma"]),
                                               adaptive=bool(merged["adaptive"]))
            for key, typ, default in (("scheduler", SchedulerConfig, base.scheduler), ("augment", AugmentConfig, base.augment),
                                      ("fusion", FusionConfig, base.fusion), ("paths", Paths, base.paths)):
                if key in d:
                    d[key] = typ(**{**dataclasses.asdict(default), **d[key]})
            d["task"] = kind
            return dataclasses.replace(base, **d)
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)


# Ablation presets expressed as config edits.
PRESETS = {
    "full": lambda c: c,
    "wo_lu": lambda c: c.replace(loss=dataclasses.replace(c.loss, gamma=0.0)),
    "wo_ls": lambda c: c.replace(loss=dataclasses.replace(c.loss, lam=0.0)),
    "wo_lp": lambda c: c.replace(loss=dataclasses.replace(c.loss, prediction=0.0)),
    "global": lambda c: c.replace(locality=LocalityConfig(PriorKind.GAUSSIAN, 1e6, False)),
    "wo_aug": lambda c: c.replace(augment=dataclasses.replace(c.augment, enabled=False)),
    "laplacian": lambda c: c.replace(locality=dataclasses.replace(c.locality, kind=PriorKind.LAPLACIAN)),
    "adaptive": lambda c: c.replace(locality=dataclasses.replace(c.locality, adaptive=True)),
}


def apply_preset(cfg: TrainConfig, name: str) -> TrainConfig:
    try:
        return PRESETS[name](cfg)
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
