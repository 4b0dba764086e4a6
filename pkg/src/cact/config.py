"""Run configuration: one flat dataclass, read from JSON, overridable per key."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .context_net import Architecture
from .data import SyntheticSpec
from .errors import ConfigurationError
from .local_repr import ExtractorSpec
from .training import Strategy, TrainConfig


@dataclass
class RunConfig:
    # dataset
    data_root: str = "data"
    train_folds: list = field(default_factory=lambda: ["train"])
    val_folds: list = field(default_factory=lambda: ["val"])
    test_folds: list = field(default_factory=lambda: ["test"])
    per_class: dict = field(default_factory=lambda: {"train": 15, "val": 5, "test": 5})
    image_size: int = 448
    patch_size: int = 56
    # model
    extractor_family: str = "reference5"
    feature_depth: int = 32
    extractor_width: int = 8
    pooling: str = "avg"
    block_kind: str = "B3"
    attention_axis: str = "spatial"
    # training
    strategy: str = "standard"
    strategies: list = field(default_factory=list)
    alpha_joint: float = 0.5
    alpha_roi: float = 0.10
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    finetune_extractor: bool = True
    augment: bool = True
    pretrain_epochs: int = 5
    pretrain_lr: float = 1e-3
    pretrain_cap: int | None = 240
    pretrained: str | None = None
    kfold: int = 0
    # inference
    checkpoint: str | None = None
    window_cells: int = 8
    stride_cells: int = 1
    # report
    report_inputs: list = field(default_factory=list)
    # run
    seed: int = 7
    workers: int = 1
    out_dir: str = "runs"

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        unknown = [k for k in raw if k not in cls.keys()]
        if unknown:
            raise ConfigurationError(f"unknown config key {unknown[0]!r}", key=unknown[0])
        cfg = cls()
        for key, value in raw.items():
            setattr(cfg, key, _coerce(key, getattr(cfg, key), value))
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError(f"config {path} must hold a JSON object")
        return cls.from_dict(raw)

    def override(self, key: str, value) -> None:
        """Set ``key`` from a command-line value (JSON literal or bare string)."""
        if key not in self.keys():
            raise ConfigurationError(f"unknown config key {key!r}", key=key)
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                pass
        setattr(self, key, _coerce(key, getattr(self, key), value))

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    # -- views used by the pipeline -------------------------------------------------
    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(image_size=self.image_size, patch_size=self.patch_size, seed=self.seed)

    def architecture(self) -> Architecture:
        spec = ExtractorSpec(family=self.extractor_family, feature_depth=self.feature_depth,
                             patch_size=self.patch_size, width=self.extractor_width)
        return self.strategy_obj().architecture(
            Architecture(extractor=spec, pooling=self.pooling, block_kind=self.block_kind,
                         attention_axis=self.attention_axis, seed=self.seed))

    def strategy_obj(self, kind: str | None = None) -> Strategy:
        return Strategy(kind or self.strategy, self.alpha_joint, self.alpha_roi)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, rho=self.rho, eps=self.eps,
                           seed=self.seed, finetune_extractor=self.finetune_extractor,
                           pretrain_epochs=self.pretrain_epochs, pretrain_lr=self.pretrain_lr,
                           pretrain_cap=self.pretrain_cap, augment=self.augment)


def _coerce(key: str, default, value):
    """Check ``value`` against the type of the field default; ints are accepted for floats."""
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigurationError(
            f"config key {key!r} expects {type(default).__name__}, got {value!r}", key=key)
    return value
