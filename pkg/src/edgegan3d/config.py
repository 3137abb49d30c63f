from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import tomli

CHANNEL_FAMILIES = ((8, 16, 32, 64), (16, 32, 64, 128), (32, 64, 128, 256))
DESK_SHAPE = (32, 48, 48)
FULL_SHAPE = (88, 112, 112)


@dataclass
class ModelConfig:
    channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    dcm: bool = True
    scam: bool = True
    eem: bool = True
    pretrained_dcm: str | None = None
    freeze_dcm: bool = False
    fusion_channels: int | None = None
    disc_channels: int = 32


@dataclass
class TrainConfig:
    lr: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    alpha: float = 1.0
    beta: float = 0.5
    epochs: int = 200
    batch_size: int = 1
    input_shape: tuple[int, int, int] = DESK_SHAPE
    channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    dcm: bool = True
    scam: bool = True
    eem: bool = True
    freeze_dcm: bool = False
    pretrained_dcm: str | None = None
    seed: int = 0
    val_fraction: float = 0.2
    disc_channels: int = 32
    # stop once best validation reaches both targets (0 disables)
    target_dice: float = 0.0
    target_hd: float = 0.0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.input_shape = tuple(int(n) for n in self.input_shape)
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    def validate(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not all(0 <= b < 1 for b in self.betas) or len(self.betas) != 2:
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if len(self.input_shape) != 3 or any(n < 8 or n % 8 for n in self.input_shape):
            raise ValueError(f"input_shape must be three multiples of 8, got {self.input_shape}")
        if len(self.channels) != 4 or any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channels must be 4 strictly increasing widths, got {self.channels}")
        if not 0 < self.val_fraction < 1:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            channels=self.channels, dcm=self.dcm, scam=self.scam, eem=self.eem,
            pretrained_dcm=self.pretrained_dcm, freeze_dcm=self.freeze_dcm,
            disc_channels=self.disc_channels,
        )

    @property
    def effective_beta(self) -> float:
        return self.beta if self.eem else 0.0

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**data)


def load_config(path) -> TrainConfig:
    with open(path, "rb") as f:
        data = tomli.load(f)
    return TrainConfig.from_dict(data)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to config")


def save_config(config: TrainConfig, path):
    lines = [f"{k} = {_toml_value(v)}" for k, v in config.to_dict().items() if v is not None]
    Path(path).write_text("\n".join(lines) + "\n")
