"""Run configuration: flat ``key = value`` text in sections.

Example::

    [run]
    seed = 1
    [hr]
    sigma = 2
    num_crops = 2

Unknown sections or keys are rejected. Command-line flags override file
values. The canonical serialisation (:meth:`RunConfig.to_text`) is embedded
in checkpoints and hashed into every CSV header.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .core import HRConfig
from .nets import DecoderConfig, EncoderConfig

OPTIMIZERS = ("adam", "sgd")

# section -> field names, in serialisation order
SECTIONS = {
    "run": ("seed", "out"),  # out is a location, not part of the serialised config
    "data": ("data_dir", "count", "offset", "size", "data_seed", "crop_size"),
    "model": ("stage_channels", "hidden_channels", "num_classes", "prior_bias", "pixel_mean", "pixel_std"),
    "hr": ("sigma", "num_crops", "crop_factor", "divisor", "hr_lambda", "fusion_weight", "window", "stride", "lr_size"),
    "optim": ("optimizer", "lr", "momentum", "adam_eps", "iters", "batch_size", "checkpoint_every"),
}


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"

    data_dir: str = ""  # empty: synthetic data
    count: int = 64
    offset: int = 0
    size: int = 256
    data_seed: int = 2024
    crop_size: int = 0  # 0: no random crop

    stage_channels: tuple[int, ...] = (16, 32, 64, 64)
    hidden_channels: int = 32
    num_classes: int = 4
    prior_bias: float = -4.0
    pixel_mean: float = 0.3
    pixel_std: float = 0.25

    sigma: int = 2
    num_crops: int = 2
    crop_factor: float = 0.25
    divisor: int = 8
    hr_lambda: float = 0.1
    fusion_weight: float = 0.5
    window: tuple[int, ...] = ()  # feature units; empty: (h, w)
    stride: tuple[int, ...] = ()
    lr_size: int = 0  # encoder input side; 0: image size / sigma

    optimizer: str = "adam"  # adam | sgd
    lr: float = 0.001
    momentum: float = 0.0  # sgd only
    adam_eps: float = 1e-5  # large enough that vanishing gradients stop moving weights
    iters: int = 500
    batch_size: int = 2
    checkpoint_every: int = 0

    # ---- derived objects -------------------------------------------------

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")

    def hr_config(self) -> HRConfig:
        return HRConfig(
            sigma=self.sigma,
            num_crops=self.num_crops,
            crop_factor=self.crop_factor,
            divisor=self.divisor,
            hr_lambda=self.hr_lambda,
            fusion_weight=self.fusion_weight,
            window=tuple(self.window) if self.window else None,
            stride=tuple(self.stride) if self.stride else None,
        )

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            stage_channels=tuple(self.stage_channels),
            pixel_mean=self.pixel_mean,
            pixel_std=self.pixel_std,
        )

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(self.stage_channels[-1], self.hidden_channels, self.num_classes)

    def encoder_input(self, image_hw: tuple[int, int]) -> tuple[int, int]:
        if self.lr_size:
            return (self.lr_size, self.lr_size)
        return (image_hw[0] // self.sigma, image_hw[1] // self.sigma)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # ---- serialisation ---------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for section, keys in SECTIONS.items():
            lines.append(f"[{section}]")
            for key in keys:
                if key == "out":
                    continue
                lines.append(f"{key} = {_format(getattr(self, key))}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def header(self) -> str:
        return f"config_hash={self.hash()}"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls().updated(read_items(text))

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def updated(self, values: dict[str, object]) -> "RunConfig":
        """Copy with ``values`` applied; strings are parsed by field type."""
        types = {f.name: f.type for f in fields(self)}
        changes = {}
        for key, value in values.items():
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            changes[key] = _parse(types[key], value) if isinstance(value, str) else value
        return dataclasses.replace(self, **changes)


def read_items(text: str) -> dict[str, str]:
    """Raw ``key -> value`` strings of a config text, with section checks."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    items = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise KeyError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in SECTIONS[section]:
                raise KeyError(f"key {key!r} does not belong in [{section}]")
            items[key] = value
    return items


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(typ: str, text: str):
    text = text.strip()
    if typ.startswith("tuple"):
        return tuple(int(v) for v in text.split(",") if v.strip())
    if typ == "int":
        return int(text)
    if typ == "float":
        return float(text)
    return text


def stable_hash(text: str) -> int:
    """64-bit hash that does not change between processes."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def derived_seed(master: int, key: str) -> int:
    return (master ^ stable_hash(key)) & (2**64 - 1)
