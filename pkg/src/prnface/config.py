"""Plain-text ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .backbone import BackboneConfig
from .losses import LossWeights
from .numerics.nn import MlpSpec
from .prn import PrnConfig

VARIANT_ALIASES = {
    "a": "model_a",
    "b": "model_b",
    "c": "model_c",
    "model_a": "model_a",
    "model_b": "model_b",
    "model_c": "model_c",
    "prn": "prn",
    "prn_plus": "prn_plus",
}


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    variant: str = "model_c"
    seed: int = 0
    # data: "synth:<preset>" or a dataset root with manifest.txt
    dataset: str = "synth:easy"
    n_identities: int = 20
    samples_per_identity: int = 50
    val_fraction: float = 0.1
    image_size: int = 64
    roi_m: float = 8.0
    # backbone
    stem_channels: int = 16
    stage_widths: tuple[int, ...] = (16, 32, 64)
    blocks: tuple[int, ...] = (1, 1, 1)
    strides: tuple[int, ...] = (1, 2, 2)
    bottleneck_divisor: int = 2
    # relational heads
    g_theta_widths: tuple[int, ...] = (64, 64, 64)
    f_phi_widths: tuple[int, ...] = (64, 64, 32)
    lstm_widths: tuple[int, ...] = (32, 32)
    sid_width: int = 16
    combiner_width: int = 64
    # losses
    lambda1: float = 1.0
    lambda2: float = 0.5
    lambda3: float = 1.0
    margin: float = 1.0
    normalize: bool = False
    mining: str = "random"
    # optimizer
    lr: float = 0.1
    batch_size: int = 32
    steps_backbone: int = 250
    steps_epsi: int = 200
    steps_prn: int = 500
    steps_combined: int = 300
    joint: bool = False
    # paths
    checkpoint_dir: str = "runs/default"

    def __post_init__(self):
        if self.variant not in VARIANT_ALIASES:
            raise ConfigError(f"unknown variant {self.variant!r}")
        object.__setattr__(self, "variant", VARIANT_ALIASES[self.variant])
        if self.mining not in ("random", "semi-hard"):
            raise ConfigError(f"unknown mining strategy {self.mining!r}")
        if self.batch_size < 1 or self.lr < 0:
            raise ConfigError("batch_size must be >= 1 and lr >= 0")

    # -- derived component configs -------------------------------------------

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            input_side=self.image_size,
            stem_channels=self.stem_channels,
            stage_widths=self.stage_widths,
            blocks=self.blocks,
            strides=self.strides,
            bottleneck_divisor=self.bottleneck_divisor,
        )

    @property
    def prn(self) -> PrnConfig:
        return PrnConfig(
            g_theta=MlpSpec.uniform(self.g_theta_widths),
            f_phi=MlpSpec.uniform(self.f_phi_widths, linear_last=True),
            lstm_widths=self.lstm_widths,
            sid_width=self.sid_width,
            combiner_width=self.combiner_width,
        )

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.margin, self.normalize)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- text form -----------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            try:
                values[key] = _convert(kinds[key], value)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), str(path))

    def with_env(self) -> "RunConfig":
        """Apply the PRN_SEED environment override."""
        seed = os.environ.get("PRN_SEED")
        if seed is None or seed == "":
            return self
        try:
            return self.replace(seed=int(seed))
        except ValueError:
            raise ConfigError(f"PRN_SEED must be an integer, got {seed!r}") from None

    def header_lines(self) -> list[str]:
        return [f"# {line}" for line in self.to_text().splitlines()]


def _convert(kind, value: str):
    kind = str(kind)
    if "tuple" in kind:
        return _ints(value)
    if kind == "bool":
        return _bool(value)
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return value
