"""Dataclass configuration for models, training and runs.

One ModelConfig fully determines a model: stage rates are multiples of the
base rate, and stride, latent width, kernel span and STFT window all scale
with that multiple so every stage produces the same latent frame count for
the same clip duration. A run config file is YAML mirroring these
dataclasses; unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import typing
from dataclasses import dataclass, field, fields, is_dataclass, asdict
from pathlib import Path

import yaml

from .encdec import EncoderConfig
from .errors import ConfigError
from .losses import LossWeights
from .masking import TcnConfig

SHARING_MODES = ("baseline", "shared_tcn", "meta")


@dataclass(frozen=True)
class TcnSettings:
    """Structural mask-network hyperparameters, shared by all stages."""

    num_blocks: int = 2
    layers_per_block: int = 4
    hidden_channels: int = 32
    bottleneck_channels: int = 16
    kernel_size: int = 3


@dataclass(frozen=True)
class OptimizerSettings:
    algorithm: str = "radam_lookahead"
    learning_rate: float = 1e-3
    grad_clip: float = 5.0
    lookahead_sync: int = 6
    lookahead_alpha: float = 0.5

    def __post_init__(self):
        if self.algorithm not in ("radam_lookahead", "adam", "sgd"):
            raise ConfigError(f"unknown optimizer algorithm '{self.algorithm}'")
        if self.learning_rate <= 0 or self.grad_clip <= 0:
            raise ConfigError("learning_rate and grad_clip must be positive")
        if self.lookahead_sync < 1 or not 0 < self.lookahead_alpha <= 1:
            raise ConfigError("bad lookahead settings")


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 1500
    batch_size: int = 6
    crop_seconds: float = 2.0
    eval_interval: int = 100
    val_fraction: float = 0.2
    deterministic: bool = True

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.eval_interval < 1:
            raise ConfigError("bad train settings")
        if self.crop_seconds <= 0:
            raise ConfigError("crop_seconds must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")


@dataclass(frozen=True)
class ModelConfig:
    """Full hyperparameter record for one separation model."""

    instruments: tuple[str, ...] = ("tone", "noise", "clicks", "chirp")
    sharing: str = "meta"
    stronger_encoder: bool = True
    aux_losses: bool = True
    multi_stage: bool = True
    stage_rates: tuple[int, ...] | None = None
    base_rate: int = 8000
    base_stride: int = 32
    base_latent_dim: int = 32
    base_kernel: int = 64
    base_stft_window: int = 256
    encoder_heads: int = 3
    tcn: TcnSettings = field(default_factory=TcnSettings)
    embed_dim: int = 16
    embed_bottleneck: int = 4
    loss_weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    seed: int = 0

    def __post_init__(self):
        if len(self.instruments) < 1:
            raise ConfigError("need at least one instrument")
        if len(set(self.instruments)) != len(self.instruments):
            raise ConfigError(f"duplicate instruments: {self.instruments}")
        if self.sharing not in SHARING_MODES:
            raise ConfigError(f"sharing must be one of {SHARING_MODES}, got '{self.sharing}'")
        if self.sharing == "meta" and self.embed_bottleneck >= self.embed_dim:
            raise ConfigError(
                f"embed_bottleneck {self.embed_bottleneck} must be smaller than "
                f"embed_dim {self.embed_dim}"
            )
        rates = self.stage_rates
        if rates is None:
            top = self.base_rate * 4
            rates = (self.base_rate, self.base_rate * 2, top) if self.multi_stage else (top,)
            object.__setattr__(self, "stage_rates", rates)
        rates = tuple(int(r) for r in rates)
        if not self.multi_stage and len(rates) != 1:
            raise ConfigError("multi_stage=False requires exactly one stage rate")
        if self.multi_stage and len(rates) < 2:
            raise ConfigError("multi_stage=True requires at least two stage rates")
        last = 0
        for rate in rates:
            mult = rate // self.base_rate
            if rate % self.base_rate or mult & (mult - 1):
                raise ConfigError(
                    f"stage rate {rate} must be a power-of-two multiple of {self.base_rate}"
                )
            if rate <= last:
                raise ConfigError("stage rates must be ascending")
            last = rate
        object.__setattr__(self, "stage_rates", rates)
        # surface geometry errors at config time
        for stage in range(len(rates)):
            self.encoder_config(stage)
            self.tcn_config(stage)

    @property
    def num_stages(self) -> int:
        return len(self.stage_rates)

    def stage_multiplier(self, stage: int) -> int:
        return self.stage_rates[stage] // self.base_rate

    def stage_latent_dim(self, stage: int) -> int:
        return self.base_latent_dim * self.stage_multiplier(stage)

    def encoder_config(self, stage: int) -> EncoderConfig:
        mult = self.stage_multiplier(stage)
        return EncoderConfig(
            sample_rate=self.stage_rates[stage],
            stride=self.base_stride * mult,
            latent_dim=self.base_latent_dim * mult,
            base_kernel=self.base_kernel * mult,
            num_heads=self.encoder_heads,
            stft_window=self.base_stft_window * mult,
            multi_head=self.stronger_encoder,
        )

    def tcn_config(self, stage: int) -> TcnConfig:
        d = self.stage_latent_dim(stage)
        input_dim = d if stage == 0 else 2 * d
        return TcnConfig(
            input_dim=input_dim,
            output_dim=d,
            num_blocks=self.tcn.num_blocks,
            layers_per_block=self.tcn.layers_per_block,
            hidden_channels=self.tcn.hidden_channels,
            bottleneck_channels=self.tcn.bottleneck_channels,
            kernel_size=self.tcn.kernel_size,
        )

    def effective_loss_weights(self) -> LossWeights:
        """aux_losses=False zeroes the auxiliary terms."""
        if self.aux_losses:
            return self.loss_weights
        return LossWeights(w_sisnr=self.loss_weights.w_sisnr, w_diss=0.0, w_sim=0.0,
                           w_recon=0.0, stage_scales=self.loss_weights.stage_scales)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        text = yaml.safe_dump(plain_dict(self.to_dict()), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:12]


def plain_dict(value):
    """Recursively turn tuples into lists so the result is YAML-native."""
    if isinstance(value, dict):
        return {k: plain_dict(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain_dict(v) for v in value]
    return value


def _convert(value, target, path):
    origin = typing.get_origin(target)
    if target is type(None):
        if value is not None:
            raise ConfigError(f"{path}: expected null")
        return None
    if origin is typing.Union:
        last_err = None
        for option in typing.get_args(target):
            try:
                return _convert(value, option, path)
            except ConfigError as err:
                last_err = err
        raise last_err
    if is_dataclass(target):
        return dataclass_from_dict(target, value, path)
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(target)
        item = args[0] if args else typing.Any
        return tuple(_convert(v, item, f"{path}[{i}]") for i, v in enumerate(value))
    if target is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if target is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if target is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def dataclass_from_dict(cls, data, path: str = "config"):
    """Build a dataclass from a plain dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping for {cls.__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown} for {cls.__name__}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _convert(value, hints[key], f"{path}.{key}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    """Top level of a run config file: the model, plus optional default paths
    that command-line flags override."""

    model: ModelConfig = field(default_factory=ModelConfig)
    data_dir: str | None = None
    out: str | None = None


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if raw is None:
        raw = {}
    return dataclass_from_dict(RunConfig, raw, path=str(path))


def config_from_dict(data: dict) -> ModelConfig:
    return dataclass_from_dict(ModelConfig, data, path="model")
