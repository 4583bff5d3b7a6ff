"""Progressive multi-stage separation model.

Each stage runs at its own sample rate but produces the same number of
latent frames. A stage encodes its mixture, masks the latent once per
instrument, and decodes the masked latent back to a waveform. From the
second stage on, the previous stage's masked latent is projected and
concatenated onto the current mixture latent before masking, so the mask
network sees both the coarse separation so far and the new detail.

Mask parameters come from one of three containers:

- "baseline": every instrument owns a full set of mask-network tensors.
- "shared_tcn": the convolutional trunk is shared; only the input and
  output projections are per-instrument.
- "meta": nothing is owned per instrument. All mask tensors are produced
  on the fly from an instrument embedding by a linear generator, and the
  state dict contains only the generator factors and the embedding table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .encdec import WaveDecoder, WaveEncoder
from .errors import ConfigError, ShapeError
from .generator import EmbeddingTable, MaskParamGenerator, generate_params
from .masking import LayerShape, ParameterSet, TcnConfig, apply_mask_net, layer_shapes, separate_latent

IO_ENTRY_NAMES = ("input_conv", "output_conv")


def _entry_tag(name: str) -> str:
    return name.replace(".", "_")


def _init_entry(shape: LayerShape) -> tuple[torch.Tensor, torch.Tensor]:
    """Fresh weight/bias tensors for one owned mask-network entry."""
    if len(shape.weight_shape) == 1:
        return torch.ones(shape.weight_shape), torch.zeros(shape.bias_shape)
    fan_in = 1
    for dim in shape.weight_shape[1:]:
        fan_in *= dim
    bound = 1.0 / math.sqrt(fan_in)
    weight = torch.empty(shape.weight_shape).uniform_(-bound, bound)
    bias = torch.empty(shape.bias_shape).uniform_(-bound, bound)
    return weight, bias


class OwnedParamBank(nn.Module):
    """Explicitly owned tensors for a subset of mask-network entries."""

    def __init__(self, shapes: list[LayerShape]):
        super().__init__()
        self._names = [s.name for s in shapes]
        for shape in shapes:
            weight, bias = _init_entry(shape)
            tag = _entry_tag(shape.name)
            self.register_parameter(f"{tag}__w", nn.Parameter(weight))
            self.register_parameter(f"{tag}__b", nn.Parameter(bias))

    def entry(self, name: str) -> tuple[torch.Tensor, torch.Tensor]:
        tag = _entry_tag(name)
        return getattr(self, f"{tag}__w"), getattr(self, f"{tag}__b")

    def names(self) -> list[str]:
        return list(self._names)


class StageModel(nn.Module):
    """One resolution stage: encoder, per-instrument masking, decoder."""

    def __init__(self, cfg: ModelConfig, stage: int):
        super().__init__()
        self.stage = stage
        self.rate = cfg.stage_rates[stage]
        self.sharing = cfg.sharing
        self.instruments = cfg.instruments
        self.encoder_cfg = cfg.encoder_config(stage)
        self.tcn_cfg = cfg.tcn_config(stage)
        self.encoder = WaveEncoder(self.encoder_cfg)
        self.decoder = WaveDecoder(self.encoder_cfg)
        if stage > 0:
            prev_dim = cfg.stage_latent_dim(stage - 1)
            self.prev_proj = nn.Conv1d(prev_dim, cfg.stage_latent_dim(stage), 1)
        else:
            self.prev_proj = None

        shapes = layer_shapes(self.tcn_cfg)
        if self.sharing == "baseline":
            self.owned_banks = nn.ModuleDict(
                {name: OwnedParamBank(shapes) for name in self.instruments}
            )
        elif self.sharing == "shared_tcn":
            trunk = [s for s in shapes if s.name not in IO_ENTRY_NAMES]
            io = [s for s in shapes if s.name in IO_ENTRY_NAMES]
            self.trunk_bank = OwnedParamBank(trunk)
            self.io_banks = nn.ModuleDict(
                {name: OwnedParamBank(io) for name in self.instruments}
            )
        else:
            self.generator = MaskParamGenerator(
                self.tcn_cfg, cfg.embed_dim, cfg.embed_bottleneck
            )

    def mask_params(self, instrument: str, embeddings: EmbeddingTable | None) -> ParameterSet:
        """Assemble the mask network's parameters for one instrument."""
        if instrument not in self.instruments:
            raise ConfigError(f"unknown instrument '{instrument}'")
        if self.sharing == "baseline":
            bank = self.owned_banks[instrument]
            entries = [(name,) + bank.entry(name) for name in bank.names()]
            return ParameterSet(entries=entries, provenance="owned")
        if self.sharing == "shared_tcn":
            io = self.io_banks[instrument]
            entries = []
            for shape in layer_shapes(self.tcn_cfg):
                bank = io if shape.name in IO_ENTRY_NAMES else self.trunk_bank
                entries.append((shape.name,) + bank.entry(shape.name))
            return ParameterSet(entries=entries, provenance="owned")
        if embeddings is None:
            raise ConfigError("meta sharing needs an embedding table")
        return generate_params(embeddings.lookup(instrument), self.generator, self.tcn_cfg)

    def mask_input(self, latent: torch.Tensor, prev_latent: torch.Tensor | None) -> torch.Tensor:
        if self.stage == 0:
            if prev_latent is not None:
                raise ShapeError("first stage takes no previous latent")
            return latent
        if prev_latent is None:
            raise ShapeError(f"stage {self.stage} needs the previous stage's latent")
        if prev_latent.shape[0] != latent.shape[0]:
            raise ShapeError("batch mismatch between stages")
        if prev_latent.shape[2] != latent.shape[2]:
            raise ShapeError(
                f"stage {self.stage} frame mismatch: previous latent has "
                f"{prev_latent.shape[2]} frames, current has {latent.shape[2]}"
            )
        return torch.cat([self.prev_proj(prev_latent), latent], dim=1)

    def separate_instrument(
        self,
        latent: torch.Tensor,
        prev_latent: torch.Tensor | None,
        instrument: str,
        embeddings: EmbeddingTable | None,
        out_length: int,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Mask the mixture latent for one instrument and decode it.

        Returns the masked latent and the estimated waveform.
        """
        params = self.mask_params(instrument, embeddings)
        mask = apply_mask_net(self.mask_input(latent, prev_latent), self.tcn_cfg, params)
        masked = separate_latent(latent, mask)
        return masked, self.decoder(masked, out_length)


@dataclass
class StageOutput:
    rate: int
    mixture_latent: torch.Tensor
    masked_latents: dict[str, torch.Tensor]
    waveforms: dict[str, torch.Tensor]


@dataclass
class SeparationResult:
    stages: list[StageOutput]

    @property
    def final(self) -> StageOutput:
        return self.stages[-1]


class MultiStageModel(nn.Module):
    """Stack of stages plus, in meta mode, the shared embedding table."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.stages = nn.ModuleList(
            StageModel(cfg, stage) for stage in range(cfg.num_stages)
        )
        if cfg.sharing == "meta":
            self.embeddings = EmbeddingTable(cfg.instruments, cfg.embed_dim)
        else:
            self.embeddings = None

    @property
    def instruments(self) -> tuple[str, ...]:
        return self.cfg.instruments

    def check_mixtures(self, mixtures: list[torch.Tensor]) -> None:
        if len(mixtures) != len(self.stages):
            raise ShapeError(
                f"expected {len(self.stages)} stage mixtures, got {len(mixtures)}"
            )
        base = mixtures[0]
        base_rate = self.stages[0].rate
        for mix, stage in zip(mixtures, self.stages):
            if mix.ndim != 2:
                raise ShapeError("stage mixtures must be (batch, samples)")
            if mix.shape[0] != base.shape[0]:
                raise ShapeError("stage mixtures disagree on batch size")
            if mix.shape[1] * base_rate != base.shape[1] * stage.rate:
                raise ShapeError(
                    f"stage mixture at {stage.rate} Hz has {mix.shape[1]} samples, "
                    f"inconsistent with {base.shape[1]} at {base_rate} Hz"
                )

    def separate(self, mixtures: list[torch.Tensor]) -> SeparationResult:
        """Run all stages. ``mixtures`` holds the same clip once per stage
        rate, ascending, shaped (batch, samples)."""
        self.check_mixtures(mixtures)
        outputs = []
        prev: dict[str, torch.Tensor] | None = None
        for stage, mix in zip(self.stages, mixtures):
            latent = stage.encoder(mix)
            masked_latents = {}
            waveforms = {}
            for instrument in self.instruments:
                prev_latent = None if prev is None else prev[instrument]
                masked, wav = stage.separate_instrument(
                    latent, prev_latent, instrument, self.embeddings, mix.shape[1]
                )
                masked_latents[instrument] = masked
                waveforms[instrument] = wav
            outputs.append(
                StageOutput(
                    rate=stage.rate,
                    mixture_latent=latent,
                    masked_latents=masked_latents,
                    waveforms=waveforms,
                )
            )
            prev = masked_latents
        return SeparationResult(stages=outputs)

    def forward(self, mixtures: list[torch.Tensor]) -> SeparationResult:
        return self.separate(mixtures)


def build_model(cfg: ModelConfig) -> MultiStageModel:
    return MultiStageModel(cfg)


def masking_param_count(model: MultiStageModel) -> int:
    """Parameters devoted to mask extraction: owned banks, shared trunks and
    per-instrument projections, or generator factors plus embeddings."""
    containers = ("owned_banks", "trunk_bank", "io_banks", "generator", "embeddings")
    return sum(v.numel() for k, v in model.state_dict().items()
               if any(c in k for c in containers))
