"""Generation of mask-network parameters from instrument embeddings.

For each target layer k the flat parameter vector is produced by two
bias-free linear maps,

    theta_k = W_k @ (P_k @ e),

with e the instrument embedding (dim M), P_k a shared-subspace projection
(M' x M, M' < M) and W_k the per-layer expansion (|theta_k| x M'). No bias
terms anywhere: generation is exactly linear in e and the zero embedding
yields all-zero parameters. Each layer's vector lives in the M'-dim image
of its W_k, so per layer, any M'+1 embeddings give linearly dependent
parameters.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .masking import LayerShape, ParameterSet, TcnConfig, layer_shapes, total_param_count


def _target_std(shape: LayerShape) -> tuple[float, float]:
    """Init stds the owned baseline would use for this entry (weight, bias)."""
    if len(shape.weight_shape) == 1:
        # normalization gain/offset; owned init is gain=1, offset=0
        return 1.0, 0.0
    fan_in = shape.weight_shape[1] * shape.weight_shape[2]
    std = 1.0 / math.sqrt(3.0 * fan_in)
    return std, std


class MaskParamGenerator(nn.Module):
    """Per-stage bank of (P_k, W_k) factors for one TcnConfig.

    W_k rows are scaled so that, for unit-variance embeddings, generated
    parameters match the variance of the owned baseline's init (norm gains
    get unit variance, offsets and biases start at zero).
    """

    def __init__(self, cfg: TcnConfig, embed_dim: int, bottleneck_dim: int):
        super().__init__()
        if bottleneck_dim >= embed_dim:
            raise ConfigError(
                f"generator bottleneck M'={bottleneck_dim} must be smaller than "
                f"embedding dim M={embed_dim}"
            )
        if bottleneck_dim <= 0:
            raise ConfigError("generator bottleneck must be positive")
        self.cfg = cfg
        self.embed_dim = embed_dim
        self.bottleneck_dim = bottleneck_dim
        self.shapes = layer_shapes(cfg)
        for idx, shape in enumerate(self.shapes):
            flat = shape.size
            proj = torch.randn(bottleneck_dim, embed_dim) / math.sqrt(embed_dim)
            w_numel = math.prod(shape.weight_shape)
            w_std, b_std = _target_std(shape)
            scale = torch.empty(flat, 1)
            scale[:w_numel] = w_std / math.sqrt(bottleneck_dim)
            scale[w_numel:] = b_std / math.sqrt(bottleneck_dim)
            expand = torch.randn(flat, bottleneck_dim) * scale
            tag = shape.name.replace(".", "_")
            self.register_parameter(f"proj_{idx}_{tag}", nn.Parameter(proj))
            self.register_parameter(f"expand_{idx}_{tag}", nn.Parameter(expand))

    def factors(self, idx: int) -> tuple[nn.Parameter, nn.Parameter]:
        tag = self.shapes[idx].name.replace(".", "_")
        return (getattr(self, f"proj_{idx}_{tag}"), getattr(self, f"expand_{idx}_{tag}"))

    def storage_param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def generate_params(embedding: torch.Tensor, weights: MaskParamGenerator,
                    cfg: TcnConfig) -> ParameterSet:
    """Materialize one instrument's ParameterSet from its embedding.

    Args:
        embedding: (M,) vector.
        weights: generator bank built for the same cfg.
        cfg: mask network shape; must match the bank's.

    Returns:
        ParameterSet with provenance "generated"; tensors stay on the
        autograd graph of embedding and the bank.
    """
    if weights.cfg != cfg:
        raise ShapeError("generator bank was built for a different TcnConfig")
    if embedding.dim() != 1 or embedding.shape[0] != weights.embed_dim:
        raise ShapeError(
            f"embedding must be ({weights.embed_dim},), got {tuple(embedding.shape)}"
        )
    entries = []
    for idx, shape in enumerate(weights.shapes):
        proj, expand = weights.factors(idx)
        flat = expand @ (proj @ embedding)
        w_numel = math.prod(shape.weight_shape)
        weight = flat[:w_numel].view(shape.weight_shape)
        bias = flat[w_numel:].view(shape.bias_shape)
        entries.append((shape.name, weight, bias))
    return ParameterSet(entries=entries, provenance="generated")


class EmbeddingTable(nn.Module):
    """Learned instrument embeddings, one row per instrument id."""

    def __init__(self, instruments: tuple[str, ...], embed_dim: int):
        super().__init__()
        if len(set(instruments)) != len(instruments):
            raise ConfigError(f"duplicate instrument ids: {instruments}")
        self.instruments = tuple(instruments)
        self.vectors = nn.Parameter(torch.randn(len(instruments), embed_dim))

    def lookup(self, instrument: str) -> torch.Tensor:
        """Embedding row for an instrument id; same id always returns the same row."""
        try:
            row = self.instruments.index(instrument)
        except ValueError:
            raise ConfigError(
                f"unknown instrument '{instrument}', expected one of {self.instruments}"
            ) from None
        return self.vectors[row]


def param_count_report(tcn_cfgs: list[TcnConfig], num_instruments: int,
                       embed_dim: int, bottleneck_dim: int) -> dict:
    """Masking-parameter bookkeeping for the three sharing regimes.

    Returns a dict with per-instrument masking size, the baseline total
    (every instrument owns a copy), generator storage (embeddings plus all
    P_k/W_k factors), and the ratio baseline_total / per_instrument (the
    parameter-count advantage of regenerating extractors on demand).
    """
    if num_instruments <= 0:
        raise ConfigError("num_instruments must be positive")
    per_instrument = sum(total_param_count(cfg) for cfg in tcn_cfgs)
    baseline_total = num_instruments * per_instrument
    generator_storage = num_instruments * embed_dim
    for cfg in tcn_cfgs:
        for shape in layer_shapes(cfg):
            generator_storage += bottleneck_dim * embed_dim + shape.size * bottleneck_dim
    return {
        "num_instruments": num_instruments,
        "per_instrument_masking": per_instrument,
        "baseline_masking_total": baseline_total,
        "generator_storage": generator_storage,
        "ratio": baseline_total / per_instrument,
    }
