"""Temporal convolutional mask network over latent frames.

The network is evaluated functionally: every learnable tensor is supplied
through a ParameterSet, so the same forward serves parameters that are
owned per instrument, tied across instruments, or generated from an
instrument embedding. Structure:

    input 1x1 conv -> [num_blocks x layers_per_block residual layers] ->
    ReLU(skip sum) -> output 1x1 conv -> sigmoid

Each residual layer is 1x1 conv, ReLU, global layer norm, dilated conv
(dilation 2^layer), ReLU, global layer norm, then 1x1 residual and 1x1
skip projections.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

NORM_EPS = 1e-8


@dataclass(frozen=True)
class TcnConfig:
    """Shape of the mask network for one stage.

    Attributes:
        input_dim: channels of the latent fed to the network.
        output_dim: channels of the produced mask (the stage latent dim).
        num_blocks: repeated dilation pyramids.
        layers_per_block: layers per pyramid; layer l uses dilation 2^l.
        hidden_channels: width inside a residual layer.
        bottleneck_channels: width of the residual trunk.
        kernel_size: dilated conv kernel, odd so same-padding is symmetric.
    """

    input_dim: int
    output_dim: int
    num_blocks: int = 2
    layers_per_block: int = 4
    hidden_channels: int = 32
    bottleneck_channels: int = 16
    kernel_size: int = 3

    def __post_init__(self):
        for name in ("input_dim", "output_dim", "num_blocks", "layers_per_block",
                     "hidden_channels", "bottleneck_channels", "kernel_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"TcnConfig.{name} must be positive")
        if self.kernel_size % 2 == 0:
            raise ConfigError("TcnConfig.kernel_size must be odd for symmetric padding")

    @property
    def receptive_field(self) -> int:
        """Span of latent frames one output frame can see."""
        growth = sum(
            (self.kernel_size - 1) * 2**layer
            for _ in range(self.num_blocks)
            for layer in range(self.layers_per_block)
        )
        return 1 + growth


@dataclass(frozen=True)
class LayerShape:
    """Declared shapes of one generation unit: a weight tensor plus a bias vector."""

    name: str
    weight_shape: tuple[int, ...]
    bias_shape: tuple[int, ...]

    @property
    def size(self) -> int:
        w = 1
        for d in self.weight_shape:
            w *= d
        b = 1
        for d in self.bias_shape:
            b *= d
        return w + b


@dataclass
class ParameterSet:
    """Ordered (weight, bias) tensors matching layer_shapes of some TcnConfig.

    provenance records where the tensors came from ("owned", "shared",
    "generated"); the forward pass never reads it.
    """

    entries: list[tuple[str, torch.Tensor, torch.Tensor]]
    provenance: str = "owned"

    def __len__(self) -> int:
        return len(self.entries)

    def named_tensors(self):
        for name, weight, bias in self.entries:
            yield f"{name}.weight", weight
            yield f"{name}.bias", bias


def layer_shapes(cfg: TcnConfig) -> list[LayerShape]:
    """Enumerate every learnable tensor of the mask network, in forward order.

    Returns one entry per conv (weight + bias) and per normalization
    (gain + offset, stored in the weight/bias slots). The very last layer
    has no residual projection: its residual branch would feed nothing,
    since only the skip sum reaches the output conv.
    """
    cin, dout = cfg.input_dim, cfg.output_dim
    btl, hid, k = cfg.bottleneck_channels, cfg.hidden_channels, cfg.kernel_size
    shapes = [LayerShape("input_conv", (btl, cin, 1), (btl,))]
    for b in range(cfg.num_blocks):
        for l in range(cfg.layers_per_block):
            prefix = f"block{b}.layer{l}"
            last = b == cfg.num_blocks - 1 and l == cfg.layers_per_block - 1
            shapes.append(LayerShape(f"{prefix}.conv_in", (hid, btl, 1), (hid,)))
            shapes.append(LayerShape(f"{prefix}.norm1", (hid,), (hid,)))
            shapes.append(LayerShape(f"{prefix}.dconv", (hid, hid, k), (hid,)))
            shapes.append(LayerShape(f"{prefix}.norm2", (hid,), (hid,)))
            if not last:
                shapes.append(LayerShape(f"{prefix}.res", (btl, hid, 1), (btl,)))
            shapes.append(LayerShape(f"{prefix}.skip", (btl, hid, 1), (btl,)))
    shapes.append(LayerShape("output_conv", (dout, btl, 1), (dout,)))
    return shapes


def total_param_count(cfg: TcnConfig) -> int:
    return sum(s.size for s in layer_shapes(cfg))


def global_layer_norm(x: torch.Tensor, gain: torch.Tensor, offset: torch.Tensor,
                      eps: float = NORM_EPS) -> torch.Tensor:
    """Normalize over channels and frames jointly, then scale and shift per channel."""
    mean = x.mean(dim=(1, 2), keepdim=True)
    var = x.var(dim=(1, 2), unbiased=False, keepdim=True)
    normed = (x - mean) / torch.sqrt(var + eps)
    return normed * gain.view(1, -1, 1) + offset.view(1, -1, 1)


def _check_shapes(cfg: TcnConfig, params: ParameterSet) -> list[LayerShape]:
    declared = layer_shapes(cfg)
    if len(params) != len(declared):
        raise ShapeError(
            f"ParameterSet has {len(params)} entries, config declares {len(declared)}"
        )
    for idx, (shape, (name, weight, bias)) in enumerate(zip(declared, params.entries)):
        if tuple(weight.shape) != shape.weight_shape or tuple(bias.shape) != shape.bias_shape:
            raise ShapeError(
                f"entry {idx} ({shape.name}): expected weight {shape.weight_shape} "
                f"bias {shape.bias_shape}, got weight {tuple(weight.shape)} "
                f"bias {tuple(bias.shape)}"
            )
    return declared


def apply_mask_net(x: torch.Tensor, cfg: TcnConfig, params: ParameterSet) -> torch.Tensor:
    """Run the mask network.

    Args:
        x: (batch, input_dim, frames) latent input.
        cfg: network shape.
        params: tensors per layer_shapes(cfg), any provenance.

    Returns:
        (batch, output_dim, frames) mask with values in (0, 1).
    """
    if x.dim() != 3 or x.shape[1] != cfg.input_dim:
        raise ShapeError(
            f"mask net input must be (batch, {cfg.input_dim}, frames), got {tuple(x.shape)}"
        )
    _check_shapes(cfg, params)
    tensors = iter(params.entries)

    def take():
        _, weight, bias = next(tensors)
        return weight, bias

    w, b = take()
    trunk = F.conv1d(x, w, b)
    skip_total = torch.zeros_like(trunk)
    for block in range(cfg.num_blocks):
        for layer in range(cfg.layers_per_block):
            dilation = 2**layer
            last = (block == cfg.num_blocks - 1
                    and layer == cfg.layers_per_block - 1)
            w, b = take()
            y = F.relu(F.conv1d(trunk, w, b))
            gain, offset = take()
            y = global_layer_norm(y, gain, offset)
            w, b = take()
            pad = (cfg.kernel_size - 1) // 2 * dilation
            y = F.relu(F.conv1d(y, w, b, dilation=dilation, padding=pad))
            gain, offset = take()
            y = global_layer_norm(y, gain, offset)
            if not last:
                w, b = take()
                res = F.conv1d(y, w, b)
            w, b = take()
            skip_total = skip_total + F.conv1d(y, w, b)
            if not last:
                trunk = trunk + res
    w, b = take()
    logits = F.conv1d(F.relu(skip_total), w, b)
    return torch.sigmoid(logits)


def separate_latent(h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Elementwise product of latent and mask."""
    if h.shape != mask.shape:
        raise ShapeError(f"latent {tuple(h.shape)} and mask {tuple(mask.shape)} differ")
    return h * mask
