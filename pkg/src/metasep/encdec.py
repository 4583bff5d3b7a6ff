"""Waveform encoder and decoder for one stage.

The encoder runs K parallel 1-D conv heads over the signal, head k using
kernel W / 2^k and output width D * 2^(k-1) / 2^K, alongside a magnitude
STFT branch (log-compressed, standardized per example, projected to
D / 2^K channels). Head widths and the STFT projection sum to exactly D;
after concatenation two pointwise convs with a ReLU in between merge the
branches into the latent. The decoder mirrors this: pointwise conv, ReLU,
split, one transposed conv per head kernel, outputs summed.

Framing is anchored to T' = ceil(T / stride): the input is zero-padded
symmetrically so every head and the STFT branch land on the same frame
grid, and decoding crops back to the requested length.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .audio import frame_padding
from .errors import ConfigError, ShapeError

FEATURE_EPS = 1e-8


@dataclass(frozen=True)
class EncoderConfig:
    """Geometry of one stage's encoder/decoder pair.

    Attributes:
        sample_rate: stage rate in Hz.
        stride: hop between latent frames, in samples.
        latent_dim: D, channels of the latent representation.
        base_kernel: W; head k uses kernel W / 2^k. In single-head mode the
            one conv uses W directly.
        num_heads: K parallel conv heads.
        stft_window: analysis window of the spectrogram branch, a power of
            two divisible by the stride.
        multi_head: False collapses to a plain conv encoder/decoder with
            no STFT branch.
    """

    sample_rate: int
    stride: int
    latent_dim: int
    base_kernel: int
    num_heads: int = 3
    stft_window: int = 256
    multi_head: bool = True

    def __post_init__(self):
        if min(self.sample_rate, self.stride, self.latent_dim, self.base_kernel) <= 0:
            raise ConfigError("EncoderConfig values must be positive")
        if not self.multi_head:
            return
        if self.num_heads < 1:
            raise ConfigError("num_heads must be at least 1")
        scale = 2**self.num_heads
        if self.base_kernel % scale:
            raise ConfigError(
                f"base_kernel {self.base_kernel} must be divisible by 2^K={scale}"
            )
        if self.latent_dim % scale:
            raise ConfigError(
                f"latent_dim {self.latent_dim} must be divisible by 2^K={scale}"
            )
        if self.stft_window & (self.stft_window - 1):
            raise ConfigError(f"stft_window must be a power of two, got {self.stft_window}")
        if self.stft_window % self.stride:
            raise ConfigError(
                f"stride {self.stride} must divide stft_window {self.stft_window}"
            )

    @property
    def head_kernels(self) -> tuple[int, ...]:
        return tuple(self.base_kernel // 2**k for k in range(1, self.num_heads + 1))

    @property
    def head_widths(self) -> tuple[int, ...]:
        scale = 2**self.num_heads
        return tuple(self.latent_dim * 2 ** (k - 1) // scale for k in range(1, self.num_heads + 1))

    @property
    def stft_channels(self) -> int:
        return self.latent_dim // 2**self.num_heads

    @property
    def stft_bins(self) -> int:
        return self.stft_window // 2 + 1

    def num_frames(self, num_samples: int) -> int:
        """T' = ceil(T / stride)."""
        return -(-num_samples // self.stride)


def _pad_for_kernel(x: torch.Tensor, kernel: int, stride: int) -> torch.Tensor:
    left, right = frame_padding(x.shape[-1], kernel, stride)
    if left or right:
        x = F.pad(x, (left, right))
    return x


class WaveEncoder(nn.Module):
    """Maps (batch, T) waveforms to (batch, D, T') latents."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.latent_dim
        if cfg.multi_head:
            self.heads = nn.ModuleList(
                nn.Conv1d(1, width, kernel, stride=cfg.stride)
                for kernel, width in zip(cfg.head_kernels, cfg.head_widths)
            )
            self.stft_proj = nn.Conv1d(cfg.stft_bins, cfg.stft_channels, 1)
            self.merge_in = nn.Conv1d(d, d, 1)
            self.merge_out = nn.Conv1d(d, d, 1)
            window = torch.hann_window(cfg.stft_window, periodic=True)
            self.register_buffer("window", window)
        else:
            self.conv = nn.Conv1d(1, d, cfg.base_kernel, stride=cfg.stride)

    def _spectral_features(self, padded: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        framed = _pad_for_kernel(padded, cfg.stft_window, cfg.stride)
        frames = framed.unfold(-1, cfg.stft_window, cfg.stride)
        mags = torch.abs(torch.fft.rfft(frames * self.window, dim=-1))
        logmag = torch.log1p(mags)
        mean = logmag.mean(dim=(1, 2), keepdim=True)
        std = logmag.std(dim=(1, 2), unbiased=False, keepdim=True)
        feats = (logmag - mean) / (std + FEATURE_EPS)
        return self.stft_proj(feats.transpose(1, 2))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 2:
            raise ShapeError(f"encoder expects (batch, samples), got {tuple(x.shape)}")
        cfg = self.cfg
        left, right = frame_padding(x.shape[-1], cfg.stride, cfg.stride)
        padded = F.pad(x, (left, right))
        if not cfg.multi_head:
            return F.relu(self.conv(_pad_for_kernel(padded, cfg.base_kernel, cfg.stride).unsqueeze(1)))
        signal = padded.unsqueeze(1)
        pieces = [
            F.relu(head(_pad_for_kernel(signal, kernel, cfg.stride)))
            for head, kernel in zip(self.heads, cfg.head_kernels)
        ]
        pieces.append(self._spectral_features(padded))
        merged = torch.cat(pieces, dim=1)
        return self.merge_out(F.relu(self.merge_in(merged)))


class WaveDecoder(nn.Module):
    """Maps (batch, D, T') latents back to (batch, out_length) waveforms."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.multi_head:
            total = sum(cfg.head_widths)
            self.pre = nn.Conv1d(cfg.latent_dim, total, 1)
            self.heads = nn.ModuleList(
                nn.ConvTranspose1d(width, 1, kernel, stride=cfg.stride)
                for kernel, width in zip(cfg.head_kernels, cfg.head_widths)
            )
        else:
            self.deconv = nn.ConvTranspose1d(cfg.latent_dim, 1, cfg.base_kernel,
                                             stride=cfg.stride)

    def _align(self, full: torch.Tensor, kernel: int, padded_len: int) -> torch.Tensor:
        # invert the encoder-side framing: drop the per-head left pad, then
        # fit to the padded signal length
        left, _ = frame_padding(padded_len, kernel, self.cfg.stride)
        out = full[..., left : left + padded_len]
        short = padded_len - out.shape[-1]
        if short > 0:
            out = F.pad(out, (0, short))
        return out

    def forward(self, h: torch.Tensor, out_length: int) -> torch.Tensor:
        cfg = self.cfg
        if h.dim() != 3 or h.shape[1] != cfg.latent_dim:
            raise ShapeError(
                f"decoder expects (batch, {cfg.latent_dim}, frames), got {tuple(h.shape)}"
            )
        frames = h.shape[-1]
        if cfg.num_frames(out_length) != frames:
            raise ShapeError(
                f"{frames} frames cannot decode to {out_length} samples at stride {cfg.stride}"
            )
        padded_len = frames * cfg.stride
        left, _ = frame_padding(out_length, cfg.stride, cfg.stride)
        if cfg.multi_head:
            sections = torch.split(F.relu(self.pre(h)), list(cfg.head_widths), dim=1)
            out = None
            for section, head, kernel in zip(sections, self.heads, cfg.head_kernels):
                piece = self._align(head(section), kernel, padded_len).squeeze(1)
                out = piece if out is None else out + piece
        else:
            out = self._align(self.deconv(h), cfg.base_kernel, padded_len).squeeze(1)
        return out[..., left : left + out_length]


class StageAutoencoder(nn.Module):
    """Encoder/decoder pair; reconstruct() is decode(encode(x))."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = WaveEncoder(cfg)
        self.decoder = WaveDecoder(cfg)

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x), x.shape[-1])
