"""Waveform containers, WAV file I/O, resampling and STFT features.

All pipeline audio is mono float64 in [-1, 1]. Files are 16-bit PCM RIFF
WAV; stereo files expose their channels at load time so the augmentation
step can pick one, everything downstream is single channel.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .errors import AudioIOError

PCM_SCALE = 32768  # 2**15, one LSB of 16-bit audio is 1/PCM_SCALE
PIPELINE_RATES = (8000, 16000, 32000)


@dataclass(frozen=True)
class Waveform:
    """A mono signal with its sample rate.

    Attributes:
        samples: 1-D float array, finite values.
        sample_rate: samples per second, positive.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise AudioIOError(f"Waveform expects 1-D samples, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise AudioIOError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise AudioIOError("Waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def rms(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples**2)))


@dataclass(frozen=True)
class Spectrogram:
    """Magnitude STFT frames.

    Attributes:
        magnitudes: (bins, frames) nonnegative array, bins == window_len // 2 + 1.
        window_len: analysis window length in samples.
        frame_hop: hop between frame starts in samples.
        sample_rate: rate of the analyzed signal.
    """

    magnitudes: np.ndarray
    window_len: int
    frame_hop: int
    sample_rate: int

    def __post_init__(self):
        mags = np.asarray(self.magnitudes, dtype=np.float64)
        expected_bins = self.window_len // 2 + 1
        if mags.ndim != 2 or mags.shape[0] != expected_bins:
            raise AudioIOError(
                f"Spectrogram expects ({expected_bins}, frames) magnitudes, got {mags.shape}"
            )
        if mags.size and mags.min() < 0:
            raise AudioIOError("Spectrogram magnitudes must be nonnegative")
        object.__setattr__(self, "magnitudes", mags)

    @property
    def num_frames(self) -> int:
        return self.magnitudes.shape[1]


def load_wav(path, channel: int | None = None) -> Waveform:
    """Read a 16-bit PCM WAV file as a mono Waveform.

    Args:
        path: file to read.
        channel: for multichannel files, which channel to keep. Mono files
            ignore it; multichannel files average channels when it is None.

    Returns:
        Waveform with samples in [-1, 1] (int16 / 32768).

    Raises:
        AudioIOError: unreadable file, non-16-bit sample width, or a channel
            index out of range.
    """
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as handle:
            n_channels = handle.getnchannels()
            sample_width = handle.getsampwidth()
            rate = handle.getframerate()
            n_frames = handle.getnframes()
            raw = handle.readframes(n_frames)
    except (wave.Error, EOFError, OSError) as exc:
        raise AudioIOError(f"cannot read WAV file {path}: {exc}") from exc
    if sample_width != 2:
        raise AudioIOError(f"{path}: only 16-bit PCM is supported, got {8 * sample_width}-bit")
    data = np.frombuffer(raw, dtype="<i2")
    if n_channels > 1:
        if data.size % n_channels:
            raise AudioIOError(f"{path}: frame data not divisible by channel count")
        data = data.reshape(-1, n_channels)
        if channel is None:
            samples = data.mean(axis=1) / PCM_SCALE
        else:
            if not 0 <= channel < n_channels:
                raise AudioIOError(f"{path}: channel {channel} out of range (0..{n_channels - 1})")
            samples = data[:, channel].astype(np.float64) / PCM_SCALE
    else:
        samples = data.astype(np.float64) / PCM_SCALE
    return Waveform(samples=samples, sample_rate=rate)


def wav_num_channels(path) -> int:
    """Channel count of a WAV file without reading its frames."""
    try:
        with wave.open(str(path), "rb") as handle:
            return handle.getnchannels()
    except (wave.Error, EOFError, OSError) as exc:
        raise AudioIOError(f"cannot read WAV file {path}: {exc}") from exc


def save_wav(path, wave_out: Waveform) -> None:
    """Write a Waveform as mono 16-bit PCM, clipping to [-1, 1].

    Round trip through disk changes each sample by at most 2**-15.
    """
    path = Path(path)
    clipped = np.clip(wave_out.samples, -1.0, 1.0)
    ints = np.clip(np.round(clipped * PCM_SCALE), -PCM_SCALE, PCM_SCALE - 1).astype("<i2")
    try:
        with wave.open(str(path), "wb") as handle:
            handle.setnchannels(1)
            handle.setsampwidth(2)
            handle.setframerate(wave_out.sample_rate)
            handle.writeframes(ints.tobytes())
    except (wave.Error, OSError) as exc:
        raise AudioIOError(f"cannot write WAV file {path}: {exc}") from exc


def resample(wave_in: Waveform, target_rate: int) -> Waveform:
    """Resample with a windowed-sinc polyphase filter (Kaiser beta=8).

    Output length is round(len * target_rate / source_rate), rounding halves
    up. Equal rates return the samples unchanged. The operation is linear in
    its input.
    """
    if target_rate <= 0:
        raise AudioIOError(f"target_rate must be positive, got {target_rate}")
    if target_rate == wave_in.sample_rate:
        return Waveform(samples=wave_in.samples.copy(), sample_rate=target_rate)
    gcd = np.gcd(target_rate, wave_in.sample_rate)
    up = target_rate // gcd
    down = wave_in.sample_rate // gcd
    out = resample_poly(wave_in.samples, up, down, window=("kaiser", 8.0))
    target_len = (len(wave_in) * target_rate + wave_in.sample_rate // 2) // wave_in.sample_rate
    if out.shape[0] > target_len:
        out = out[:target_len]
    elif out.shape[0] < target_len:
        out = np.pad(out, (0, target_len - out.shape[0]))
    return Waveform(samples=out, sample_rate=target_rate)


def frame_padding(total: int, window: int, hop: int) -> tuple[int, int]:
    """Symmetric padding that aligns window/hop framing to the ceil(T/hop) grid.

    Returns (left, right) such that a kernel of size `window` sliding with
    `hop` over the padded signal produces exactly ceil(total / hop) frames.
    """
    frames = -(-total // hop)  # ceil
    padded = (frames - 1) * hop + window
    pad = max(0, padded - total)
    left = pad // 2
    return left, pad - left


def stft_features(wave_in: Waveform, window_len: int, frame_hop: int) -> Spectrogram:
    """Magnitude spectrogram of Hann-windowed frames.

    The signal is padded per frame_padding so the frame count is
    ceil(len / frame_hop), matching the latent frame grid when frame_hop
    equals the encoder stride.

    Args:
        wave_in: signal to analyze, at least window_len samples after padding.
        window_len: power of two window size.
        frame_hop: hop size, must divide window_len.

    Returns:
        Spectrogram of raw (unnormalized) magnitudes.
    """
    if window_len <= 0 or window_len & (window_len - 1):
        raise AudioIOError(f"window_len must be a power of two, got {window_len}")
    if frame_hop <= 0 or window_len % frame_hop:
        raise AudioIOError(f"frame_hop {frame_hop} must divide window_len {window_len}")
    if len(wave_in) == 0:
        raise AudioIOError("cannot compute STFT of an empty signal")
    left, right = frame_padding(len(wave_in), window_len, frame_hop)
    padded = np.pad(wave_in.samples, (left, right))
    n_frames = (padded.shape[0] - window_len) // frame_hop + 1
    idx = np.arange(window_len)[None, :] + frame_hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * hann_window(window_len)
    mags = np.abs(np.fft.rfft(frames, axis=1)).T
    return Spectrogram(
        magnitudes=mags,
        window_len=window_len,
        frame_hop=frame_hop,
        sample_rate=wave_in.sample_rate,
    )


def hann_window(length: int) -> np.ndarray:
    # periodic variant, standard for STFT analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


def standardize_features(spec: Spectrogram, eps: float = 1e-8) -> np.ndarray:
    """log(1 + magnitude) compressed and standardized to zero mean, unit variance.

    Statistics are per utterance, over all bins and frames. All-zero input
    stays all-zero.
    """
    logmag = np.log1p(spec.magnitudes)
    mean = logmag.mean()
    std = logmag.std()
    return (logmag - mean) / (std + eps)
