"""Toy track synthesis, stem-folder ingestion, augmentation and batching.

Tracks are sets of aligned per-instrument stems. The toy generator makes
spectrally separable archetypes (harmonic tone, band-passed noise, decaying
click train, linear chirp) so that a small model trained on a handful of
tracks has something it can actually pull apart. Real stems come from a
folder of ``<root>/<track>/<instrument>.wav`` files.

Batches carry the same clip at every stage rate. The mixture at each rate
is recomputed as the float32 sum of the per-source resampled targets, in
instrument order, so mixture == sum(targets) holds exactly, elementwise.
"""

from __future__ import annotations

import functools
import logging
import operator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import signal

from .audio import Waveform, load_wav, resample, save_wav, wav_num_channels
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

MIXTURE_TOLERANCE = 2e-4  # a few 16-bit quantization steps


@dataclass
class SourceSet:
    """Aligned per-instrument stems for one track.

    ``alt_sources`` holds a second channel for stereo material; toy tracks
    are mono and leave it None.
    """

    track_id: str
    sources: dict[str, Waveform]
    alt_sources: dict[str, Waveform] | None = None

    def __post_init__(self):
        if not self.sources:
            raise DataError(f"track '{self.track_id}' has no sources")
        lengths = {len(w) for w in self.sources.values()}
        rates = {w.sample_rate for w in self.sources.values()}
        if len(lengths) != 1 or len(rates) != 1:
            raise DataError(
                f"track '{self.track_id}' stems disagree on length or rate"
            )
        if self.alt_sources is not None:
            if set(self.alt_sources) != set(self.sources):
                raise DataError(
                    f"track '{self.track_id}' alternate channel misses stems"
                )

    @property
    def instruments(self) -> tuple[str, ...]:
        return tuple(self.sources)

    @property
    def sample_rate(self) -> int:
        return next(iter(self.sources.values())).sample_rate

    @property
    def num_samples(self) -> int:
        return len(next(iter(self.sources.values())))

    def mixture(self) -> Waveform:
        total = sum(w.samples for w in self.sources.values())
        return Waveform(total, self.sample_rate)


# --- toy synthesis ---------------------------------------------------------

@dataclass(frozen=True)
class ToySpec:
    """Recipe for synthetic tracks. Per-archetype fields pin otherwise
    random parameters, mostly useful in tests."""

    instruments: tuple[str, ...] = ("tone", "noise", "clicks", "chirp")
    duration_seconds: float = 4.0
    sample_rate: int = 32000
    tone_f0: float | None = None
    noise_band: tuple[float, float] | None = None
    click_interval: float | None = None
    chirp_span: tuple[float, float] | None = None

    def __post_init__(self):
        if len(self.instruments) < 2:
            raise ConfigError("toy tracks need at least two instruments")
        unknown = [i for i in self.instruments if i not in ARCHETYPES]
        if unknown:
            raise ConfigError(
                f"unknown toy instruments {unknown}, choose from {sorted(ARCHETYPES)}"
            )
        if len(set(self.instruments)) != len(self.instruments):
            raise ConfigError("duplicate toy instruments")
        if self.duration_seconds <= 0 or self.sample_rate <= 0:
            raise ConfigError("bad toy duration or rate")


def _synth_tone(rng: np.random.Generator, t: np.ndarray, spec: ToySpec) -> np.ndarray:
    f0 = spec.tone_f0 if spec.tone_f0 is not None else rng.uniform(110.0, 440.0)
    out = np.zeros_like(t)
    for k in range(1, 7):
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(2 * np.pi * k * f0 * t + phase) / k
    return out


def _synth_noise(rng: np.random.Generator, t: np.ndarray, spec: ToySpec) -> np.ndarray:
    if spec.noise_band is not None:
        low, high = spec.noise_band
    else:
        low = rng.uniform(500.0, 1500.0)
        high = low + rng.uniform(500.0, 1500.0)
    rate = spec.sample_rate
    sos = signal.butter(4, [low, high], btype="bandpass", fs=rate, output="sos")
    return signal.sosfiltfilt(sos, rng.standard_normal(t.shape[0]))


def _synth_clicks(rng: np.random.Generator, t: np.ndarray, spec: ToySpec) -> np.ndarray:
    rate = spec.sample_rate
    out = np.zeros(t.shape[0])
    pos = rng.uniform(0.0, 0.1)
    while pos < spec.duration_seconds:
        start = int(pos * rate)
        tau = rng.uniform(0.005, 0.02)
        length = min(int(5 * tau * rate) + 1, out.shape[0] - start)
        decay = np.exp(-np.arange(length) / (tau * rate))
        out[start:start + length] += rng.uniform(0.5, 1.0) * decay
        if spec.click_interval is not None:
            pos += spec.click_interval
        else:
            pos += rng.uniform(0.2, 0.4)
    return out


def _synth_chirp(rng: np.random.Generator, t: np.ndarray, spec: ToySpec) -> np.ndarray:
    if spec.chirp_span is not None:
        f_start, f_end = spec.chirp_span
    else:
        f_start = rng.uniform(200.0, 800.0)
        f_end = rng.uniform(1500.0, 3500.0)
    return signal.chirp(t, f0=f_start, f1=f_end, t1=spec.duration_seconds,
                        method="linear")


ARCHETYPES = {
    "tone": _synth_tone,
    "noise": _synth_noise,
    "clicks": _synth_clicks,
    "chirp": _synth_chirp,
}


def _set_level(rng: np.random.Generator, x: np.ndarray) -> np.ndarray:
    """Scale to a random RMS in [0.08, 0.15], then cap the peak at 0.95."""
    rms = float(np.sqrt(np.mean(x**2)))
    if rms == 0.0:
        raise DataError("synthesized stem is silent")
    x = x * (rng.uniform(0.08, 0.15) / rms)
    peak = float(np.max(np.abs(x)))
    if peak > 0.95:
        x = x * (0.95 / peak)
    return x


def synth_toy_track(seed, spec: ToySpec, track_id: str | None = None) -> SourceSet:
    """Deterministically synthesize one toy track from a seed."""
    rng = np.random.default_rng(seed)
    n = round(spec.duration_seconds * spec.sample_rate)
    t = np.arange(n) / spec.sample_rate
    sources = {}
    for name in spec.instruments:
        raw = ARCHETYPES[name](rng, t, spec)
        sources[name] = Waveform(_set_level(rng, raw), spec.sample_rate)
    mixture_peak = float(np.max(np.abs(sum(w.samples for w in sources.values()))))
    if mixture_peak >= 1.0:
        # shrink every stem together so the summed mixture stays in range
        # and additivity is untouched
        factor = 0.99 / mixture_peak
        sources = {k: Waveform(w.samples * factor, spec.sample_rate)
                   for k, w in sources.items()}
    if track_id is None:
        track_id = f"toy-{seed}"
    return SourceSet(track_id=track_id, sources=sources)


def write_toy_dataset(root, num_tracks: int, spec: ToySpec, seed: int = 0) -> list[Path]:
    """Write ``num_tracks`` toy tracks as stem folders under root.

    Each track gets its own rng stream from (seed, index), so regenerating
    with the same arguments reproduces the files bit for bit.
    """
    if num_tracks < 1:
        raise ConfigError("num_tracks must be positive")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for idx in range(num_tracks):
        name = f"track{idx:03d}"
        track = synth_toy_track([seed, idx], spec, track_id=name)
        track_dir = root / name
        track_dir.mkdir(exist_ok=True)
        for instrument, wave in track.sources.items():
            save_wav(track_dir / f"{instrument}.wav", wave)
        save_wav(track_dir / "mixture.wav", track.mixture())
        written.append(track_dir)
    return written


# --- folder ingestion ------------------------------------------------------

def ingest_folder(root, instruments: tuple[str, ...]) -> list[SourceSet]:
    """Load every usable track directory under root.

    A track is usable when all instrument stems are present. Tracks with
    missing stems are skipped with a warning; an inconsistent or failed
    mixture check is an error, since it means the data is corrupt rather
    than merely incomplete.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset folder not found: {root}")
    tracks = []
    for track_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        missing = [i for i in instruments if not (track_dir / f"{i}.wav").exists()]
        if missing:
            log.warning("skipping track '%s': missing stems %s",
                        track_dir.name, missing)
            continue
        sources = {}
        alt = {}
        stereo = False
        for instrument in instruments:
            path = track_dir / f"{instrument}.wav"
            if wav_num_channels(path) >= 2:
                stereo = True
                sources[instrument] = load_wav(path, channel=0)
                alt[instrument] = load_wav(path, channel=1)
            else:
                sources[instrument] = load_wav(path, channel=0)
                alt[instrument] = sources[instrument]
        track = SourceSet(track_id=track_dir.name, sources=sources,
                          alt_sources=alt if stereo else None)
        mix_path = track_dir / "mixture.wav"
        if mix_path.exists():
            stored = load_wav(mix_path, channel=0)
            computed = track.mixture()
            if len(stored) != len(computed) or stored.sample_rate != computed.sample_rate:
                raise DataError(f"track '{track_dir.name}' mixture shape mismatch")
            err = float(np.max(np.abs(stored.samples - computed.samples)))
            if err > MIXTURE_TOLERANCE:
                raise DataError(
                    f"track '{track_dir.name}' mixture differs from stem sum "
                    f"by {err:.2e} (tolerance {MIXTURE_TOLERANCE:.0e})"
                )
        tracks.append(track)
    if not tracks:
        raise DataError(f"no usable tracks under {root}")
    return tracks


def split_tracks(tracks: list[SourceSet], val_fraction: float,
                 seed: int = 0) -> tuple[list[SourceSet], list[SourceSet]]:
    """Deterministic train/validation split. With a nonzero fraction both
    sides keep at least one track."""
    if not 0 <= val_fraction < 1:
        raise ConfigError("val_fraction must be in [0, 1)")
    if val_fraction == 0 or len(tracks) < 2:
        return list(tracks), []
    order = np.random.default_rng(seed).permutation(len(tracks))
    n_val = int(round(len(tracks) * val_fraction))
    n_val = min(max(n_val, 1), len(tracks) - 1)
    val_idx = set(order[:n_val].tolist())
    train = [t for i, t in enumerate(tracks) if i not in val_idx]
    val = [t for i, t in enumerate(tracks) if i in val_idx]
    return train, val


# --- augmentation ----------------------------------------------------------

@dataclass(frozen=True)
class AugmentDraw:
    """Frozen record of every random choice for one batch element, so the
    same draw always produces the same element."""

    donors: dict[str, int]
    offsets: dict[str, int]
    gains: dict[str, float]
    channels: dict[str, int]


def identity_draw(track_idx: int, instruments: tuple[str, ...]) -> AugmentDraw:
    return AugmentDraw(
        donors={i: track_idx for i in instruments},
        offsets={i: 0 for i in instruments},
        gains={i: 1.0 for i in instruments},
        channels={i: 0 for i in instruments},
    )


def sample_augment(rng: np.random.Generator, pool: list[SourceSet],
                   track_idx: int, crop_samples: int,
                   shuffle_prob: float = 0.5) -> AugmentDraw:
    """Draw one element's augmentation: a crop offset, per-source gains
    from (0.75, 1.25), per-source channel picks, and, for half the
    elements, an independent donor track per instrument."""
    instruments = pool[track_idx].instruments
    donors = {i: track_idx for i in instruments}
    if rng.random() < shuffle_prob:
        for name in instruments:
            donors[name] = int(rng.integers(len(pool)))
    offsets = {}
    for name in instruments:
        headroom = pool[donors[name]].num_samples - crop_samples
        if headroom < 0:
            raise DataError(
                f"crop of {crop_samples} samples exceeds track "
                f"'{pool[donors[name]].track_id}'"
            )
        offsets[name] = int(rng.integers(headroom + 1))
    gains = {i: float(rng.uniform(0.75, 1.25)) for i in instruments}
    channels = {i: int(rng.integers(2)) for i in instruments}
    return AugmentDraw(donors=donors, offsets=offsets, gains=gains,
                       channels=channels)


def apply_augment(pool: list[SourceSet], draw: AugmentDraw,
                  crop_samples: int) -> dict[str, np.ndarray]:
    """Materialize cropped, scaled stems at the pool's native rate."""
    stems = {}
    for name, donor in draw.donors.items():
        track = pool[donor]
        use_alt = draw.channels[name] == 1 and track.alt_sources is not None
        bank = track.alt_sources if use_alt else track.sources
        start = draw.offsets[name]
        segment = bank[name].samples[start:start + crop_samples]
        stems[name] = segment * draw.gains[name]
    return stems


# --- batching --------------------------------------------------------------

@dataclass
class TrainingBatch:
    """One optimizer step's worth of clips, at every stage rate.

    mixtures[j] is (batch, samples_at_rate_j) float32, and equals the
    in-order sum of targets[j] exactly.
    """

    instruments: tuple[str, ...]
    rates: tuple[int, ...]
    mixtures: list[torch.Tensor]
    targets: list[dict[str, torch.Tensor]]

    @property
    def batch_size(self) -> int:
        return self.mixtures[0].shape[0]


def _element_at_rates(stems: dict[str, np.ndarray], source_rate: int,
                      rates: tuple[int, ...]) -> list[dict[str, np.ndarray]]:
    out = []
    for rate in rates:
        out.append({
            name: resample(Waveform(arr, source_rate), rate).samples.astype(np.float32)
            for name, arr in stems.items()
        })
    return out


def make_training_batch(pool: list[SourceSet], rng: np.random.Generator,
                        batch_size: int, crop_seconds: float,
                        rates: tuple[int, ...],
                        shuffle_prob: float = 0.5) -> TrainingBatch:
    """Assemble a batch by drawing augmented crops from the pool."""
    if not pool:
        raise DataError("empty track pool")
    source_rate = pool[0].sample_rate
    if any(t.sample_rate != source_rate for t in pool):
        raise DataError("pool tracks disagree on sample rate")
    crop_samples = round(crop_seconds * source_rate)
    draws = []
    for _ in range(batch_size):
        track_idx = int(rng.integers(len(pool)))
        draws.append(sample_augment(rng, pool, track_idx, crop_samples, shuffle_prob))
    return batch_from_draws(pool, draws, crop_seconds, rates)


def batch_from_draws(pool: list[SourceSet], draws: list[AugmentDraw],
                     crop_seconds: float, rates: tuple[int, ...]) -> TrainingBatch:
    """Batch assembly from explicit draws; used to pin augmentation in tests."""
    if not draws:
        raise DataError("need at least one draw")
    source_rate = pool[0].sample_rate
    instruments = pool[0].instruments
    crop_samples = round(crop_seconds * source_rate)
    per_rate: list[dict[str, list[np.ndarray]]] = [
        {name: [] for name in instruments} for _ in rates
    ]
    for draw in draws:
        stems = apply_augment(pool, draw, crop_samples)
        for j, stems_r in enumerate(_element_at_rates(stems, source_rate, rates)):
            for name in instruments:
                per_rate[j][name].append(stems_r[name])
    targets = []
    mixtures = []
    for j in range(len(rates)):
        stacked = {name: torch.from_numpy(np.stack(per_rate[j][name]))
                   for name in instruments}
        targets.append(stacked)
        mixtures.append(functools.reduce(operator.add,
                                         [stacked[name] for name in instruments]))
    return TrainingBatch(instruments=instruments, rates=tuple(rates),
                         mixtures=mixtures, targets=targets)
