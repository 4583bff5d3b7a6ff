"""Inference-time evaluation: overlap-add separation of full tracks,
least-squares scale fitting, SI-SNR scoring and report rendering.

Models are trained on short crops, so full tracks are processed in
overlapping segments that are cross-faded back together. Estimates are
scale-fitted against the mixture before scoring or export; the training
loss is scale-free, so absolute gains are otherwise arbitrary.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .audio import Waveform, load_wav, resample, save_wav
from .data import SourceSet
from .errors import ConfigError, DataError, ShapeError
from .losses import si_snr_np
from .multistage import MultiStageModel

log = logging.getLogger(__name__)

RIDGE = 1e-8

# Called once per segment with the same clip at every stage rate (ascending,
# float64); returns one estimate per instrument at the last rate, same length
# as the last input.
SegmentFn = Callable[[list[np.ndarray]], dict[str, np.ndarray]]


def fit_scale(mixture: Waveform, estimates: Sequence[Waveform]) -> np.ndarray:
    """Least-squares gains making the weighted estimate sum match the mixture.

    Solves the normal equations G a = c with G_ij = <est_i, est_j> and
    c_i = <est_i, mixture>. A ridge of RIDGE on G's diagonal keeps
    rank-deficient estimate sets (collinear or silent stems) solvable; for
    well-conditioned inputs it perturbs the exact solution far below any
    tolerance we rely on.

    Args:
        mixture: reference signal.
        estimates: candidate stems, same rate and length as the mixture.

    Returns:
        float64 gain vector aligned with the estimate order.
    """
    if not estimates:
        raise ShapeError("fit_scale needs at least one estimate")
    for est in estimates:
        if est.sample_rate != mixture.sample_rate:
            raise ShapeError(
                f"estimate at {est.sample_rate} Hz, mixture at {mixture.sample_rate} Hz"
            )
        if len(est) != len(mixture):
            raise ShapeError(
                f"estimate has {len(est)} samples, mixture has {len(mixture)}"
            )
    mat = np.stack([est.samples for est in estimates])
    if not mat.any():
        log.warning("fit_scale: all estimates are zero, gains forced to zero")
    gram = mat @ mat.T
    rhs = mat @ mixture.samples
    return np.linalg.solve(gram + RIDGE * np.eye(len(estimates)), rhs)


def crossfade_window(length: int) -> np.ndarray:
    """Strictly positive triangle of integer-valued floats.

    Copies shifted by half a segment sum to the constant length/2 + 1, so
    dividing the overlap-add accumulator by the accumulated window restores
    unit gain everywhere, including the half-covered edges.
    """
    if length <= 0 or length % 2:
        raise ConfigError(f"crossfade window length must be even, got {length}")
    n = np.arange(length, dtype=np.float64)
    return np.minimum(n + 1.0, length - n)


def _segment_grid(segment_seconds: float, rate: int) -> tuple[int, int]:
    exact = segment_seconds * rate
    seg = int(round(exact))
    if seg <= 0 or abs(exact - seg) > 1e-6 or seg % 2:
        raise ConfigError(
            f"segment of {segment_seconds} s at {rate} Hz is not an even sample count"
        )
    return seg, seg // 2


def separate_track(
    mixture: Waveform,
    separator: SegmentFn,
    stage_rates: Sequence[int],
    segment_seconds: float = 8.0,
) -> dict[str, Waveform]:
    """Separate a full mixture by running ``separator`` over segments.

    The mixture is resampled to every stage rate and cut into segments of
    ``segment_seconds`` with 50% overlap (the tail is zero-padded to a full
    segment). Per-segment estimates are blended with a triangular cross-fade
    and the result is trimmed back to the mixture length at the final rate.

    Segments are processed sequentially, so stateful separators see them in
    order.
    """
    rates = tuple(stage_rates)
    if not rates:
        raise ConfigError("separate_track needs at least one stage rate")
    grids = [_segment_grid(segment_seconds, rate) for rate in rates]
    per_rate = [resample(mixture, rate).samples for rate in rates]
    seg_top, hop_top = grids[-1]
    total = per_rate[-1].shape[0]
    if total == 0:
        raise DataError("cannot separate an empty mixture")
    n_segments = 1 if total <= seg_top else -(-(total - seg_top) // hop_top) + 1
    padded = []
    for samples, (seg, hop) in zip(per_rate, grids):
        needed = (n_segments - 1) * hop + seg
        padded.append(np.pad(samples, (0, max(0, needed - samples.shape[0]))))
    window = crossfade_window(seg_top)
    out_len = (n_segments - 1) * hop_top + seg_top
    accum: dict[str, np.ndarray] = {}
    weight = np.zeros(out_len)
    for k in range(n_segments):
        pieces = [
            samples[k * hop : k * hop + seg]
            for samples, (seg, hop) in zip(padded, grids)
        ]
        result = separator(pieces)
        if not result:
            raise DataError("separator returned no instruments")
        if not accum:
            accum = {name: np.zeros(out_len) for name in result}
        elif set(result) != set(accum):
            raise DataError("separator changed its instrument set between segments")
        start = k * hop_top
        weight[start : start + seg_top] += window
        for name, est in result.items():
            est = np.asarray(est, dtype=np.float64)
            if est.shape != (seg_top,):
                raise ShapeError(
                    f"separator returned shape {est.shape} for a {seg_top}-sample segment"
                )
            accum[name][start : start + seg_top] += window * est
    return {
        name: Waveform((buf / weight)[:total], rates[-1])
        for name, buf in accum.items()
    }


def model_separator(model: MultiStageModel) -> SegmentFn:
    """Wrap a model as a per-segment separator returning final-stage stems."""
    model.eval()

    def run(segments: list[np.ndarray]) -> dict[str, np.ndarray]:
        with torch.no_grad():
            mixes = [
                torch.as_tensor(seg, dtype=torch.float32).unsqueeze(0)
                for seg in segments
            ]
            final = model.separate(mixes).final
        return {
            name: wav.squeeze(0).double().numpy()
            for name, wav in final.waveforms.items()
        }

    return run


def score_track(
    track: SourceSet,
    separator: SegmentFn,
    stage_rates: Sequence[int],
    segment_seconds: float = 8.0,
) -> dict[str, float]:
    """Per-instrument SI-SNR (dB) of scale-fitted estimates for one track.

    References are the track's stems resampled to the final stage rate, the
    rate the estimates come out at.
    """
    final_rate = tuple(stage_rates)[-1]
    mixture = track.mixture()
    estimates = separate_track(mixture, separator, stage_rates, segment_seconds)
    if set(estimates) != set(track.instruments):
        raise DataError(
            f"track '{track.track_id}' stems {sorted(track.instruments)} do not "
            f"match the separator's instruments {sorted(estimates)}"
        )
    names = list(track.instruments)
    mixture_ref = resample(mixture, final_rate)
    gains = fit_scale(mixture_ref, [estimates[name] for name in names])
    scores = {}
    for gain, name in zip(gains, names):
        reference = resample(track.sources[name], final_rate)
        scores[name] = si_snr_np(gain * estimates[name].samples, reference.samples)
    return scores


@dataclass(frozen=True)
class EvalReport:
    """Per-track SI-SNR scores with on-demand aggregates.

    Attributes:
        dataset: identifier of the scored material.
        fingerprint: config fingerprint of the scoring model.
        track_ids: track order of the score tuples.
        scores: instrument -> per-track SI-SNR in dB.
    """

    dataset: str
    fingerprint: str
    track_ids: tuple[str, ...]
    scores: dict[str, tuple[float, ...]]

    def median(self, instrument: str) -> float:
        return float(np.median(self.scores[instrument]))

    def mean(self, instrument: str) -> float:
        return float(np.mean(self.scores[instrument]))

    def records(self) -> list[str]:
        """One JSON record per track and instrument."""
        lines = []
        for idx, track_id in enumerate(self.track_ids):
            for name, values in self.scores.items():
                lines.append(
                    json.dumps(
                        {
                            "dataset": self.dataset,
                            "config": self.fingerprint,
                            "track": track_id,
                            "instrument": name,
                            "si_snr": values[idx],
                        }
                    )
                )
        return lines

    def table(self) -> str:
        """Aggregate table, one row per instrument plus the macro average."""
        header = f"{'instrument':<12} {'median':>8} {'mean':>8}"
        lines = [header, "-" * len(header)]
        for name in self.scores:
            lines.append(
                f"{name:<12} {self.median(name):>8.2f} {self.mean(name):>8.2f}"
            )
        med = np.mean([self.median(name) for name in self.scores])
        mean = np.mean([self.mean(name) for name in self.scores])
        lines.append(f"{'average':<12} {med:>8.2f} {mean:>8.2f}")
        return "\n".join(lines)


def evaluate(
    model: MultiStageModel,
    tracks: Sequence[SourceSet],
    dataset_name: str = "",
    segment_seconds: float = 8.0,
    workers: int = 4,
) -> EvalReport:
    """Score every track with the model and aggregate per instrument.

    Tracks run in parallel worker threads (the model is used read-only);
    each track's segment pipeline stays sequential and the report is
    assembled in input order.

    Raises:
        DataError: no tracks, or a track's stems do not match the model's
            instrument vocabulary.
    """
    if not tracks:
        raise DataError("evaluate needs at least one track")
    vocabulary = set(model.instruments)
    for track in tracks:
        if set(track.instruments) != vocabulary:
            raise DataError(
                f"track '{track.track_id}' instruments {sorted(track.instruments)} "
                f"do not match the model's {sorted(vocabulary)}"
            )
    separator = model_separator(model)
    rates = model.cfg.stage_rates

    def job(track: SourceSet) -> dict[str, float]:
        return score_track(track, separator, rates, segment_seconds)

    if workers > 1 and len(tracks) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(tracks))) as pool:
            results = list(pool.map(job, tracks))
    else:
        results = [job(track) for track in tracks]
    scores = {
        name: tuple(result[name] for result in results)
        for name in model.instruments
    }
    return EvalReport(
        dataset=dataset_name,
        fingerprint=model.cfg.fingerprint(),
        track_ids=tuple(track.track_id for track in tracks),
        scores=scores,
    )


def separate_file(
    model: MultiStageModel,
    input_path,
    out_dir,
    keep_input_rate: bool = False,
    segment_seconds: float = 8.0,
) -> list[Path]:
    """Separate a WAV file into one stem file per instrument.

    Stems are scale-fitted against the input mixture and written as
    ``<instrument>.wav`` at the model's final stage rate; with
    ``keep_input_rate`` they are resampled back and padded or trimmed to the
    input length. Multichannel input is averaged to mono first.
    """
    mixture = load_wav(input_path)
    rates = model.cfg.stage_rates
    estimates = separate_track(
        mixture, model_separator(model), rates, segment_seconds
    )
    names = list(model.instruments)
    mixture_ref = resample(mixture, rates[-1])
    gains = fit_scale(mixture_ref, [estimates[name] for name in names])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for gain, name in zip(gains, names):
        stem = Waveform(gain * estimates[name].samples, rates[-1])
        if keep_input_rate:
            stem = resample(stem, mixture.sample_rate)
            if len(stem) > len(mixture):
                stem = Waveform(stem.samples[: len(mixture)], stem.sample_rate)
            elif len(stem) < len(mixture):
                stem = Waveform(
                    np.pad(stem.samples, (0, len(mixture) - len(stem))),
                    stem.sample_rate,
                )
        path = out_dir / f"{name}.wav"
        save_wav(path, stem)
        paths.append(path)
    return paths
