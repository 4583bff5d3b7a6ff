"""Training loop, checkpointing and the ablation suite.

The loop is deterministic by construction: the batch for step n is drawn
from a fresh rng seeded with (seed, n), so an interrupted run resumed from
a checkpoint sees exactly the batches an uninterrupted run would have.
"""

from __future__ import annotations

import copy
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from .config import ModelConfig, config_from_dict, plain_dict
from .data import SourceSet, batch_from_draws, identity_draw, make_training_batch, split_tracks
from .errors import CheckpointError, ConfigError, TrainingError
from .losses import StageLossInputs, si_snr, active_source_mask, total_loss
from .masking import layer_shapes, total_param_count
from .multistage import MultiStageModel, build_model, masking_param_count
from .optim import build_optimizer

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


# --- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    model_state: dict
    optimizer_state: dict
    step: int
    torch_rng: torch.Tensor


def snapshot(cfg: ModelConfig, model: MultiStageModel, optimizer, step: int) -> Checkpoint:
    return Checkpoint(
        config=cfg,
        model_state=copy.deepcopy(model.state_dict()),
        optimizer_state=copy.deepcopy(optimizer.state_dict()),
        step=step,
        torch_rng=torch.get_rng_state().clone(),
    )


def save_checkpoint(ck: Checkpoint, path) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config_yaml": yaml.safe_dump(plain_dict(ck.config.to_dict()), sort_keys=True),
        "model_state": ck.model_state,
        "optimizer_state": ck.optimizer_state,
        "step": ck.step,
        "torch_rng": ck.torch_rng,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint container")
    version = payload["format_version"]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version} unsupported, expected {CHECKPOINT_VERSION}"
        )
    cfg = config_from_dict(yaml.safe_load(payload["config_yaml"]))
    return Checkpoint(
        config=cfg,
        model_state=payload["model_state"],
        optimizer_state=payload["optimizer_state"],
        step=int(payload["step"]),
        torch_rng=payload["torch_rng"],
    )


def model_from_checkpoint(ck: Checkpoint) -> MultiStageModel:
    model = build_model(ck.config)
    model.load_state_dict(ck.model_state)
    return model


# --- metrics ---------------------------------------------------------------

@dataclass
class MetricRecord:
    step: int
    total: float
    terms: dict[str, float] = field(default_factory=dict)
    val_sisnr: float | None = None
    val_per_instrument: dict[str, float] | None = None

    def to_line(self) -> str:
        doc = {"step": self.step, "total": self.total, **self.terms}
        if self.val_sisnr is not None:
            doc["val_sisnr"] = self.val_sisnr
            doc.update({f"val/{k}": v for k, v in (self.val_per_instrument or {}).items()})
        return json.dumps(doc, sort_keys=True)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best_checkpoint: Checkpoint | None
    best_val: float
    metrics: list[MetricRecord]
    model: MultiStageModel


# --- one training step -----------------------------------------------------

def training_step(model: MultiStageModel, batch, weights):
    """Forward every stage and instrument, returning (loss, breakdown)."""
    result = model.separate(batch.mixtures)
    need_latents = bool(weights.w_diss or weights.w_sim)
    stages = []
    for j, out in enumerate(result.stages):
        est = torch.stack([out.waveforms[i] for i in batch.instruments], dim=1)
        ref = torch.stack([batch.targets[j][i] for i in batch.instruments], dim=1)
        mixture = batch.mixtures[j]
        decoded = None
        target_latents = None
        stage = model.stages[j]
        if weights.w_recon:
            decoded = stage.decoder(stage.encoder(mixture), mixture.shape[1])
        if need_latents:
            target_latents = torch.stack(
                [stage.encoder(batch.targets[j][i]) for i in batch.instruments],
                dim=1,
            )
        stages.append(StageLossInputs(
            estimates=est,
            references=ref,
            mixture=mixture,
            decoded_mixture=decoded,
            target_latents=target_latents,
        ))
    return total_loss(stages, weights)


def _first_nonfinite(model: MultiStageModel, breakdown: dict) -> str:
    for name, value in breakdown.items():
        if not math.isfinite(value):
            return f"loss term '{name}'"
    for name, param in model.named_parameters():
        if not torch.isfinite(param).all():
            return f"parameter '{name}'"
        if param.grad is not None and not torch.isfinite(param.grad).all():
            return f"gradient of '{name}'"
    return "total loss"


# --- validation ------------------------------------------------------------

def validate(model: MultiStageModel, tracks: list[SourceSet],
             crop_seconds: float) -> dict[str, float]:
    """Mean SI-SNR of the final stage over leading crops of the tracks.

    Returns per-instrument means plus their average under "mean".
    """
    if not tracks:
        raise TrainingError("validation needs at least one track")
    cfg = model.cfg
    draws = [identity_draw(i, tracks[i].instruments) for i in range(len(tracks))]
    batch = batch_from_draws(tracks, draws, crop_seconds, cfg.stage_rates)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            result = model.separate(batch.mixtures)
            final = result.final
            refs = batch.targets[-1]
            scores = {}
            for name in cfg.instruments:
                values = si_snr(final.waveforms[name], refs[name])
                active = active_source_mask(refs[name])
                scores[name] = float(values[active].mean()) if active.any() else float("nan")
    finally:
        if was_training:
            model.train()
    scores["mean"] = float(np.mean([scores[i] for i in cfg.instruments]))
    return scores


# --- the loop --------------------------------------------------------------

def train(cfg: ModelConfig, tracks: list[SourceSet], max_steps: int | None = None,
          resume_from=None, metrics_path=None) -> TrainResult:
    """Optimize a model on a track pool.

    Stops after ``max_steps`` total steps (default cfg.train.steps). Pass a
    checkpoint path as ``resume_from`` to continue a previous run; batches
    are replayed from the step counter, so the resumed trajectory matches
    an uninterrupted one exactly.
    """
    if not tracks:
        raise TrainingError("empty training pool")
    target_steps = cfg.train.steps if max_steps is None else max_steps
    torch.manual_seed(cfg.seed)
    model = build_model(cfg)
    optimizer = build_optimizer(cfg.optimizer, model.parameters())
    start_step = 0
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if ck.config.fingerprint() != cfg.fingerprint():
            raise CheckpointError(
                "checkpoint was trained with a different config "
                f"({ck.config.fingerprint()} != {cfg.fingerprint()})"
            )
        model.load_state_dict(ck.model_state)
        optimizer.load_state_dict(ck.optimizer_state)
        start_step = ck.step

    train_tracks, val_tracks = split_tracks(tracks, cfg.train.val_fraction, cfg.seed)
    weights = cfg.effective_loss_weights()
    metrics: list[MetricRecord] = []
    best_val = -math.inf
    best_ck: Checkpoint | None = None
    writer = open(metrics_path, "a") if metrics_path is not None else None
    try:
        model.train()
        for step in range(start_step, target_steps):
            rng = np.random.default_rng([cfg.seed, step])
            batch = make_training_batch(
                train_tracks, rng, cfg.train.batch_size,
                cfg.train.crop_seconds, cfg.stage_rates,
            )
            loss, breakdown = training_step(model, batch, weights)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at step {step + 1}: first offender is "
                    f"{_first_nonfinite(model, breakdown)}"
                )
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optimizer.grad_clip)
            optimizer.step()
            record = MetricRecord(step=step + 1, total=float(loss.detach()),
                                  terms=breakdown)
            done = step + 1 == target_steps
            if val_tracks and ((step + 1) % cfg.train.eval_interval == 0 or done):
                scores = validate(model, val_tracks, cfg.train.crop_seconds)
                record.val_sisnr = scores["mean"]
                record.val_per_instrument = {
                    k: v for k, v in scores.items() if k != "mean"
                }
                if scores["mean"] > best_val:
                    best_val = scores["mean"]
                    best_ck = snapshot(cfg, model, optimizer, step + 1)
                log.info("step %d: loss %.4f, validation SI-SNR %.2f dB",
                         step + 1, record.total, scores["mean"])
            metrics.append(record)
            if writer is not None:
                writer.write(record.to_line() + "\n")
    finally:
        if writer is not None:
            writer.close()
    final = snapshot(cfg, model, optimizer, max(target_steps, start_step))
    return TrainResult(checkpoint=final, best_checkpoint=best_ck,
                       best_val=best_val, metrics=metrics, model=model)


# --- ablation suite --------------------------------------------------------

# Additive ladder: the first four rows toggle improvements on one at a
# time, then "baseline" repeats the fully-toggled owned-bank config as the
# reference row for the sharing comparison, so rows 4 and 5 coincide under
# a shared budget and seed.
ABLATION_SEQUENCE = (
    ("conv_tasnet", "baseline", False, False, False),
    ("stronger_encoder", "baseline", True, False, False),
    ("aux_losses", "baseline", True, True, False),
    ("multi_stage", "baseline", True, True, True),
    ("baseline", "baseline", True, True, True),
    ("shared_tcn", "shared_tcn", True, True, True),
    ("meta", "meta", True, True, True),
)


def ablation_variant(base: ModelConfig, sharing: str, stronger: bool,
                     aux: bool, multi: bool) -> ModelConfig:
    rates = base.stage_rates if multi else (base.stage_rates[-1],)
    return replace(base, sharing=sharing, stronger_encoder=stronger,
                   aux_losses=aux, multi_stage=multi, stage_rates=rates)


@dataclass
class AblationRow:
    name: str
    config: ModelConfig
    val_per_instrument: dict[str, float]
    val_mean: float
    masking_params: int
    steps: int


def run_ablation_suite(base_cfg: ModelConfig, tracks: list[SourceSet],
                       steps: int | None = None, out_dir=None) -> list[AblationRow]:
    """Train every regime for the same small budget and report validation
    SI-SNR per instrument. With ``out_dir`` set, finished runs are saved and
    picked up again on a rerun instead of retraining."""
    steps = base_cfg.train.steps if steps is None else steps
    _, val_tracks = split_tracks(tracks, base_cfg.train.val_fraction, base_cfg.seed)
    if not val_tracks:
        raise ConfigError("ablation needs a nonzero val_fraction")
    rows = []
    for name, sharing, stronger, aux, multi in ABLATION_SEQUENCE:
        cfg = ablation_variant(base_cfg, sharing, stronger, aux, multi)
        ck_path = None if out_dir is None else Path(out_dir) / f"{name}.pt"
        resume = None
        if ck_path is not None and ck_path.exists():
            previous = load_checkpoint(ck_path)
            if previous.config.fingerprint() == cfg.fingerprint() and previous.step >= steps:
                log.info("ablation '%s': reusing finished checkpoint", name)
                model = model_from_checkpoint(previous)
                rows.append(_ablation_row(name, cfg, model, previous.step,
                                          val_tracks))
                continue
            if previous.config.fingerprint() == cfg.fingerprint():
                resume = ck_path
        result = train(cfg, tracks, max_steps=steps, resume_from=resume)
        if ck_path is not None:
            save_checkpoint(result.checkpoint, ck_path)
        rows.append(_ablation_row(name, cfg, result.model, steps, val_tracks))
    return rows


def deployed_masking_params(cfg: ModelConfig) -> int:
    """Masking parameters a deployed separator carries.

    Owned regimes store their mask tensors outright; the meta regime
    regenerates one mask network per instrument on demand, so what ships
    per instrument is a single network's worth (the generator's own storage
    is reported separately by param_count_report).
    """
    per_instrument = sum(
        total_param_count(cfg.tcn_config(j)) for j in range(cfg.num_stages)
    )
    if cfg.sharing == "meta":
        return per_instrument
    if cfg.sharing == "baseline":
        return len(cfg.instruments) * per_instrument
    io_size = per_stage_trunk = 0
    for j in range(cfg.num_stages):
        for shape in layer_shapes(cfg.tcn_config(j)):
            if shape.name in ("input_conv", "output_conv"):
                io_size += shape.size
            else:
                per_stage_trunk += shape.size
    return per_stage_trunk + len(cfg.instruments) * io_size


def _ablation_row(name, cfg, model, steps, val_tracks) -> AblationRow:
    scores = validate(model, val_tracks, cfg.train.crop_seconds)
    return AblationRow(
        name=name,
        config=cfg,
        val_per_instrument={k: v for k, v in scores.items() if k != "mean"},
        val_mean=scores["mean"],
        masking_params=deployed_masking_params(cfg),
        steps=steps,
    )


def format_ablation_table(rows: list[AblationRow]) -> str:
    """Aligned text table: one row per regime, one column per instrument
    plus the mean and the masking parameter count."""
    instruments = list(rows[0].val_per_instrument)
    header = ["regime"] + instruments + ["mean", "mask params"]
    lines = [header]
    for row in rows:
        lines.append(
            [row.name]
            + [f"{row.val_per_instrument[i]:.2f}" for i in instruments]
            + [f"{row.val_mean:.2f}", str(row.masking_params)]
        )
    widths = [max(len(line[c]) for line in lines) for c in range(len(header))]
    out = io.StringIO()
    for idx, line in enumerate(lines):
        out.write("  ".join(cell.rjust(w) for cell, w in zip(line, widths)).rstrip())
        out.write("\n")
        if idx == 0:
            out.write("  ".join("-" * w for w in widths).rstrip() + "\n")
    return out.getvalue()
