"""Training objectives.

The main term is negative scale-invariant SNR between estimates and
references. Two auxiliary terms shape the encoder's latent space using
encodings of the ground-truth stems: a dissimilarity penalty pushes
different instruments apart within a sample, a similarity reward pulls the
same instrument together across the batch. A reconstruction term keeps
decode(encode(x)) close to x. Per stage the four terms are combined with
fixed weights, stages are summed.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import torch

from .errors import ConfigError, ShapeError

EPS = 1e-8


def si_snr(est: torch.Tensor, ref: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Scale-invariant SNR in dB, computed over the last axis.

    Both signals are zero-meaned, the estimate is projected onto the
    reference, and the ratio of projection energy to residual energy is
    returned in dB. Scaling the estimate by any positive factor leaves the
    value unchanged; identical signals hit the cap 10*log10(energy / eps).

    Args:
        est: (..., T) estimate.
        ref: (..., T) reference, not identically zero along the last axis.

    Returns:
        (...,) tensor of dB values.
    """
    if est.shape != ref.shape:
        raise ShapeError(f"est {tuple(est.shape)} and ref {tuple(ref.shape)} differ")
    est = est - est.mean(dim=-1, keepdim=True)
    ref = ref - ref.mean(dim=-1, keepdim=True)
    ref_energy = (ref**2).sum(dim=-1, keepdim=True)
    proj = (est * ref).sum(dim=-1, keepdim=True) / ref_energy * ref
    noise = est - proj
    ratio = (proj**2).sum(dim=-1) / ((noise**2).sum(dim=-1) + eps)
    return 10.0 * torch.log10(ratio)


def si_snr_np(est, ref, eps: float = EPS) -> float:
    """Convenience scalar wrapper for numpy arrays."""
    value = si_snr(torch.as_tensor(est, dtype=torch.float64),
                   torch.as_tensor(ref, dtype=torch.float64), eps=eps)
    return float(value)


def active_source_mask(ref: torch.Tensor, threshold: float = 1e-6) -> torch.Tensor:
    """True where a reference crop carries energy; silent crops are excluded
    from loss means so they cannot drag the dB average to the cap."""
    return (ref**2).mean(dim=-1) > threshold**2


def mean_si_snr_loss(est: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Negative SI-SNR averaged over the active (batch, instrument) entries."""
    active = active_source_mask(ref)
    if not torch.any(active):
        return est.sum() * 0.0
    values = si_snr(est, ref)
    return -values[active].mean()


def dissimilarity_loss(latents: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Average cosine similarity between elementwise-absolute latents of
    different instruments within each sample.

    Args:
        latents: (batch, instruments, ...) per-instrument latents.

    Returns:
        scalar in [0, 1]; 0 for orthogonal supports, 1 for identical ones.
    """
    flat = latents.abs().flatten(start_dim=2)
    n_inst = flat.shape[1]
    if n_inst < 2:
        raise ConfigError("dissimilarity needs at least two instruments")
    norms = flat.norm(dim=-1)
    total = 0.0
    pairs = list(combinations(range(n_inst), 2))
    for i, j in pairs:
        dot = (flat[:, i] * flat[:, j]).sum(dim=-1)
        total = total + dot / (norms[:, i] * norms[:, j] + eps)
    return (total / len(pairs)).mean()


def similarity_loss(latents: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Negated signed cosine between latents of the same instrument across
    batch elements, averaged over the C(B, 2) pairs and then instruments.

    Unlike the dissimilarity term this keeps the sign of the latents, so
    the value lies in [-1, 1] with -1 for identical directions. The
    asymmetry with dissimilarity_loss is deliberate.
    """
    flat = latents.flatten(start_dim=2)
    batch = flat.shape[0]
    if batch < 2:
        raise ConfigError("similarity needs at least two batch elements")
    norms = flat.norm(dim=-1)
    pairs = list(combinations(range(batch), 2))
    total = 0.0
    for a, b in pairs:
        dot = (flat[a] * flat[b]).sum(dim=-1)
        total = total + dot / (norms[a] * norms[b] + eps)
    per_instrument = -total / len(pairs)
    return per_instrument.mean()


def reconstruction_loss(decoded: torch.Tensor, mixture: torch.Tensor) -> torch.Tensor:
    """Negative SI-SNR of the autoencoded mixture against the mixture."""
    active = active_source_mask(mixture)
    if not torch.any(active):
        return decoded.sum() * 0.0
    return -si_snr(decoded, mixture)[active].mean()


@dataclass(frozen=True)
class LossWeights:
    """Per-term weights and optional per-stage scales.

    Defaults follow the desk-scale recipe: separation 1.0, dissimilarity
    0.1, similarity 0.1, reconstruction 0.05, stages weighted equally.
    """

    w_sisnr: float = 1.0
    w_diss: float = 0.1
    w_sim: float = 0.1
    w_recon: float = 0.05
    stage_scales: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.w_sisnr <= 0:
            raise ConfigError("w_sisnr must be positive")
        for name in ("w_diss", "w_sim", "w_recon"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.stage_scales is not None and any(s < 0 for s in self.stage_scales):
            raise ConfigError("stage_scales must be nonnegative")

    def scale_for(self, stage: int) -> float:
        if self.stage_scales is None:
            return 1.0
        return self.stage_scales[stage]


@dataclass
class StageLossInputs:
    """Everything total_loss needs for one stage.

    estimates/references: (batch, instruments, T); mixture/decoded_mixture:
    (batch, T); target_latents: (batch, instruments, D, frames), encodings
    of the ground-truth stems (None when the auxiliary terms are off).
    """

    estimates: torch.Tensor
    references: torch.Tensor
    mixture: torch.Tensor
    decoded_mixture: torch.Tensor | None = None
    target_latents: torch.Tensor | None = None


def total_loss(stages: list[StageLossInputs], weights: LossWeights):
    """Weighted sum of the four terms over all stages.

    Returns:
        (total, breakdown) where breakdown maps "stage{i}/<term>" to floats
        for logging; the total is linear in every weight.
    """
    if weights.stage_scales is not None and len(weights.stage_scales) != len(stages):
        raise ConfigError(
            f"{len(weights.stage_scales)} stage_scales for {len(stages)} stages"
        )
    total = None
    breakdown = {}
    for idx, stage in enumerate(stages):
        terms = {"sisnr": mean_si_snr_loss(stage.estimates, stage.references)}
        if weights.w_diss and stage.target_latents is not None:
            terms["diss"] = dissimilarity_loss(stage.target_latents)
        if weights.w_sim and stage.target_latents is not None:
            terms["sim"] = similarity_loss(stage.target_latents)
        if weights.w_recon and stage.decoded_mixture is not None:
            terms["recon"] = reconstruction_loss(stage.decoded_mixture, stage.mixture)
        coeffs = {"sisnr": weights.w_sisnr, "diss": weights.w_diss,
                  "sim": weights.w_sim, "recon": weights.w_recon}
        stage_total = sum(coeffs[k] * v for k, v in terms.items())
        stage_total = weights.scale_for(idx) * stage_total
        total = stage_total if total is None else total + stage_total
        for k, v in terms.items():
            breakdown[f"stage{idx}/{k}"] = float(v.detach())
        breakdown[f"stage{idx}/total"] = float(stage_total.detach())
    return total, breakdown
