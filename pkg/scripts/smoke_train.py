"""Desk-scale overfit run on the synthetic four-archetype dataset.

Trains one sharing regime on ten toy tracks and prints per-instrument
SI-SNR on the training split (full tracks, final stage) plus the
validation mean, the same measurement the release gate uses. Expect
roughly half an hour on a laptop CPU at the default settings.
"""

import argparse
import json
import time
from pathlib import Path

from metasep.config import ModelConfig, OptimizerSettings, TrainSettings
from metasep.data import ToySpec, split_tracks, synth_toy_track
from metasep.training import save_checkpoint, train, validate


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sharing", default="meta",
                        choices=("baseline", "shared_tcn", "meta"))
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--lr", type=float, default=1e-2)
    parser.add_argument("--latent", type=int, default=64)
    parser.add_argument("--tracks", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=None,
                        help="optional checkpoint path")
    args = parser.parse_args()

    # pinned spans give every archetype its own spectral niche; see the
    # matching settings in tests/test_acceptance.py
    spec = ToySpec(("tone", "noise", "clicks", "chirp"), 2.0, 32000,
                   tone_f0=220.0, noise_band=(4500.0, 5000.0),
                   chirp_span=(1500.0, 3500.0))
    tracks = [synth_toy_track([100, i], spec, track_id=f"toy{i}")
              for i in range(args.tracks)]
    cfg = ModelConfig(
        sharing=args.sharing,
        base_latent_dim=args.latent,
        optimizer=OptimizerSettings(learning_rate=args.lr),
        train=TrainSettings(steps=args.steps, batch_size=6, crop_seconds=1.0,
                            eval_interval=200, val_fraction=0.2),
        seed=args.seed,
    )

    started = time.time()
    result = train(cfg, tracks)
    elapsed = time.time() - started

    train_tracks, val_tracks = split_tracks(tracks, cfg.train.val_fraction,
                                            cfg.seed)
    train_scores = validate(result.model, train_tracks, spec.duration_seconds)
    val_scores = validate(result.model, val_tracks, spec.duration_seconds)
    print(json.dumps({
        "sharing": args.sharing,
        "steps": result.checkpoint.step,
        "elapsed_s": round(elapsed, 1),
        "train_si_snr": {k: round(v, 2) for k, v in train_scores.items()},
        "val_si_snr": {k: round(v, 2) for k, v in val_scores.items()},
    }, indent=2))
    if args.out is not None:
        save_checkpoint(result.checkpoint, args.out)
        print(f"checkpoint written to {args.out}")


if __name__ == "__main__":
    main()
