"""Seven-regime ablation on self-synthesized toy data.

Walks the feature ladder (plain single-stage baseline up to the full
meta-learned model) with one shared training budget and prints the
validation table. Finished runs are cached in the workdir, so rerunning
with a larger --steps only trains the delta.
"""

import argparse
from pathlib import Path

from metasep.config import ModelConfig, TrainSettings
from metasep.data import ToySpec, synth_toy_track
from metasep.training import format_ablation_table, run_ablation_suite


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--tracks", type=int, default=10)
    parser.add_argument("--workdir", type=Path, default=Path("ablation_runs"))
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    spec = ToySpec(("tone", "noise", "clicks", "chirp"), 2.0, 32000,
                   tone_f0=220.0, noise_band=(4500.0, 5000.0),
                   chirp_span=(1500.0, 3500.0))
    tracks = [synth_toy_track([100, i], spec, track_id=f"toy{i}")
              for i in range(args.tracks)]
    cfg = ModelConfig(
        train=TrainSettings(steps=args.steps, batch_size=6, crop_seconds=1.0,
                            eval_interval=100, val_fraction=0.2),
        seed=args.seed,
    )
    rows = run_ablation_suite(cfg, tracks, steps=args.steps,
                              out_dir=args.workdir)
    print(format_ablation_table(rows), end="")


if __name__ == "__main__":
    main()
