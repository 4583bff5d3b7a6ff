"""Command-line surface: data synthesis, training, ablations, separation,
evaluation and parameter reports.

Exit codes are a stable contract: 0 success, 1 runtime failure, 2 for
usage or configuration problems (argparse uses 2 as well). Logs go to
stderr; reports and tables go to stdout or the requested output file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .config import ModelConfig, config_from_dict, dataclass_from_dict, load_run_config
from .data import ToySpec, ingest_folder, write_toy_dataset
from .errors import (
    AudioIOError,
    CheckpointError,
    ConfigError,
    DataError,
    MetasepError,
)
from .evaluation import evaluate, separate_file
from .generator import param_count_report
from .multistage import build_model
from .training import (
    format_ablation_table,
    load_checkpoint,
    model_from_checkpoint,
    run_ablation_suite,
    save_checkpoint,
    train,
)

log = logging.getLogger(__name__)

DEFAULT_SPEC = ToySpec()


def load_toy_spec(path) -> ToySpec:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"spec file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return dataclass_from_dict(ToySpec, raw or {}, path=str(path))


def _resolve(flag_value, config_value, what: str):
    if flag_value is not None:
        return flag_value
    if config_value is not None:
        return config_value
    raise ConfigError(f"no {what} given on the command line or in the config")


def _apply_overrides(cfg: ModelConfig, args) -> ModelConfig:
    """Command-line flags win over config file fields, with a log line."""
    data = cfg.to_dict()
    changed = False
    if getattr(args, "mode", None) and args.mode != cfg.sharing:
        log.info("flag --mode %s overrides config sharing %r", args.mode, cfg.sharing)
        data["sharing"] = args.mode
        changed = True
    if getattr(args, "steps", None) is not None and args.steps != cfg.train.steps:
        log.info("flag --steps %d overrides config steps %d", args.steps, cfg.train.steps)
        data["train"]["steps"] = args.steps
        changed = True
    return config_from_dict(data) if changed else cfg


def _load_tracks(data_dir, cfg: ModelConfig):
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"data directory not found: {data_dir}")
    return ingest_folder(data_dir, cfg.instruments)


def cmd_synth_data(args) -> int:
    if args.tracks < 1:
        raise ConfigError("need at least 1 track")
    spec = load_toy_spec(args.spec) if args.spec else DEFAULT_SPEC
    written = write_toy_dataset(args.out, args.tracks, spec, seed=args.seed)
    print(f"wrote {len(written)} tracks to {args.out}")
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    cfg = _apply_overrides(run.model, args)
    tracks = _load_tracks(_resolve(args.data, run.data_dir, "data directory"), cfg)
    out = Path(_resolve(args.out, run.out, "checkpoint path"))
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics_path = out.with_suffix(".metrics.jsonl")
    result = train(cfg, tracks, metrics_path=metrics_path)
    save_checkpoint(result.checkpoint, out)
    log.info("metrics written to %s", metrics_path)
    print(f"checkpoint written to {out} after {result.checkpoint.step} steps")
    return 0


def cmd_ablate(args) -> int:
    run = load_run_config(args.config)
    tracks = _load_tracks(_resolve(args.data, run.data_dir, "data directory"), run.model)
    rows = run_ablation_suite(run.model, tracks, steps=args.steps,
                              out_dir=args.workdir)
    table = format_ablation_table(rows)
    if args.out:
        Path(args.out).write_text(table + "\n")
        log.info("ablation table written to %s", args.out)
    print(table)
    return 0


def cmd_separate(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    paths = separate_file(model, args.input, args.out,
                          keep_input_rate=args.rate == "input",
                          segment_seconds=args.segment_seconds)
    for path in paths:
        print(path)
    return 0


def cmd_evaluate(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    data_dir = Path(args.data)
    tracks = _load_tracks(data_dir, model.cfg)
    report = evaluate(model, tracks, dataset_name=data_dir.name,
                      segment_seconds=args.segment_seconds)
    if args.records:
        Path(args.records).write_text("\n".join(report.records()) + "\n")
        log.info("per-track records written to %s", args.records)
    print(report.table())
    return 0


def cmd_report_params(args) -> int:
    run = load_run_config(args.config)
    cfg = run.model
    model = build_model(cfg)
    encoder = sum(p.numel() for n, p in model.named_parameters() if ".encoder." in n)
    decoder = sum(p.numel() for n, p in model.named_parameters() if ".decoder." in n)
    report = param_count_report(
        [cfg.tcn_config(stage) for stage in range(cfg.num_stages)],
        num_instruments=len(cfg.instruments),
        embed_dim=cfg.embed_dim,
        bottleneck_dim=cfg.embed_bottleneck,
    )
    rows = [
        ("encoder parameters", f"{encoder}"),
        ("decoder parameters", f"{decoder}"),
        ("masking per instrument", f"{report['per_instrument_masking']}"),
        ("baseline masking total", f"{report['baseline_masking_total']}"),
        ("generator storage", f"{report['generator_storage']}"),
        ("baseline/meta ratio", f"{report['ratio']:.1f}"),
    ]
    width = max(len(label) for label, _ in rows)
    for label, value in rows:
        print(f"{label:<{width}}  {value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metasep",
        description="train and run instrument separation models on toy data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic toy dataset")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--tracks", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", help="toy spec file (strict parse)")
    p.set_defaults(handler=cmd_synth_data)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", required=True, help="run config file")
    p.add_argument("--data", help="dataset directory (beats the config)")
    p.add_argument("--out", help="checkpoint path (beats the config)")
    p.add_argument("--mode", choices=("baseline", "shared_tcn", "meta"),
                   help="sharing regime override")
    p.add_argument("--steps", type=int, help="step-count override")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("ablate", help="run the full ablation suite")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--out", help="write the table here as well as stdout")
    p.add_argument("--steps", type=int, help="per-config step budget override")
    p.add_argument("--workdir", help="checkpoint directory for resumable runs")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("separate", help="split a WAV into stem files")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True, metavar="WAV")
    p.add_argument("--out", required=True, help="stem output directory")
    p.add_argument("--rate", choices=("native", "input"), default="native",
                   help="native keeps the model's output rate")
    p.add_argument("--segment-seconds", type=float, default=8.0)
    p.set_defaults(handler=cmd_separate)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--records", help="write per-track JSON records here")
    p.add_argument("--segment-seconds", type=float, default=8.0)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("report-params", help="parameter counts for a config")
    p.add_argument("--config", required=True)
    p.set_defaults(handler=cmd_report_params)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except (ConfigError, DataError, CheckpointError, AudioIOError, OSError) as exc:
        log.error("%s", exc)
        return 2
    except MetasepError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
