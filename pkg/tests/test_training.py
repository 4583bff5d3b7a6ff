import json

import numpy as np
import pytest
import torch

from metasep.config import ModelConfig, TcnSettings, TrainSettings
from metasep.data import ToySpec, make_training_batch, synth_toy_track
from metasep.errors import CheckpointError, TrainingError
from metasep.multistage import build_model, masking_param_count
from metasep.optim import build_optimizer
from metasep.training import (
    ABLATION_SEQUENCE,
    ablation_variant,
    format_ablation_table,
    load_checkpoint,
    model_from_checkpoint,
    run_ablation_suite,
    save_checkpoint,
    snapshot,
    train,
    training_step,
    validate,
)

TINY_TCN = TcnSettings(num_blocks=1, layers_per_block=2, hidden_channels=8,
                       bottleneck_channels=8, kernel_size=3)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        instruments=("tone", "noise"),
        sharing="meta",
        stage_rates=(8000, 16000),
        base_rate=8000,
        base_stride=16,
        base_latent_dim=16,
        base_kernel=16,
        base_stft_window=64,
        encoder_heads=2,
        tcn=TINY_TCN,
        embed_dim=8,
        embed_bottleneck=2,
        train=TrainSettings(steps=4, batch_size=2, crop_seconds=0.25,
                            eval_interval=2, val_fraction=0.25),
        seed=0,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def pool():
    spec = ToySpec(instruments=("tone", "noise"), duration_seconds=0.5,
                   sample_rate=16000)
    return [synth_toy_track([1, i], spec, f"t{i}") for i in range(4)]


def final_params(result):
    return {k: v.clone() for k, v in result.model.state_dict().items()}


class TestTrainLoop:
    def test_zero_steps_returns_initial_checkpoint(self, pool):
        result = train(tiny_config(), pool, max_steps=0)
        assert result.checkpoint.step == 0
        assert result.metrics == []
        assert result.best_checkpoint is None

    def test_restarting_is_deterministic(self, pool):
        a = train(tiny_config(), pool, max_steps=4)
        b = train(tiny_config(), pool, max_steps=4)
        assert a.metrics[-1].total == b.metrics[-1].total
        pa, pb = final_params(a), final_params(b)
        assert all(torch.equal(pa[k], pb[k]) for k in pa)

    def test_metrics_carry_loss_terms_and_validation(self, pool, tmp_path):
        path = tmp_path / "metrics.jsonl"
        result = train(tiny_config(aux_losses=True), pool, max_steps=4,
                       metrics_path=path)
        assert [m.step for m in result.metrics] == [1, 2, 3, 4]
        assert all("stage0/sisnr" in m.terms for m in result.metrics)
        assert all("stage1/diss" in m.terms for m in result.metrics)
        # eval_interval = 2
        assert result.metrics[0].val_sisnr is None
        assert result.metrics[1].val_sisnr is not None
        assert result.best_checkpoint is not None
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(lines) == 4
        assert lines[1]["step"] == 2 and "val_sisnr" in lines[1]
        assert "val/tone" in lines[3]

    def test_nan_parameter_aborts_with_name(self, pool):
        cfg = tiny_config()
        torch.manual_seed(cfg.seed)
        model = build_model(cfg)
        with torch.no_grad():
            model.embeddings.vectors[0, 0] = float("nan")
        rng = np.random.default_rng(0)
        batch = make_training_batch(pool, rng, 2, 0.25, cfg.stage_rates)
        loss, breakdown = training_step(model, batch, cfg.effective_loss_weights())
        assert not torch.isfinite(loss)
        from metasep.training import _first_nonfinite
        assert "embeddings.vectors" in _first_nonfinite(model, breakdown) or \
            "loss term" in _first_nonfinite(model, breakdown)

    def test_empty_pool_rejected(self):
        with pytest.raises(TrainingError, match="empty"):
            train(tiny_config(), [], max_steps=1)


class TestCheckpointing:
    def test_round_trip_forward_is_bitwise(self, pool, tmp_path):
        result = train(tiny_config(), pool, max_steps=2)
        path = tmp_path / "ck.pt"
        save_checkpoint(result.checkpoint, path)
        loaded = load_checkpoint(path)
        assert loaded.step == 2
        assert loaded.config == result.checkpoint.config
        clone = model_from_checkpoint(loaded)
        rng = np.random.default_rng(99)
        batch = make_training_batch(pool, rng, 2, 0.25, result.model.cfg.stage_rates)
        with torch.no_grad():
            want = result.model.separate(batch.mixtures)
            got = clone.separate(batch.mixtures)
        for j in range(len(want.stages)):
            for name in result.model.instruments:
                assert torch.equal(got.stages[j].waveforms[name],
                                   want.stages[j].waveforms[name])

    def test_wrong_version_rejected(self, pool, tmp_path):
        result = train(tiny_config(), pool, max_steps=0)
        path = tmp_path / "ck.pt"
        save_checkpoint(result.checkpoint, path)
        payload = torch.load(path, weights_only=False)
        payload["format_version"] = 99
        torch.save(payload, path)
        with pytest.raises(CheckpointError, match="version 99"):
            load_checkpoint(path)

    def test_corrupt_and_missing_files_rejected(self, tmp_path):
        path = tmp_path / "junk.pt"
        path.write_text("not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "absent.pt")

    def test_resume_matches_uninterrupted_run(self, pool, tmp_path):
        cfg = tiny_config()
        straight = train(cfg, pool, max_steps=6)

        first = train(cfg, pool, max_steps=3)
        path = tmp_path / "mid.pt"
        save_checkpoint(first.checkpoint, path)
        resumed = train(cfg, pool, max_steps=6, resume_from=path)

        assert resumed.metrics[0].step == 4
        assert resumed.metrics[-1].total == straight.metrics[-1].total
        ps, pr = final_params(straight), final_params(resumed)
        assert all(torch.equal(ps[k], pr[k]) for k in ps)

    def test_resume_rejects_config_mismatch(self, pool, tmp_path):
        result = train(tiny_config(), pool, max_steps=1)
        path = tmp_path / "ck.pt"
        save_checkpoint(result.checkpoint, path)
        with pytest.raises(CheckpointError, match="different config"):
            train(tiny_config(seed=7), pool, max_steps=2, resume_from=path)


class TestTrainingInvariants:
    @pytest.mark.parametrize("sharing", ["baseline", "shared_tcn", "meta"])
    def test_every_parameter_gets_a_gradient(self, pool, sharing):
        cfg = tiny_config(sharing=sharing)
        torch.manual_seed(cfg.seed)
        model = build_model(cfg)
        optimizer = build_optimizer(cfg.optimizer, model.parameters())
        weights = cfg.effective_loss_weights()
        seen = {name: False for name, _ in model.named_parameters()}
        for step in range(100):
            rng = np.random.default_rng([cfg.seed, step])
            batch = make_training_batch(pool, rng, 2, 0.25, cfg.stage_rates)
            loss, _ = training_step(model, batch, weights)
            optimizer.zero_grad()
            loss.backward()
            for name, param in model.named_parameters():
                if param.grad is not None and param.grad.abs().sum() > 0:
                    seen[name] = True
            optimizer.step()
            if all(seen.values()):
                break
        dead = [name for name, got in seen.items() if not got]
        assert not dead, f"no gradient ever reached: {dead}"

    def test_meta_checkpoint_has_no_owned_masking_tensors(self, pool):
        result = train(tiny_config(sharing="meta"), pool, max_steps=1)
        keys = list(result.checkpoint.model_state)
        assert not any("owned_banks" in k or "trunk_bank" in k or "io_banks" in k
                       for k in keys)
        assert any("generator" in k for k in keys)

    def test_shared_tcn_checkpoint_has_one_trunk_copy(self, pool):
        two = train(tiny_config(sharing="shared_tcn"), pool, max_steps=0)
        trunk_keys = [k for k in two.checkpoint.model_state if "trunk_bank" in k]
        spec4 = ToySpec(instruments=("tone", "noise", "clicks", "chirp"),
                        duration_seconds=0.5, sample_rate=16000)
        pool4 = [synth_toy_track([1, i], spec4, f"t{i}") for i in range(4)]
        four = train(tiny_config(sharing="shared_tcn",
                                 instruments=("tone", "noise", "clicks", "chirp")),
                     pool4, max_steps=0)
        trunk_keys4 = [k for k in four.checkpoint.model_state if "trunk_bank" in k]
        assert trunk_keys == trunk_keys4

    def test_loss_decreases_on_the_toy_set(self, pool):
        cfg = tiny_config(train=TrainSettings(steps=200, batch_size=2,
                                              crop_seconds=0.25,
                                              eval_interval=100,
                                              val_fraction=0.25))
        result = train(cfg, pool)
        totals = [m.total for m in result.metrics]
        early = float(np.median(totals[:100]))
        late = float(np.median(totals[100:200]))
        assert late < early


class TestValidate:
    def test_scores_have_all_instruments_and_mean(self, pool):
        cfg = tiny_config()
        torch.manual_seed(0)
        model = build_model(cfg)
        scores = validate(model, pool, 0.25)
        assert set(scores) == {"tone", "noise", "mean"}
        assert scores["mean"] == pytest.approx(
            (scores["tone"] + scores["noise"]) / 2)

    def test_needs_tracks(self, pool):
        cfg = tiny_config()
        torch.manual_seed(0)
        model = build_model(cfg)
        with pytest.raises(TrainingError):
            validate(model, [], 0.25)


class TestAblationSuite:
    def test_rows_and_configs(self, pool, tmp_path):
        base = tiny_config()
        rows = run_ablation_suite(base, pool, steps=1, out_dir=tmp_path)
        assert [r.name for r in rows] == [name for name, *_ in ABLATION_SEQUENCE]
        assert len(rows) == 7
        by_name = {r.name: r for r in rows}
        vanilla = by_name["conv_tasnet"].config
        stronger = by_name["stronger_encoder"].config
        assert vanilla.stronger_encoder is False and stronger.stronger_encoder is True
        assert vanilla.to_dict() | {"stronger_encoder": True} == stronger.to_dict()
        assert vanilla.multi_stage is False
        assert vanilla.stage_rates == (16000,)
        assert by_name["meta"].config.multi_stage is True
        for row in rows:
            assert set(row.val_per_instrument) == {"tone", "noise"}

    def test_meta_masking_params_smaller_than_baseline(self, pool, tmp_path):
        rows = run_ablation_suite(tiny_config(), pool, steps=1, out_dir=tmp_path)
        by_name = {r.name: r for r in rows}
        num_instruments = len(by_name["meta"].config.instruments)
        assert by_name["meta"].masking_params < by_name["baseline"].masking_params
        assert (by_name["meta"].masking_params * num_instruments
                == by_name["baseline"].masking_params)

    def test_rerun_reuses_checkpoints(self, pool, tmp_path):
        base = tiny_config()
        first = run_ablation_suite(base, pool, steps=1, out_dir=tmp_path)
        mtimes = {p.name: p.stat().st_mtime_ns for p in tmp_path.glob("*.pt")}
        assert len(mtimes) == 7
        second = run_ablation_suite(base, pool, steps=1, out_dir=tmp_path)
        assert {p.name: p.stat().st_mtime_ns for p in tmp_path.glob('*.pt')} == mtimes
        for a, b in zip(first, second):
            assert a.val_mean == pytest.approx(b.val_mean)

    def test_table_format(self, pool, tmp_path):
        rows = run_ablation_suite(tiny_config(), pool, steps=1, out_dir=tmp_path)
        table = format_ablation_table(rows)
        lines = [line for line in table.splitlines() if line.strip()]
        assert len(lines) == 9  # header + rule + 7 regimes
        assert "tone" in lines[0] and "noise" in lines[0] and "mean" in lines[0]
        assert lines[2].lstrip().startswith("conv_tasnet") or "conv_tasnet" in lines[2]

    def test_variant_keeps_custom_rates(self):
        base = tiny_config()
        single = ablation_variant(base, "baseline", False, False, False)
        assert single.stage_rates == (16000,)
        multi = ablation_variant(base, "meta", True, True, True)
        assert multi.stage_rates == (8000, 16000)


def test_masking_param_count_tracks_sharing():
    torch.manual_seed(0)
    meta = build_model(tiny_config(sharing="meta"))
    baseline = build_model(tiny_config(sharing="baseline"))
    shared = build_model(tiny_config(sharing="shared_tcn"))
    assert masking_param_count(baseline) > masking_param_count(shared)
    counts = {name: masking_param_count(m)
              for name, m in [("meta", meta), ("baseline", baseline)]}
    assert counts["meta"] != counts["baseline"]
