import pytest
import torch

from metasep.config import ModelConfig, TcnSettings
from metasep.errors import ConfigError, ShapeError
from metasep.masking import apply_mask_net
from metasep.multistage import MultiStageModel, build_model

TINY_TCN = TcnSettings(num_blocks=1, layers_per_block=2, hidden_channels=8,
                       bottleneck_channels=8, kernel_size=3)


def small_config(**overrides) -> ModelConfig:
    base = dict(
        instruments=("tone", "noise"),
        stage_rates=(8000, 16000),
        base_stride=16,
        base_latent_dim=16,
        base_kernel=16,
        base_stft_window=64,
        encoder_heads=2,
        tcn=TINY_TCN,
        embed_dim=8,
        embed_bottleneck=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


def make_mixtures(cfg, batch=2, seconds=0.1, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return [torch.randn(batch, int(rate * seconds), generator=gen)
            for rate in cfg.stage_rates]


@pytest.fixture
def meta_model():
    torch.manual_seed(0)
    return build_model(small_config(sharing="meta"))


class TestStateDictLayout:
    def test_baseline_owns_per_instrument_banks(self):
        torch.manual_seed(0)
        model = build_model(small_config(sharing="baseline"))
        keys = list(model.state_dict())
        assert any("owned_banks.tone.input_conv__w" in k for k in keys)
        assert any("owned_banks.noise.output_conv__b" in k for k in keys)
        assert not any("generator" in k for k in keys)
        assert not any("embeddings" in k for k in keys)

    def test_shared_tcn_splits_trunk_from_io(self):
        torch.manual_seed(0)
        model = build_model(small_config(sharing="shared_tcn"))
        keys = list(model.state_dict())
        trunk = [k for k in keys if "trunk_bank" in k]
        assert any("block0.layer0.dconv" in k.replace("_", ".") for k in trunk)
        assert not any("input_conv" in k for k in trunk)
        assert any("io_banks.tone.input_conv__w" in k for k in keys)
        assert any("io_banks.noise.output_conv__w" in k for k in keys)
        # exactly one trunk copy per stage, not one per instrument
        stage0_trunk = [k for k in trunk if k.startswith("stages.0.")]
        assert len(stage0_trunk) == len(set(stage0_trunk))
        assert not any(".tone." in k or ".noise." in k for k in trunk)

    def test_meta_owns_no_masking_tensors(self, meta_model):
        keys = list(meta_model.state_dict())
        assert not any("owned_banks" in k for k in keys)
        assert not any("trunk_bank" in k or "io_banks" in k for k in keys)
        assert not any(k.endswith("__w") or k.endswith("__b") for k in keys)
        assert "embeddings.vectors" in keys
        assert any(k.startswith("stages.0.generator.proj_") for k in keys)
        assert any(k.startswith("stages.1.generator.expand_") for k in keys)

    def test_meta_masking_storage_independent_of_instrument_count(self):
        def masking_numel(model):
            return sum(v.numel() for k, v in model.state_dict().items()
                       if "generator" in k)

        torch.manual_seed(0)
        two = build_model(small_config(sharing="meta"))
        torch.manual_seed(0)
        four = build_model(small_config(
            sharing="meta", instruments=("a", "b", "c", "d")))
        assert masking_numel(two) == masking_numel(four)
        assert four.embeddings.vectors.shape == (4, 8)

    def test_baseline_masking_storage_scales_with_instruments(self):
        def masking_numel(model):
            return sum(v.numel() for k, v in model.state_dict().items()
                       if "owned_banks" in k)

        torch.manual_seed(0)
        two = build_model(small_config(sharing="baseline"))
        torch.manual_seed(0)
        four = build_model(small_config(
            sharing="baseline", instruments=("a", "b", "c", "d")))
        assert masking_numel(four) == 2 * masking_numel(two)


class TestSeparate:
    def test_output_shapes(self, meta_model):
        cfg = meta_model.cfg
        mixtures = make_mixtures(cfg)
        result = meta_model.separate(mixtures)
        assert len(result.stages) == 2
        for j, out in enumerate(result.stages):
            assert out.rate == cfg.stage_rates[j]
            d = cfg.stage_latent_dim(j)
            frames = cfg.encoder_config(j).num_frames(mixtures[j].shape[1])
            assert out.mixture_latent.shape == (2, d, frames)
            for name in cfg.instruments:
                assert out.masked_latents[name].shape == (2, d, frames)
                assert out.waveforms[name].shape == mixtures[j].shape
        assert result.final is result.stages[-1]

    def test_all_sharing_modes_run(self):
        for sharing in ("baseline", "shared_tcn", "meta"):
            torch.manual_seed(0)
            model = build_model(small_config(sharing=sharing))
            result = model.separate(make_mixtures(model.cfg))
            wav = result.final.waveforms["tone"]
            assert torch.isfinite(wav).all()

    def test_wrong_mixture_count(self, meta_model):
        mixtures = make_mixtures(meta_model.cfg)
        with pytest.raises(ShapeError, match="expected 2"):
            meta_model.separate(mixtures[:1])

    def test_inconsistent_durations(self, meta_model):
        mixtures = make_mixtures(meta_model.cfg)
        mixtures[1] = mixtures[1][:, :-3]
        with pytest.raises(ShapeError, match="inconsistent"):
            meta_model.separate(mixtures)

    def test_rejects_unbatched_input(self, meta_model):
        mixtures = [m[0] for m in make_mixtures(meta_model.cfg)]
        with pytest.raises(ShapeError, match="batch, samples"):
            meta_model.separate(mixtures)

    def test_batch_mismatch(self, meta_model):
        mixtures = make_mixtures(meta_model.cfg)
        mixtures[1] = mixtures[1][:1]
        with pytest.raises(ShapeError, match="batch"):
            meta_model.separate(mixtures)


class TestMaskingBehaviour:
    def test_zeroed_mask_params_give_half_mask(self):
        """With all mask-net tensors zero, every mask is sigmoid(0) = 0.5, so
        the masked latent is exactly half the mixture latent."""
        torch.manual_seed(0)
        model = build_model(small_config(sharing="baseline"))
        with torch.no_grad():
            for stage in model.stages:
                for bank in stage.owned_banks.values():
                    for p in bank.parameters():
                        p.zero_()
        mixtures = make_mixtures(model.cfg)
        result = model.separate(mixtures)
        for j, out in enumerate(result.stages):
            stage = model.stages[j]
            for name in model.instruments:
                expected_latent = 0.5 * out.mixture_latent
                assert torch.equal(out.masked_latents[name], expected_latent)
                expected_wav = stage.decoder(expected_latent, mixtures[j].shape[1])
                assert torch.equal(out.waveforms[name], expected_wav)

    def test_instruments_get_different_masks(self, meta_model):
        result = meta_model.separate(make_mixtures(meta_model.cfg))
        out = result.stages[0]
        assert not torch.allclose(out.masked_latents["tone"],
                                  out.masked_latents["noise"])

    def test_swapping_embeddings_swaps_outputs(self, meta_model):
        mixtures = make_mixtures(meta_model.cfg)
        before = meta_model.separate(mixtures)
        with torch.no_grad():
            flipped = meta_model.embeddings.vectors[[1, 0]].clone()
            meta_model.embeddings.vectors.copy_(flipped)
        after = meta_model.separate(mixtures)
        for j in range(len(before.stages)):
            assert torch.equal(after.stages[j].waveforms["tone"],
                               before.stages[j].waveforms["noise"])
            assert torch.equal(after.stages[j].waveforms["noise"],
                               before.stages[j].waveforms["tone"])

    def test_mask_params_rejects_unknown_instrument(self, meta_model):
        with pytest.raises(ConfigError, match="kazoo"):
            meta_model.stages[0].mask_params("kazoo", meta_model.embeddings)

    def test_meta_mask_params_match_direct_generation(self, meta_model):
        from metasep.generator import generate_params

        stage = meta_model.stages[1]
        params = stage.mask_params("tone", meta_model.embeddings)
        direct = generate_params(meta_model.embeddings.lookup("tone"),
                                 stage.generator, stage.tcn_cfg)
        for (na, wa, ba), (nb, wb, bb) in zip(params.entries, direct.entries):
            assert na == nb
            assert torch.equal(wa, wb)
            assert torch.equal(ba, bb)

    def test_shared_trunk_is_actually_shared(self):
        """Perturbing one trunk tensor must change both instruments' masks."""
        torch.manual_seed(0)
        model = build_model(small_config(sharing="shared_tcn"))
        stage = model.stages[0]
        latent = torch.randn(1, 16, 50)
        def masks():
            return {
                name: apply_mask_net(latent, stage.tcn_cfg,
                                     stage.mask_params(name, None))
                for name in model.instruments
            }
        before = masks()
        with torch.no_grad():
            stage.trunk_bank.block0_layer0_dconv__w.add_(0.5)
        after = masks()
        for name in model.instruments:
            assert not torch.allclose(before[name], after[name])

    def test_io_banks_stay_per_instrument(self):
        torch.manual_seed(0)
        model = build_model(small_config(sharing="shared_tcn"))
        stage = model.stages[0]
        latent = torch.randn(1, 16, 50)
        noise_before = apply_mask_net(latent, stage.tcn_cfg,
                                      stage.mask_params("noise", None))
        with torch.no_grad():
            stage.io_banks["tone"].input_conv__w.add_(0.5)
        noise_after = apply_mask_net(latent, stage.tcn_cfg,
                                     stage.mask_params("noise", None))
        assert torch.equal(noise_before, noise_after)


class TestStageChaining:
    def test_second_stage_requires_prev_latent(self, meta_model):
        stage = meta_model.stages[1]
        latent = torch.randn(1, 32, 50)
        with pytest.raises(ShapeError, match="previous"):
            stage.mask_input(latent, None)

    def test_first_stage_refuses_prev_latent(self, meta_model):
        stage = meta_model.stages[0]
        latent = torch.randn(1, 16, 50)
        with pytest.raises(ShapeError, match="first stage"):
            stage.mask_input(latent, torch.randn(1, 16, 50))

    def test_frame_mismatch_between_stages(self, meta_model):
        stage = meta_model.stages[1]
        latent = torch.randn(1, 32, 50)
        with pytest.raises(ShapeError, match="frame mismatch"):
            stage.mask_input(latent, torch.randn(1, 16, 49))

    def test_mask_input_concatenates_projection(self, meta_model):
        stage = meta_model.stages[1]
        latent = torch.randn(1, 32, 50)
        prev = torch.randn(1, 16, 50)
        merged = stage.mask_input(latent, prev)
        assert merged.shape == (1, 64, 50)
        assert torch.equal(merged[:, 32:], latent)
        assert torch.equal(merged[:, :32], stage.prev_proj(prev))


class TestPersistence:
    def test_state_dict_round_trip_is_bitwise(self, meta_model):
        mixtures = make_mixtures(meta_model.cfg)
        want = meta_model.separate(mixtures)
        torch.manual_seed(123)
        clone = build_model(small_config(sharing="meta"))
        clone.load_state_dict(meta_model.state_dict())
        got = clone.separate(mixtures)
        for j in range(len(want.stages)):
            for name in meta_model.instruments:
                assert torch.equal(got.stages[j].waveforms[name],
                                   want.stages[j].waveforms[name])

    def test_gradients_reach_embeddings(self, meta_model):
        result = meta_model.separate(make_mixtures(meta_model.cfg))
        loss = sum(w.square().sum() for s in result.stages
                   for w in s.waveforms.values())
        loss.backward()
        grad = meta_model.embeddings.vectors.grad
        assert grad is not None
        assert grad.abs().sum() > 0

    def test_gradients_reach_owned_banks(self):
        torch.manual_seed(0)
        model = build_model(small_config(sharing="baseline"))
        result = model.separate(make_mixtures(model.cfg))
        result.final.waveforms["tone"].square().sum().backward()
        bank = model.stages[1].owned_banks["tone"]
        assert bank.input_conv__w.grad is not None
        assert bank.input_conv__w.grad.abs().sum() > 0
