import math

import numpy as np
import pytest
import torch

from conftest import build_model, random_stno
from tsasr.config import ModelConfig
from tsasr.diarization import all_target_mask
from tsasr.exceptions import CapacityError, DimensionError
from tsasr.network import (
    AudioEncoder,
    CtcHead,
    ctc_greedy_decode,
    ctc_head_forward,
    encoder_forward,
)
from tsasr.numerics import finite_difference_gradcheck


@pytest.fixture
def generator():
    g = torch.Generator()
    g.manual_seed(21)
    return g


def features(config, frames, generator, *lead):
    return torch.randn(*lead, frames, config.feature_dim, dtype=torch.float64, generator=generator)


class TestEncoder:
    def test_output_frames(self, tiny_model_config, generator):
        """Test the encoder halves the feature rate"""
        model = build_model(tiny_model_config)
        out = model.encode(features(tiny_model_config, 15, generator))
        assert out.hidden.shape == (8, tiny_model_config.d_model)
        assert AudioEncoder.output_frames(1500) == 750

    def test_feature_rate_is_halved(self, tiny_model_config, generator):
        """Test the reported frame rate is half the feature rate"""
        model = build_model(tiny_model_config)
        out = model.encoder(features(tiny_model_config, 10, generator), feature_rate=50.0)
        assert out.frame_rate == pytest.approx(25.0)

    def test_capacity(self, tiny_model_config, generator):
        """Test inputs longer than the encoder window raise CapacityError"""
        model = build_model(tiny_model_config)
        with pytest.raises(CapacityError):
            model.encode(features(tiny_model_config, 2 * 64 + 2, generator))

    def test_feature_width(self, tiny_model_config):
        """Test wrong feature width raises DimensionError"""
        model = build_model(tiny_model_config)
        with pytest.raises(DimensionError):
            model.encode(torch.ones(10, 5, dtype=torch.float64))

    def test_mask_frames_must_match(self, tiny_model_config, generator):
        """Test STNO masks must be at the encoder rate"""
        model = build_model(tiny_model_config, "fddt")
        with pytest.raises(DimensionError):
            model.encode(features(tiny_model_config, 10, generator), all_target_mask(10))

    def test_missing_mask_means_all_target(self, tiny_model_config, generator):
        """Test omitting the mask equals passing an all-target mask"""
        model = build_model(tiny_model_config, "fddt")
        x = features(tiny_model_config, 10, generator)
        assert torch.equal(model.encode(x).hidden, model.encode(x, all_target_mask(5)).hidden)

    @pytest.mark.parametrize("mode", ["input_mask", "qkb", "fddt"])
    def test_conditioning_changes_output(self, tiny_model_config, generator, rng, mode):
        """Test a partial-target mask changes the encoding in every mode"""
        model = build_model(tiny_model_config, mode)
        if mode == "fddt":
            model.fddt.weight.data.normal_(generator=generator)
        x = features(tiny_model_config, 12, generator)
        stno = torch.nn.functional.one_hot(torch.tensor([1, 2, 0, 1, 3, 2]), 4).to(torch.float64)
        assert not torch.allclose(model.encode(x).hidden, model.encode(x, stno).hidden)

    @pytest.mark.parametrize("encoder, cross", [(True, True), (True, False), (False, True)])
    def test_qkb_placement(self, tiny_model_config, generator, encoder, cross):
        """Test the QKb flags choose which attention layers take the key extension"""
        model = build_model(
            tiny_model_config, "qkb", qkb_encoder_self_attention=encoder, qkb_decoder_cross_attention=cross
        )
        assert model.encoder.qkb.apply_in_encoder_self_attention == encoder
        assert all(block.attn.extended == encoder for block in model.encoder.blocks)
        assert all(block.cross_attn.extended == cross for block in model.decoder.blocks)
        stno = torch.nn.functional.one_hot(torch.tensor([1, 2, 0, 1, 3, 2]), 4).to(torch.float64)
        out = model.encode(features(tiny_model_config, 12, generator), stno)
        assert (out.key_extension is not None) == cross

    def test_encode_recording_stacks_speakers(self, tiny_model_config, generator, rng):
        """Test recording encoding equals per-speaker encoding without co-attention"""
        model = build_model(tiny_model_config, "fddt")
        x = features(tiny_model_config, 12, generator)
        stnos = torch.stack([random_stno(6, rng) for _ in range(3)])
        stacked = model.encode_recording(x, stnos)
        assert stacked.hidden.shape == (3, 6, tiny_model_config.d_model)
        for s in range(3):
            assert torch.allclose(stacked.select(s).hidden, model.encode(x, stnos[s]).hidden, atol=1e-12)

    def test_encode_recording_requires_speaker_axis(self, tiny_model_config, generator):
        """Test a single mask is rejected by the recording encoder"""
        model = build_model(tiny_model_config)
        with pytest.raises(DimensionError):
            model.encode_recording(features(tiny_model_config, 4, generator), all_target_mask(2).values)

    def test_co_attention_refines_streams(self, tiny_model_config, generator, rng):
        """Test enabled co-attention runs over the stacked streams"""
        config = tiny_model_config.model_copy(update={"co_attention": True})
        model = build_model(config, "fddt")
        torch.nn.init.normal_(model.co_attention.fusion.weight, std=0.5)
        x = features(config, 12, generator)
        stnos = torch.stack([random_stno(6, rng) for _ in range(2)])
        refined = model.encode_recording(x, stnos)
        plain = model.encode(x, stnos[0])
        assert not torch.allclose(refined.select(0).hidden, plain.hidden)

    def test_functional_forms(self, tiny_model_config, generator):
        """Test the module-level forward helpers delegate to the model"""
        model = build_model(tiny_model_config)
        x = features(tiny_model_config, 8, generator)
        hidden = encoder_forward(model, x).hidden
        assert torch.equal(hidden, model.encode(x).hidden)
        assert torch.equal(ctc_head_forward(model, hidden), model.ctc_log_probs(hidden))


class TestDecoder:
    def test_incremental_matches_full(self, tiny_model_config, generator):
        """Test cached step-by-step decoding equals the full forward pass"""
        model = build_model(tiny_model_config)
        memory = model.encode(features(tiny_model_config, 10, generator))
        tokens = torch.tensor([1, 60, 10, 11, 3, 70])
        full = model.decode_logits(tokens, memory)
        cache = model.new_cache()
        steps = [model.decode_logits(tokens[i : i + 1], memory, cache)[0] for i in range(len(tokens))]
        assert torch.allclose(torch.stack(steps), full, atol=1e-9)
        assert cache.length == len(tokens)

    def test_reorder_follows_hypotheses(self, tiny_model_config, generator):
        """Test reordering the cache swaps the hypothesis histories"""
        model = build_model(tiny_model_config)
        memory = model.encode(features(tiny_model_config, 10, generator))
        prefixes = torch.tensor([[1, 60], [1, 61]])
        cache = model.new_cache()
        model.decode_logits(prefixes, memory, cache)
        cache.reorder(torch.tensor([1, 0]))
        step = model.decode_logits(torch.tensor([[12], [12]]), memory, cache)[:, 0]
        swapped = model.decode_logits(torch.tensor([[1, 61, 12], [1, 60, 12]]), memory)[:, -1]
        assert torch.allclose(step, swapped, atol=1e-9)

    def test_decoder_forward(self, tiny_model_config, generator):
        """Test single-prefix scoring returns the last position's logits"""
        model = build_model(tiny_model_config)
        memory = model.encode(features(tiny_model_config, 10, generator))
        logits = model.decoder_forward(memory, [1, 60, 10])
        assert logits.shape == (model.tokenizer.vocab_size,)
        assert torch.allclose(logits, model.decode_logits(torch.tensor([1, 60, 10]), memory)[-1])

    def test_prefix_must_start_with_bos(self, tiny_model_config, generator):
        """Test a prefix without BOS is rejected"""
        model = build_model(tiny_model_config)
        memory = model.encode(features(tiny_model_config, 4, generator))
        with pytest.raises(ValueError):
            model.decoder_forward(memory, [60])

    def test_capacity(self, tiny_model_config, generator):
        """Test prefixes beyond the decoder capacity raise CapacityError"""
        model = build_model(tiny_model_config)
        memory = model.encode(features(tiny_model_config, 4, generator))
        with pytest.raises(CapacityError):
            model.decode_logits(torch.ones(49, dtype=torch.long), memory)


class TestCtcHead:
    @pytest.mark.parametrize("frames,expected", [(1, 1), (4, 1), (5, 2), (16, 4), (1500, 375)])
    def test_output_frames(self, frames, expected):
        """Test the head reduces the frame rate by four"""
        assert CtcHead.output_frames(frames) == expected == math.ceil(frames / 4)

    def test_log_probs_restricted_to_label_set(self, tiny_model_config, generator):
        """Test only blank and characters carry probability mass"""
        model = build_model(tiny_model_config)
        hidden = torch.randn(9, tiny_model_config.d_model, dtype=torch.float64, generator=generator)
        log_probs = model.ctc_log_probs(hidden)
        assert log_probs.shape == (3, model.tokenizer.vocab_size)
        ids = model.tokenizer.ctc_token_ids
        mass = log_probs[:, ids].exp().sum(dim=-1)
        assert torch.allclose(mass, torch.ones(3, dtype=torch.float64), atol=1e-12)
        assert torch.all(log_probs[:, model.tokenizer.eos] < -1e20)

    def test_gradcheck(self, generator):
        """Test the CTC head passes finite differences"""
        config = ModelConfig(
            d_model=4, heads=2, summary_dim=2, feature_dim=4, encoder_layers=1, decoder_layers=1
        )
        model = build_model(config)
        head = model.ctc_head
        hidden = torch.randn(6, 4, dtype=torch.float64, generator=generator, requires_grad=True)
        ids = model.tokenizer.ctc_token_ids
        weights = torch.randn(2, len(ids), dtype=torch.float64, generator=generator)
        report = finite_difference_gradcheck(
            lambda: (head(hidden)[:, ids] * weights).sum(),
            {"conv1": head.conv1.weight, "conv2": head.conv2.weight, "hidden": hidden},
        )
        assert report.passed(), report.max_relative_error


class TestModel:
    def test_parameter_groups_partition(self, tiny_model_config):
        """Test every parameter belongs to exactly one group"""
        model = build_model(tiny_model_config, "fddt")
        groups = model.parameter_groups()
        names = [name for params in groups.values() for name, _ in params]
        assert len(names) == len(set(names)) == len(list(model.parameters()))
        assert {name for name, _ in groups["fddt"]} == {"fddt.weight", "fddt.bias"}
        assert all(name.startswith("ctc_head.") for name, _ in groups["ctc"])

    def test_seeded_models_share_weights(self, tiny_model_config):
        """Test conditioning modes do not disturb the shared initial weights"""
        plain = build_model(tiny_model_config, "none", seed=9).state_dict()
        fddt = build_model(tiny_model_config, "fddt", seed=9).state_dict()
        for name, value in plain.items():
            assert torch.equal(value, fddt[name]), name


def test_ctc_greedy_decode():
    """Test best-path decoding merges repeats and drops blanks"""
    path = [0, 5, 5, 0, 5, 7, 7, 0]
    log_probs = torch.from_numpy(np.log(np.eye(9)[path] * 0.9 + 0.01))
    assert ctc_greedy_decode(log_probs) == [5, 5, 7]
