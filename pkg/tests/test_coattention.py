import pytest
import torch

from tsasr.coattention import CoAttention, co_attention_forward
from tsasr.exceptions import DimensionError, EmptyInputError
from tsasr.numerics import finite_difference_gradcheck


def make_module(d_model=8, speaker_dim=4, summary_dim=2, heads=2, seed=0):
    torch.manual_seed(seed)
    module = CoAttention(d_model, speaker_dim, summary_dim, heads)
    # fusion starts at zero; randomize it so the refinement is visible
    torch.nn.init.normal_(module.fusion.weight, std=0.5)
    return module


@pytest.fixture
def generator():
    g = torch.Generator()
    g.manual_seed(11)
    return g


class TestCoAttention:
    def test_zero_fusion_is_identity(self, generator):
        """Test a freshly built module returns its input unchanged"""
        torch.manual_seed(0)
        module = CoAttention(8, 4, 2, 2)
        hidden = torch.randn(3, 5, 8, dtype=torch.float64, generator=generator)
        assert torch.equal(module(hidden), hidden)

    @pytest.mark.parametrize("speakers", [2, 3, 4])
    def test_permutation_equivariant(self, speakers, generator):
        """Test permuting the speaker streams permutes the outputs"""
        module = make_module()
        hidden = torch.randn(speakers, 6, 8, dtype=torch.float64, generator=generator)
        perm = torch.randperm(speakers, generator=generator)
        while speakers > 1 and torch.equal(perm, torch.arange(speakers)):
            perm = torch.randperm(speakers, generator=generator)
        out = module(hidden)
        assert torch.allclose(module(hidden[perm]), out[perm], atol=1e-9, rtol=0)

    @pytest.mark.parametrize("speakers", [2, 3, 4])
    def test_same_weights_for_any_speaker_count(self, speakers, generator):
        """Test one module handles recordings with different speaker counts"""
        module = make_module()
        hidden = torch.randn(speakers, 6, 8, dtype=torch.float64, generator=generator)
        out = module(hidden)
        assert out.shape == hidden.shape
        assert module.last_trace.speaker_weights.shape == (2, 6, 6)

    def test_identical_streams_stay_identical(self, generator):
        """Test identical speaker inputs give identical outputs"""
        module = make_module()
        stream = torch.randn(6, 8, dtype=torch.float64, generator=generator)
        out = module(stream.expand(3, 6, 8))
        assert torch.allclose(out[0], out[1], atol=1e-12)
        assert torch.allclose(out[0], out[2], atol=1e-12)

    def test_streams_interact(self, generator):
        """Test changing one speaker changes the others' outputs"""
        module = make_module()
        hidden = torch.randn(2, 6, 8, dtype=torch.float64, generator=generator)
        changed = hidden.clone()
        changed[1] += 1.0
        assert not torch.allclose(module(hidden)[0], module(changed)[0])

    def test_batched_matches_unbatched(self, generator):
        """Test a leading batch axis is handled row by row"""
        module = make_module()
        hidden = torch.randn(2, 3, 5, 8, dtype=torch.float64, generator=generator)
        batched = module(hidden)
        for b in range(2):
            assert torch.allclose(batched[b], module(hidden[b]), atol=1e-12)

    def test_speaker_context_is_normalized(self, generator):
        """Test the co-attended speaker rows pass through residual and layer norm"""
        module = CoAttention(8, 4, 4, 2)
        with torch.no_grad():
            module.fusion.weight.copy_(torch.eye(8, dtype=torch.float64))
        hidden = torch.randn(3, 5, 8, dtype=torch.float64, generator=generator)
        speaker_ctx = (module(hidden) - hidden)[..., :4]
        assert torch.allclose(speaker_ctx.mean(dim=-1), torch.zeros(3, 5, dtype=torch.float64), atol=1e-9)
        assert torch.allclose(
            speaker_ctx.var(dim=-1, unbiased=False), torch.ones(3, 5, dtype=torch.float64), atol=1e-2
        )

    def test_output_projections_are_used(self, generator):
        """Test both co-attended paths go through their own output projection"""
        module = make_module()
        hidden = torch.randn(2, 5, 8, dtype=torch.float64, generator=generator)
        before = module(hidden)
        for proj in (module.speaker_out, module.summary_out):
            with torch.no_grad():
                proj.weight.mul_(2.0)
            after = module(hidden)
            assert not torch.allclose(before, after)
            before = after

    def test_paths_share_attention_weights(self, generator):
        """Test speaker and summary paths use the same weights for every head"""
        module = make_module()
        hidden = torch.randn(3, 6, 8, dtype=torch.float64, generator=generator)
        module(hidden)
        trace = module.last_trace
        assert torch.equal(trace.speaker_weights, trace.summary_weights)
        assert trace.speaker_weights.shape == (2, 6, 6)
        assert torch.allclose(trace.speaker_weights.sum(dim=-1), torch.ones(2, 6, dtype=torch.float64))

    def test_weights_come_from_all_speakers(self, generator):
        """Test the shared weights follow the stacked speaker queries and keys"""
        module = make_module()
        hidden = torch.randn(2, 6, 8, dtype=torch.float64, generator=generator)
        module(hidden)
        speakers = module.speaker_ln(module.speaker_proj(hidden))
        q = module.query_blocks(speakers).unflatten(-1, (2, 2)).permute(2, 1, 0, 3).flatten(-2)
        k = module.key_blocks(speakers).unflatten(-1, (2, 2)).permute(2, 1, 0, 3).flatten(-2)
        expected = torch.softmax(q @ k.transpose(-1, -2) / 2.0, dim=-1)
        assert torch.allclose(module.last_trace.summary_weights, expected, atol=1e-12)

    def test_heads_must_divide(self):
        """Test widths not divisible by the head count are rejected"""
        with pytest.raises(ValueError):
            CoAttention(8, 6, 2, 4)

    def test_wrong_width(self):
        """Test input width mismatch raises DimensionError"""
        with pytest.raises(DimensionError):
            make_module()(torch.ones(2, 3, 7, dtype=torch.float64))

    def test_gradcheck(self, generator):
        """Test co-attention parameters and inputs pass finite differences"""
        module = make_module(seed=3)
        hidden = torch.randn(3, 4, 8, dtype=torch.float64, generator=generator, requires_grad=True)
        weights = torch.randn(3, 4, 8, dtype=torch.float64, generator=generator)
        params = {
            "query_blocks": module.query_blocks.weight,
            "key_blocks": module.key_blocks.weight,
            "speaker_value": module.speaker_value.weight,
            "speaker_out": module.speaker_out.weight,
            "summary_out": module.summary_out.weight,
            "summary_proj": module.summary_proj.weight,
            "fusion": module.fusion.weight,
            "hidden": hidden,
        }
        report = finite_difference_gradcheck(lambda: (module(hidden) * weights).sum(), params)
        assert report.passed(), report.max_relative_error


class TestCoAttentionForward:
    def test_list_interface(self, generator):
        """Test the list form matches the stacked form"""
        module = make_module()
        streams = [torch.randn(5, 8, dtype=torch.float64, generator=generator) for _ in range(3)]
        refined = co_attention_forward(streams, module)
        stacked = module(torch.stack(streams))
        assert len(refined) == 3
        for s in range(3):
            assert torch.allclose(refined[s], stacked[s], atol=1e-12)

    def test_empty(self):
        """Test no speakers raises EmptyInputError"""
        with pytest.raises(EmptyInputError):
            co_attention_forward([], make_module())

    def test_shape_mismatch(self):
        """Test streams of different lengths are rejected"""
        streams = [torch.ones(5, 8, dtype=torch.float64), torch.ones(4, 8, dtype=torch.float64)]
        with pytest.raises(DimensionError):
            co_attention_forward(streams, make_module())
