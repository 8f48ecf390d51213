import math

import pytest
import torch

from tsasr.exceptions import DimensionError, GradientCheckError
from tsasr.numerics import causal_bias, finite_difference_gradcheck, scaled_dot_attention


@pytest.fixture
def generator():
    g = torch.Generator()
    g.manual_seed(7)
    return g


class TestScaledDotAttention:
    def test_uniform_weights_average_values(self):
        """Test identical keys give the mean of the values"""
        q = torch.ones(2, 4, dtype=torch.float64)
        k = torch.ones(3, 4, dtype=torch.float64)
        v = torch.arange(6, dtype=torch.float64).reshape(3, 2)
        out = scaled_dot_attention(q, k, v)
        assert torch.allclose(out, v.mean(dim=0).expand(2, 2), atol=1e-12)

    def test_bias_added_before_scaling(self, generator):
        """Test the bias is added to raw scores before the 1/sqrt(d) scaling"""
        q = torch.randn(3, 4, dtype=torch.float64, generator=generator)
        k = torch.randn(5, 4, dtype=torch.float64, generator=generator)
        v = torch.randn(5, 2, dtype=torch.float64, generator=generator)
        e = torch.tensor([0.0, -2.0, 0.0, -2.0, 0.0], dtype=torch.float64)
        biased = scaled_dot_attention(q, k, v, e.expand(3, 5))
        scores = (q @ k.T + e) / math.sqrt(4)
        expected = torch.softmax(scores, dim=-1) @ v
        assert torch.allclose(biased, expected, atol=1e-12)

    def test_blocked_keys_get_zero_weight(self, generator):
        """Test -inf bias removes a key from the softmax"""
        q = torch.randn(2, 4, dtype=torch.float64, generator=generator)
        k = torch.randn(3, 4, dtype=torch.float64, generator=generator)
        v = torch.randn(3, 2, dtype=torch.float64, generator=generator)
        bias = torch.zeros(2, 3, dtype=torch.float64)
        bias[:, 2] = float("-inf")
        _, weights = scaled_dot_attention(q, k, v, bias, return_weights=True)
        assert torch.all(weights[:, 2] == 0)
        assert torch.allclose(weights.sum(dim=-1), torch.ones(2, dtype=torch.float64))

    def test_width_mismatch_raises(self):
        """Test query/key width mismatch raises DimensionError"""
        with pytest.raises(DimensionError):
            scaled_dot_attention(torch.ones(2, 3), torch.ones(2, 4), torch.ones(2, 1))

    def test_bias_shape_mismatch_raises(self):
        """Test wrong bias shape raises DimensionError"""
        with pytest.raises(DimensionError):
            scaled_dot_attention(
                torch.ones(2, 3), torch.ones(4, 3), torch.ones(4, 1), torch.zeros(2, 3)
            )


class TestCausalBias:
    def test_lower_triangular(self):
        """Test future positions are blocked"""
        bias = causal_bias(3)
        assert torch.isinf(bias[0, 1]) and torch.isinf(bias[1, 2])
        assert bias[2, 0] == 0 and bias[1, 1] == 0

    def test_offset_rows_see_cached_prefix(self):
        """Test incremental rows attend to every cached position"""
        bias = causal_bias(1, offset=4)
        assert bias.shape == (1, 5)
        assert torch.all(bias == 0)


class TestFiniteDifferenceGradcheck:
    def test_passes_on_smooth_function(self, generator):
        """Test a smooth function passes the check"""
        w = torch.randn(3, 3, dtype=torch.float64, generator=generator, requires_grad=True)
        x = torch.randn(3, dtype=torch.float64, generator=generator)
        report = finite_difference_gradcheck(lambda: torch.tanh(w @ x).sum(), {"w": w})
        assert report.passed()
        assert set(report.max_relative_error) == {"w"}

    def test_detects_wrong_gradient(self, generator):
        """Test a custom op with a wrong backward is caught"""

        class WrongSquare(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                ctx.save_for_backward(x)
                return x**2

            @staticmethod
            def backward(ctx, grad):
                (x,) = ctx.saved_tensors
                return grad * 3 * x

        w = torch.randn(4, dtype=torch.float64, generator=generator, requires_grad=True)
        report = finite_difference_gradcheck(lambda: WrongSquare.apply(w).sum(), {"w": w})
        assert not report.passed()

    @pytest.mark.parametrize("epsilon", [1e-8, 1e-2])
    def test_epsilon_out_of_range(self, epsilon):
        """Test epsilon outside [1e-7, 1e-3] is rejected"""
        w = torch.ones(1, dtype=torch.float64, requires_grad=True)
        with pytest.raises(ValueError):
            finite_difference_gradcheck(lambda: w.sum(), {"w": w}, epsilon=epsilon)

    def test_non_finite_value_raises(self):
        """Test a non-finite function value raises GradientCheckError"""
        w = torch.zeros(1, dtype=torch.float64, requires_grad=True)
        with pytest.raises(GradientCheckError):
            finite_difference_gradcheck(lambda: torch.log(w).sum(), {"w": w})

    def test_parameters_restored(self, generator):
        """Test perturbed parameters are restored afterwards"""
        w = torch.randn(5, dtype=torch.float64, generator=generator, requires_grad=True)
        before = w.detach().clone()
        finite_difference_gradcheck(lambda: (w**3).sum(), {"w": w})
        assert torch.equal(w.detach(), before)
