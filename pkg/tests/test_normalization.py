import numpy as np
import pytest
import torch

from mitodet.normalization import (GroupNorm2d, WSConv2d, default_group_count,
                                   group_normalize, weight_standardize)


def gn_loop_oracle(x, gamma, beta, groups, eps=1e-5):
    """Two-pass per-(sample, group) mean/variance reference."""
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    cpg = c // groups
    out = np.empty_like(x)
    for ni in range(n):
        for g in range(groups):
            block = x[ni, g * cpg:(g + 1) * cpg]
            mean = block.mean()
            var = block.var(ddof=1)
            out[ni, g * cpg:(g + 1) * cpg] = (block - mean) / np.sqrt(var + eps)
    return out * np.asarray(gamma).reshape(1, -1, 1, 1) + np.asarray(beta).reshape(1, -1, 1, 1)


def ws_loop_oracle(w, eps=1e-5):
    w = np.asarray(w, dtype=np.float64)
    out = np.empty_like(w)
    for co in range(w.shape[0]):
        fan_in = w[co]
        out[co] = (fan_in - fan_in.mean()) / np.sqrt(fan_in.var(ddof=1) + eps)
    return out


class TestGroupNormalize:
    def test_constant_input_zero_affine(self):
        x = torch.full((1, 4, 3, 3), 5.0, dtype=torch.float64)
        out = group_normalize(x, torch.ones(4, dtype=torch.float64),
                              torch.zeros(4, dtype=torch.float64), groups=2)
        assert torch.all(out == 0)

    def test_constant_input_affine(self):
        x = torch.full((2, 4, 3, 3), 5.0, dtype=torch.float64)
        out = group_normalize(x, 2 * torch.ones(4, dtype=torch.float64),
                              3 * torch.ones(4, dtype=torch.float64), groups=2)
        assert torch.allclose(out, torch.full_like(x, 3.0))

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((2, 8, 4, 4))
        gamma = rng.uniform(0.5, 1.5, 8)
        beta = rng.standard_normal(8)
        out = group_normalize(torch.tensor(x), torch.tensor(gamma), torch.tensor(beta), groups=4)
        ref = gn_loop_oracle(x, gamma, beta, groups=4)
        assert np.abs(out.numpy() - ref).max() < 1e-5

    def test_normalized_moments(self, rng):
        x = torch.tensor(rng.standard_normal((3, 12, 5, 7)) * 4 + 2)
        out = group_normalize(x, torch.ones(12, dtype=torch.float64),
                              torch.zeros(12, dtype=torch.float64), groups=3)
        blocks = out.reshape(3, 3, 4, 5, 7)
        means = blocks.mean(dim=(2, 3, 4))
        stds = blocks.var(dim=(2, 3, 4), unbiased=True)
        assert means.abs().max() < 1e-5
        assert (stds - 1).abs().max() < 1e-3

    def test_scale_invariance(self, rng):
        x = torch.tensor(rng.standard_normal((1, 8, 6, 6)))
        g, b = torch.ones(8, dtype=torch.float64), torch.zeros(8, dtype=torch.float64)
        base = group_normalize(x, g, b, groups=4)
        scaled = group_normalize(3.7 * x, g, b, groups=4)
        assert torch.allclose(base, scaled, rtol=1e-3, atol=1e-6)
        for c in range(8):
            assert base[0, c].argmax() == scaled[0, c].argmax()

    def test_shape_preserved(self, rng):
        x = torch.tensor(rng.standard_normal((2, 6, 3, 5)))
        out = group_normalize(x, torch.ones(6, dtype=torch.float64),
                              torch.zeros(6, dtype=torch.float64), groups=2)
        assert out.shape == x.shape

    def test_divisibility_error(self):
        x = torch.randn(1, 6, 2, 2)
        with pytest.raises(ValueError, match="divisible"):
            group_normalize(x, torch.ones(6), torch.zeros(6), groups=4)

    def test_nonfinite_error(self):
        x = torch.randn(1, 4, 2, 2)
        x[0, 0, 0, 0] = float("nan")
        with pytest.raises(ValueError, match="non-finite"):
            group_normalize(x, torch.ones(4), torch.zeros(4), groups=2)

    def test_affine_mismatch_error(self):
        x = torch.randn(1, 4, 2, 2)
        with pytest.raises(ValueError, match="affine"):
            group_normalize(x, torch.ones(3), torch.zeros(3), groups=2)


class TestWeightStandardize:
    def test_constant_kernel_zeros(self):
        w = torch.full((4, 3, 3, 3), 0.7, dtype=torch.float64)
        assert torch.all(weight_standardize(w) == 0)

    def test_alternating_kernel_closed_form(self):
        # entries +1/-1 with zero mean: sample variance is n/(n-1), so the
        # standardized magnitude is 1/sqrt(n/(n-1) + eps) exactly
        w = torch.ones((2, 6, 3, 3), dtype=torch.float64)
        w.view(2, -1)[:, 1::2] = -1.0
        n = 6 * 3 * 3
        expected = 1.0 / np.sqrt(n / (n - 1) + 1e-5)
        out = weight_standardize(w)
        assert torch.allclose(out.abs(), torch.full_like(w, expected), atol=1e-12)
        assert torch.equal(out.sign(), w.sign())

    def test_matches_loop_oracle(self, rng):
        w = rng.standard_normal((4, 3, 3, 3))
        out = weight_standardize(torch.tensor(w))
        assert np.abs(out.numpy() - ws_loop_oracle(w)).max() < 1e-5

    def test_idempotent(self, rng):
        w = torch.tensor(rng.standard_normal((6, 8, 3, 3)))
        once = weight_standardize(w)
        twice = weight_standardize(once)
        assert (once - twice).abs().max() < 1e-4

    def test_shape_preserved_and_moments(self, rng):
        w = torch.tensor(rng.standard_normal((5, 4, 3, 3)))
        out = weight_standardize(w)
        assert out.shape == w.shape
        flat = out.reshape(5, -1)
        assert flat.mean(dim=1).abs().max() < 1e-6
        assert (flat.var(dim=1, unbiased=True) - 1).abs().max() < 1e-3

    def test_nonfinite_error(self):
        w = torch.randn(2, 2, 3, 3)
        w[0, 0, 0, 0] = float("inf")
        with pytest.raises(ValueError, match="non-finite"):
            weight_standardize(w)


class TestModules:
    def test_default_group_count(self):
        assert default_group_count(64) == 32
        assert default_group_count(32) == 32
        assert default_group_count(16) == 16
        assert default_group_count(48) == 48  # not divisible by 32

    def test_group_norm_module_matches_functional(self, rng):
        x = torch.tensor(rng.standard_normal((2, 16, 4, 4)), dtype=torch.float32)
        m = GroupNorm2d(16, groups=4)
        with torch.no_grad():
            m.gamma.uniform_(0.5, 1.5)
            m.beta.normal_()
        out = m(x)
        ref = group_normalize(x, m.gamma, m.beta, 4)
        assert torch.allclose(out, ref)

    def test_wsconv_uses_standardized_kernel(self, rng):
        conv = WSConv2d(3, 4, 3, padding=1, bias=False).double()
        x = torch.tensor(rng.standard_normal((1, 3, 5, 5)))
        out = conv(x)
        ref = torch.nn.functional.conv2d(x, weight_standardize(conv.weight), padding=1)
        assert torch.allclose(out, ref)
