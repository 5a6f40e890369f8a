import math

import numpy as np
import torch

from splatfield.metrics import psnr, ssim, ssim_map


def _rand(shape, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=g)


class TestPSNR:
    def test_exact_match_capped(self):
        img = _rand((16, 16, 3), 0)
        assert psnr(img, img) == 100.0

    def test_uniform_offset_closed_form(self):
        img = torch.full((16, 16, 3), 0.5)
        assert math.isclose(psnr(img + 0.1, img), 20.0, rel_tol=1e-6)

    def test_masked(self):
        img = _rand((8, 8, 3), 1)
        noisy = img.clone()
        noisy[:4] += 0.5
        mask = torch.zeros(8, 8)
        mask[4:] = 1.0
        assert psnr(noisy, img, mask) == 100.0
        assert psnr(noisy, img) < 100.0


class TestSSIM:
    def test_self_similarity_is_one(self):
        img = _rand((32, 32, 3), 2)
        assert math.isclose(ssim(img, img), 1.0, abs_tol=1e-6)

    def test_matches_skimage(self):
        from skimage.metrics import structural_similarity

        img = _rand((48, 48, 3), 3)
        other = (img + 0.15 * _rand((48, 48, 3), 4)).clamp(0, 1)
        ours = ssim(img, other)
        ref = structural_similarity(
            img.numpy(), other.numpy(), channel_axis=2, data_range=1.0,
            gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
        assert math.isclose(ours, float(ref), abs_tol=2e-4)

    def test_grayscale_matches_skimage(self):
        from skimage.metrics import structural_similarity

        img = _rand((40, 40), 5)
        other = (img * 0.8 + 0.1).clamp(0, 1)
        ours = ssim(img, other)
        ref = structural_similarity(
            img.numpy(), other.numpy(), data_range=1.0,
            gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
        assert math.isclose(ours, float(ref), abs_tol=2e-4)

    def test_degradation_ordering(self):
        img = _rand((32, 32, 3), 6)
        slightly = (img + 0.05 * _rand((32, 32, 3), 7)).clamp(0, 1)
        badly = (img + 0.5 * _rand((32, 32, 3), 8)).clamp(0, 1)
        assert ssim(img, slightly) > ssim(img, badly)

    def test_masked_ssim_ignores_masked_region(self):
        img = _rand((32, 32, 3), 9)
        corrupted = img.clone()
        corrupted[:16] = _rand((16, 32, 3), 10)
        mask = torch.zeros(32, 32)
        mask[22:] = 1.0  # away from the corrupted half by > window size
        assert ssim(corrupted, img, mask) > 0.999

    def test_map_shape(self):
        img = _rand((20, 24, 3), 11)
        m = ssim_map(img, img)
        assert m.shape == (10, 14)
        assert np.allclose(m.numpy(), 1.0, atol=1e-6)
