"""Finite-difference validation of the analytic backward passes (f64 mode)."""

import pytest
import torch

from gradcheck import fd_compare
from helpers import identity_camera, random_cloud
from splatfield.core import GaussianCloud
from splatfield.rasterizer import RasterConfig, project, render

TOL = 1e-4


def _loss_closure(cloud, cam, cfg, gc, gd):
    def make_loss():
        proj = project(cloud, cam, cfg)
        out = render(proj, cam, cfg)
        return (out.color * gc).sum() + (out.depth * gd).sum()
    return make_loss


def _scene(seed, n=8, size=16, sh_degree=1):
    cloud = random_cloud(n, seed=seed, dtype=torch.float64, sh_degree=sh_degree)
    cam = identity_camera(size, size)
    cfg = RasterConfig().for_gradcheck()
    g = torch.Generator().manual_seed(seed + 1000)
    gc = torch.randn(size, size, 3, generator=g, dtype=torch.float64)
    gd = torch.randn(size, size, generator=g, dtype=torch.float64)
    return cloud, cam, cfg, gc, gd


class TestRasterizerGradients:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_all_cloud_attributes(self, seed):
        cloud, cam, cfg, gc, gd = _scene(seed)
        params = list(cloud.attribute_tensors().values())
        err, _, _ = fd_compare(_loss_closure(cloud, cam, cfg, gc, gd), params)
        assert err < TOL, f"max rel grad error {err}"

    def test_depth_channel_to_positions(self):
        cloud, cam, cfg, _, gd = _scene(7, n=6)
        err, _, _ = fd_compare(
            _loss_closure(cloud, cam, cfg, torch.zeros(16, 16, 3, dtype=torch.float64), gd),
            [cloud.positions])
        assert err < TOL

    def test_opacity_single_gaussian_matches_fd(self):
        cloud, cam, cfg, _, _ = _scene(3, n=1)
        gc = torch.zeros(16, 16, 3, dtype=torch.float64)
        gc[8, 8, 0] = 1.0  # L = red channel at one pixel
        err, analytic, _ = fd_compare(
            _loss_closure(cloud, cam, cfg, gc, torch.zeros(16, 16, dtype=torch.float64)),
            [cloud.opacity_logits])
        assert err < TOL
        assert float(analytic[0].abs().sum()) > 0

    def test_sh_degree3_gradients(self):
        cloud, cam, cfg, gc, gd = _scene(11, n=4, sh_degree=3)
        err, _, _ = fd_compare(_loss_closure(cloud, cam, cfg, gc, gd), [cloud.sh_coeffs])
        assert err < TOL
