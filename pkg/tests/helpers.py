"""Shared scene builders for tests: small randomized clouds and cameras."""

import torch

from splatfield.core import Camera, GaussianCloud, inverse_sigmoid, rgb_to_band0, sh_band_count


def random_cloud(n, seed=0, dtype=torch.float64, sh_degree=1, depth_range=(2.0, 4.0),
                 lateral=0.9, scale_range=(0.05, 0.25)):
    """Cloud in front of an identity camera at z in depth_range."""
    g = torch.Generator().manual_seed(seed)

    def u(*shape):
        return torch.rand(*shape, generator=g, dtype=dtype)

    positions = torch.stack([
        (u(n) * 2 - 1) * lateral,
        (u(n) * 2 - 1) * lateral,
        depth_range[0] + u(n) * (depth_range[1] - depth_range[0]),
    ], dim=-1)
    rotations = torch.nn.functional.normalize(
        torch.randn(n, 4, generator=g, dtype=dtype), dim=-1)
    log_scales = torch.log(scale_range[0] + u(n, 3) * (scale_range[1] - scale_range[0]))
    opacity_logits = inverse_sigmoid(0.15 + 0.7 * u(n, 1))
    bands = sh_band_count(sh_degree)
    sh = torch.zeros(n, bands, 3, dtype=dtype)
    sh[:, 0, :] = rgb_to_band0(0.15 + 0.7 * u(n, 3))
    if bands > 1:
        sh[:, 1:, :] = 0.1 * torch.randn(n, bands - 1, 3, generator=g, dtype=dtype)
    return GaussianCloud(positions=positions, rotations=rotations, log_scales=log_scales,
                         opacity_logits=opacity_logits, sh_coeffs=sh)


def identity_camera(width=32, height=32, focal=None, dtype=torch.float64,
                    near=0.5, far=10.0):
    if focal is None:
        focal = width * 1.2
    return Camera.identity(width, height, focal=focal, near=near, far=far, dtype=dtype)


def random_scene(seed=0, n=20, size=32, dtype=torch.float64, sh_degree=1):
    cloud = random_cloud(n, seed=seed, dtype=dtype, sh_degree=sh_degree)
    camera = identity_camera(size, size, dtype=dtype)
    return cloud, camera
