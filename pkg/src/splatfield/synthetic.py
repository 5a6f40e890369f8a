"""Synthetic ground-truth scene generation for end-to-end verification.

A seeded Gaussian cloud is animated by a closed-form deformation (rigid
sinusoidal translation or per-Gaussian radial pulsation), rendered with the
oracle renderer from a fixed viewpoint, and written in the standard dataset
layout so the generator and loader round-trip exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .core import Camera, GaussianCloud, inverse_sigmoid, rgb_to_band0, sh_band_count
from .initializer import FrameRecord
from .rasterizer import RasterConfig, project, render_oracle
from .scene_io import load_scene, save_scene

DEFORMATIONS = ("rigid_translation", "radial_pulsation", "static")


class SyntheticSpecError(ValueError):
    pass


@dataclass
class SyntheticSceneSpec:
    gaussian_count: int = 500
    image_size: int = 96
    frame_count: int = 24
    deformation: str = "rigid_translation"
    amplitude: float = 0.1
    seed: int = 0
    focal: float = 0.0  # 0 = auto: 1.15 * image_size
    near: float = 0.5
    far: float = 10.0
    depth_range: tuple[float, float] = (2.6, 3.4)
    lateral_extent: float = 0.95
    scale_range: tuple[float, float] = (0.06, 0.14)
    opacity_range: tuple[float, float] = (0.55, 0.95)
    sh_degree: int = 1
    depth_mode: str = "binocular"
    tool_mask: bool = False  # carve a synthetic instrument rectangle out of the masks

    def __post_init__(self):
        if self.deformation not in DEFORMATIONS:
            raise SyntheticSpecError(f"unknown deformation family {self.deformation!r}")
        if self.amplitude < 0:
            raise SyntheticSpecError("amplitude must be >= 0")


def make_camera(spec: SyntheticSceneSpec) -> Camera:
    focal = spec.focal if spec.focal > 0 else 1.15 * spec.image_size
    return Camera.identity(spec.image_size, spec.image_size, focal=focal,
                           near=spec.near, far=spec.far)


def ground_truth_cloud(spec: SyntheticSceneSpec) -> GaussianCloud:
    """Foreground splats over a dense opaque backdrop layer.

    The backdrop is laid out on a pixel grid behind the foreground so every
    pixel has tissue-like coverage: blended depth is well defined across the
    whole frame, as in the target imaging domain.
    """
    g = torch.Generator().manual_seed(spec.seed)
    camera = make_camera(spec)
    n = spec.gaussian_count

    def u(*shape):
        return torch.rand(*shape, generator=g)

    side = max(int((0.3 * n) ** 0.5), 2)
    n_back = side * side
    n_front = n - n_back
    if n_front <= 0:
        raise SyntheticSpecError("gaussian_count too small for the backdrop layer")

    front = torch.stack([
        (u(n_front) * 2 - 1) * spec.lateral_extent,
        (u(n_front) * 2 - 1) * spec.lateral_extent,
        spec.depth_range[0] + u(n_front) * (spec.depth_range[1] - spec.depth_range[0]),
    ], dim=-1)

    # Backdrop: pixel-grid placement just beyond the foreground depth band.
    margin = 0.05 * spec.image_size
    px = torch.linspace(margin, spec.image_size - 1 - margin, side)
    uu, vv = torch.meshgrid(px, px, indexing="xy")
    z_back = spec.depth_range[1] + 0.1 + 0.1 * u(n_back)
    bx = (uu.reshape(-1) - camera.cx) / camera.fx * z_back
    by = (vv.reshape(-1) - camera.cy) / camera.fy * z_back
    back = torch.stack([bx, by, z_back], dim=-1)
    spacing_px = (spec.image_size - 2 * margin) / (side - 1)
    back_scale = 1.1 * spacing_px * float(z_back.mean()) / camera.fx

    positions = torch.cat([front, back])
    rotations = torch.nn.functional.normalize(torch.randn(n, 4, generator=g), dim=-1)
    front_scale = spec.scale_range[0] + u(n_front, 1) * (spec.scale_range[1] - spec.scale_range[0])
    log_scales = torch.log(torch.cat([
        front_scale * (0.7 + 0.7 * u(n_front, 3)),
        back_scale * (0.9 + 0.2 * u(n_back, 3)),
    ]))
    opacity = torch.cat([
        spec.opacity_range[0] + u(n_front, 1) * (spec.opacity_range[1] - spec.opacity_range[0]),
        torch.full((n_back, 1), 0.95),
    ])
    bands = sh_band_count(spec.sh_degree)
    sh = torch.zeros(n, bands, 3)
    sh[:, 0, :] = rgb_to_band0(0.15 + 0.7 * u(n, 3))
    if bands > 1:
        sh[:, 1:, :] = 0.06 * torch.randn(n, bands - 1, 3, generator=g)
    return GaussianCloud(positions=positions, rotations=rotations, log_scales=log_scales,
                         opacity_logits=inverse_sigmoid(opacity), sh_coeffs=sh)


def deformed_positions(spec: SyntheticSceneSpec, base: torch.Tensor, t: float) -> torch.Tensor:
    a = spec.amplitude
    if spec.deformation == "static" or a == 0.0:
        return base
    phase = 2.0 * math.pi * t
    if spec.deformation == "rigid_translation":
        offset = torch.tensor([a * math.sin(phase),
                               0.6 * a * math.sin(phase + 1.3),
                               0.3 * a * math.sin(phase + 2.1)])
        return base + offset
    # radial_pulsation: breathe around the cloud centroid
    center = base.mean(dim=0, keepdim=True)
    return center + (base - center) * (1.0 + a * math.sin(phase))


def frame_times(spec: SyntheticSceneSpec) -> list[float]:
    n = spec.frame_count
    return [i / (n - 1) if n > 1 else 0.0 for i in range(n)]


def _check_in_frustum(spec: SyntheticSceneSpec, cloud: GaussianCloud, camera: Camera):
    for t in frame_times(spec):
        pos = deformed_positions(spec, cloud.positions, t)
        z = pos[:, 2]
        if bool((z <= camera.near).any()) or bool((z >= camera.far).any()):
            raise SyntheticSpecError(f"Gaussian depth leaves (near, far) at t={t}")
        u = camera.fx * pos[:, 0] / z + camera.cx
        v = camera.fy * pos[:, 1] / z + camera.cy
        inside = (u >= 0) & (u <= camera.width - 1) & (v >= 0) & (v <= camera.height - 1)
        if not bool(inside.all()):
            raise SyntheticSpecError(
                f"{int((~inside).sum())} Gaussians leave the frame at t={t}; "
                "reduce amplitude or lateral extent")


def _tool_mask(spec: SyntheticSceneSpec, t: float) -> torch.Tensor:
    mask = torch.ones(spec.image_size, spec.image_size)
    if spec.tool_mask:
        s = spec.image_size
        x0 = int(s * (0.15 + 0.25 * t))
        mask[int(s * 0.6):int(s * 0.85), x0:x0 + int(s * 0.2)] = 0.0
    return mask


def render_ground_truth(spec: SyntheticSceneSpec):
    """Returns (cloud, camera, frames) with frames rendered by the oracle:
    exact blended color and depth at every timestep."""
    cloud = ground_truth_cloud(spec)
    camera = make_camera(spec)
    _check_in_frustum(spec, cloud, camera)
    cfg = RasterConfig(stop_transmittance=0.0)
    frames = []
    for i, t in enumerate(frame_times(spec)):
        moved = GaussianCloud(
            positions=deformed_positions(spec, cloud.positions, t),
            rotations=cloud.rotations, log_scales=cloud.log_scales,
            opacity_logits=cloud.opacity_logits, sh_coeffs=cloud.sh_coeffs)
        with torch.no_grad():
            out = render_oracle(project(moved, camera, cfg), camera, cfg)
        frames.append(FrameRecord(
            image=out.color.clamp(0.0, 1.0), depth=out.depth,
            mask=_tool_mask(spec, t), camera=camera, time=t, index=i))
    return cloud, camera, frames


def generate_synthetic(spec: SyntheticSceneSpec, out_dir):
    """Render the ground-truth scene, write the dataset, and reload it.

    Returning the reloaded frames guarantees the training pipeline consumes
    exactly what lives on disk (including PNG quantization).
    """
    _, _, frames = render_ground_truth(spec)
    manifest_path = save_scene(out_dir, frames, depth_mode=spec.depth_mode,
                               depth_scale=spec.far / 60000.0)
    return load_scene(manifest_path)
