"""Holistic point-cloud initialization from per-frame depth maps.

Every masked pixel of every frame is backprojected through its camera into
world space, the per-frame clouds are pooled, uniformly subsampled, and the
result seeds the canonical Gaussian set. A random-in-box initializer is kept
as the ablation baseline.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import Tensor

from .core import Camera, GaussianCloud, inverse_sigmoid, rgb_to_band0, sh_band_count

log = logging.getLogger(__name__)

DEFAULT_KEEP_FRACTION = 0.001  # uniform subsample of the pooled reprojections
DEFAULT_OPACITY = 0.1
FALLBACK_SCALE = 0.1  # scene units, used when too few points for 3-NN


@dataclass
class FrameRecord:
    """One timestep: image, depth map, tool mask, camera pose, normalized time.

    Depth is metric for binocular sequences and relative (unitless) for
    monocular ones; mask is 1 where tissue is kept, 0 on tool pixels.
    """

    image: Tensor   # (H, W, 3) in [0, 1]
    depth: Tensor   # (H, W)
    mask: Tensor    # (H, W) {0, 1}
    camera: Camera
    time: float
    index: int = 0

    def __post_init__(self):
        h, w = self.depth.shape
        if self.image.shape != (h, w, 3):
            raise ValueError(f"image {tuple(self.image.shape)} does not match depth {(h, w)}")
        if self.mask.shape != (h, w):
            raise ValueError(f"mask {tuple(self.mask.shape)} does not match depth {(h, w)}")
        if (self.camera.height, self.camera.width) != (h, w):
            raise ValueError("camera size does not match rasters")


@dataclass
class PointCloud:
    positions: Tensor  # (M, 3)
    colors: Tensor     # (M, 3)

    def __len__(self) -> int:
        return self.positions.shape[0]


def reproject_frame(frame: FrameRecord) -> PointCloud:
    """Backproject the frame's kept pixels to world space.

    X_cam = depth * K^-1 (u, v, 1)^T, then mapped through the camera-to-world
    transform; pixels with mask 0 or non-positive depth are excluded. A frame
    with nothing to keep yields an empty cloud and a warning.
    """
    cam = frame.camera
    dtype = frame.depth.dtype
    keep = (frame.mask > 0) & (frame.depth > 0)
    if not bool(keep.any()):
        log.warning("frame %d: no valid pixels to reproject, skipping", frame.index)
        return PointCloud(positions=frame.depth.new_zeros((0, 3)),
                          colors=frame.depth.new_zeros((0, 3)))
    vu = torch.nonzero(keep, as_tuple=False)
    v = vu[:, 0].to(dtype)
    u = vu[:, 1].to(dtype)
    d = frame.depth[keep]
    x = d * (u - cam.cx) / cam.fx
    y = d * (v - cam.cy) / cam.fy
    p_cam = torch.stack([x, y, d], dim=-1)
    T = cam.T.to(dtype)
    positions = p_cam @ T[:3, :3].T + T[:3, 3]
    colors = frame.image[keep].to(dtype)
    return PointCloud(positions=positions, colors=colors)


def combine_holistic(clouds: list[PointCloud], keep_fraction: float = DEFAULT_KEEP_FRACTION,
                     seed: int = 0) -> PointCloud:
    """Pool per-frame clouds and keep a seeded uniform ceil(fraction * M) sample."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must be in (0, 1]")
    nonempty = [c for c in clouds if len(c) > 0]
    if not nonempty:
        raise ValueError("holistic initialization got no points; check masks and depths")
    positions = torch.cat([c.positions for c in nonempty])
    colors = torch.cat([c.colors for c in nonempty])
    total = positions.shape[0]
    keep = min(total, math.ceil(keep_fraction * total))
    if keep < total:
        g = torch.Generator().manual_seed(seed)
        idx = torch.randperm(total, generator=g)[:keep]
        idx = idx.sort().values
        positions = positions[idx]
        colors = colors[idx]
    return PointCloud(positions=positions, colors=colors)


def _knn_log_scales(positions: Tensor, k: int = 3) -> Tensor:
    """Isotropic log-scale per point: log mean distance to the k nearest neighbors."""
    n = positions.shape[0]
    if n < k + 1:
        return torch.full((n, 3), math.log(FALLBACK_SCALE), dtype=positions.dtype)
    pts = positions.detach().cpu().numpy().astype(np.float64)
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    mean_dist = np.maximum(dist[:, 1:].mean(axis=1), 1e-7)
    scales = torch.from_numpy(np.log(mean_dist)).to(positions.dtype)
    return scales.unsqueeze(-1).expand(n, 3).clone()


def instantiate_gaussians(points: PointCloud, sh_degree: int = 3,
                          opacity: float = DEFAULT_OPACITY) -> GaussianCloud:
    """Canonical Gaussians seeded from a point cloud.

    Identity rotations, isotropic 3-NN scales, uniform starting opacity, and
    band-0 SH inverted from the point colors (higher bands zero).
    """
    n = len(points)
    if n < 1:
        raise ValueError("need at least one point")
    dtype = points.positions.dtype
    rotations = torch.zeros(n, 4, dtype=dtype)
    rotations[:, 0] = 1.0
    bands = sh_band_count(sh_degree)
    sh = torch.zeros(n, bands, 3, dtype=dtype)
    sh[:, 0, :] = rgb_to_band0(points.colors)
    return GaussianCloud(
        positions=points.positions.clone(),
        rotations=rotations,
        log_scales=_knn_log_scales(points.positions),
        opacity_logits=inverse_sigmoid(torch.full((n, 1), opacity, dtype=dtype)),
        sh_coeffs=sh,
    )


def random_init(count: int, bounds_min, bounds_max, sh_degree: int = 3,
                seed: int = 0, dtype: torch.dtype = torch.float32) -> GaussianCloud:
    """Ablation baseline: uniform positions in a box, gray color, otherwise
    the same attribute scheme as the holistic path."""
    if count < 1:
        raise ValueError("count must be >= 1")
    lo = torch.as_tensor(bounds_min, dtype=dtype)
    hi = torch.as_tensor(bounds_max, dtype=dtype)
    if bool((hi <= lo).any()):
        raise ValueError("degenerate bounding box")
    g = torch.Generator().manual_seed(seed)
    positions = lo + (hi - lo) * torch.rand(count, 3, generator=g, dtype=dtype)
    colors = torch.full((count, 3), 0.5, dtype=dtype)
    return instantiate_gaussians(PointCloud(positions=positions, colors=colors),
                                 sh_degree=sh_degree)


def write_ply(path, cloud: PointCloud):
    """Binary little-endian PLY with xyz + rgb, for point-cloud debugging."""
    pos = cloud.positions.detach().cpu().numpy().astype("<f4")
    rgb = (cloud.colors.detach().cpu().numpy().clip(0, 1) * 255).astype(np.uint8)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(pos)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        for p, c in zip(pos, rgb):
            f.write(struct.pack("<fffBBB", p[0], p[1], p[2], c[0], c[1], c[2]))
