"""Training losses: masked color L1, reciprocal / correlation depth terms,
spatial total variation on rendered outputs, temporal total variation on the
encoding voxel, and their weighted combination.

All pixel losses are means over the pixels they see, so the balancing weights
are resolution-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

from .deformation import HexPlaneField

DEPTH_EPS = 1e-6
VARIANCE_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    color: float = 1.0
    depth: float = 1.0
    spatial_tv: float = 0.01
    temporal_tv: float = 0.01
    depth_mode: str = "binocular"  # or "monocular"

    def __post_init__(self):
        if self.depth_mode not in ("binocular", "monocular"):
            raise ValueError(f"unknown depth_mode {self.depth_mode!r}")
        if min(self.color, self.depth, self.spatial_tv, self.temporal_tv) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    color: float
    depth: float
    spatial_tv: float
    temporal_tv: float
    total: float
    flags: dict = field(default_factory=dict)

    FIELDS = ("color", "depth", "spatial_tv", "temporal_tv", "total")

    def as_row(self) -> list[float]:
        return [self.color, self.depth, self.spatial_tv, self.temporal_tv, self.total]


def _masked_mean(values: Tensor, mask: Tensor) -> Tensor:
    count = mask.sum()
    if int(count) == 0:
        return values.sum() * 0.0
    return (values * mask).sum() / (count * (values.shape[-1] if values.ndim == 3 else 1))


def loss_color(pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """Mean L1 over masked pixels and channels. (H,W,3) images, (H,W) mask."""
    if pred.shape != target.shape:
        raise ValueError("color shapes differ")
    m = mask.to(pred.dtype)
    diff = (pred - target).abs()
    return _masked_mean(diff, m.unsqueeze(-1))


def loss_depth_binocular(pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """Mean masked L1 between reciprocal depths (metric supervision)."""
    m = mask.to(pred.dtype)
    diff = (1.0 / (pred + DEPTH_EPS) - 1.0 / (target + DEPTH_EPS)).abs()
    return _masked_mean(diff, m)


def loss_depth_monocular(pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """1 - Pearson correlation over the masked pixel set (relative supervision).

    Invariant to positive affine transforms of either input; a zero-variance
    input makes the correlation undefined and the loss degenerates to 1.
    """
    sel = mask.reshape(-1) > 0
    p = pred.reshape(-1)[sel]
    q = target.reshape(-1)[sel]
    if p.numel() < 2:
        return pred.sum() * 0.0 + 1.0
    pc = p - p.mean()
    qc = q - q.mean()
    cov = (pc * qc).mean()
    corr = cov / torch.sqrt(pc.pow(2).mean() * qc.pow(2).mean() + VARIANCE_EPS)
    return 1.0 - corr


def _tv(image: Tensor) -> Tensor:
    """Anisotropic TV: mean absolute neighbor difference, both axes pooled."""
    dh = (image[1:, :] - image[:-1, :]).abs()
    dw = (image[:, 1:] - image[:, :-1]).abs()
    total = dh.sum() + dw.sum()
    count = dh.numel() + dw.numel()
    if count == 0:
        return image.sum() * 0.0
    return total / count


def loss_spatial_tv(color: Tensor, depth: Tensor) -> Tensor:
    """TV of the color image plus TV of the reciprocal depth image.

    Computed over the full frame on purpose: it fills in regions that the
    masks exclude from direct supervision.
    """
    return _tv(color) + _tv(1.0 / (depth + DEPTH_EPS))


def loss_temporal_tv(field: HexPlaneField) -> Tensor:
    """Mean squared difference of adjacent time columns of the time-bearing
    planes, summed over levels. Spatial-only planes never contribute."""
    total = None
    for plane in field.time_planes():
        diff = plane[..., 1:] - plane[..., :-1]
        term = diff.pow(2).mean() if diff.numel() else plane.sum() * 0.0
        total = term if total is None else total + term
    if total is None:
        raise ValueError("field has no time-bearing planes")
    return total


def total_loss(color: Tensor, depth: Tensor, spatial_tv: Tensor, temporal_tv: Tensor,
               weights: LossWeights, flags: dict | None = None):
    """Weighted sum per the training objective; returns (tensor, LossReport)."""
    total = (weights.color * color + weights.depth * depth
             + weights.spatial_tv * spatial_tv + weights.temporal_tv * temporal_tv)
    report = LossReport(color=float(color.detach()), depth=float(depth.detach()),
                        spatial_tv=float(spatial_tv.detach()),
                        temporal_tv=float(temporal_tv.detach()),
                        total=float(total.detach()), flags=flags or {})
    return total, report
