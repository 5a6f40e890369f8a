"""Differentiable tile-based splat rendering with a brute-force oracle.

Forward model per pixel: contributors are sorted front-to-back by camera
depth, alpha-blended as C = sum_i c_i a_i prod_{j<i}(1 - a_j), with depth
blended by the same weights. The tile renderer and the oracle renderer share
one elementwise alpha evaluation and accumulate blending sums in float64, so
with early stopping disabled they agree to float accuracy by construction.

Backward passes are analytic via autograd on the forward graph; culling,
sorting, and tile assignment are treated as piecewise-constant (zero
gradient), which `render_backward` exposes explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import Tensor

from .core import Camera, GaussianCloud, build_covariance, eval_sh


@dataclass(frozen=True)
class RasterConfig:
    tile_size: int = 16
    dilation: float = 0.3            # low-pass term added to the cov2d diagonal (px^2)
    alpha_cutoff: float = 1.0 / 255.0  # contributions below this are skipped
    alpha_max: float = 0.99          # per-contributor alpha clamp
    stop_transmittance: float = 1e-4  # blending stops once T drops below this
    support_sigmas: float = 3.0      # splat footprint truncation radius, in sigma
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if self.dilation < 0:
            raise ValueError("dilation must be >= 0")

    def for_gradcheck(self) -> "RasterConfig":
        """Smooth variant: no footprint/alpha cutoffs, no early stop.

        The cutoffs are step discontinuities whose gradient is defined as
        zero; finite-difference tests need the smooth rendering function.
        """
        return replace(self, alpha_cutoff=0.0, stop_transmittance=0.0,
                       support_sigmas=math.inf)


@dataclass
class ProjectedGaussians:
    """Screen-space splats, stored struct-of-arrays. Tensors keep the autograd
    graph back to the source GaussianCloud so rendering stays differentiable."""

    mean2d: Tensor       # (M, 2) pixel coordinates
    cov2d: Tensor        # (M, 2, 2) after low-pass dilation
    depth: Tensor        # (M,) camera-space z
    color: Tensor        # (M, 3)
    alpha_base: Tensor   # (M,) opacity in (0, 1)
    gaussian_id: Tensor  # (M,) long, index into the source cloud
    source_count: int    # N of the source cloud (for scatter-back of grads)

    def __len__(self) -> int:
        return self.mean2d.shape[0]


@dataclass
class RenderOutput:
    color: Tensor          # (H, W, 3)
    depth: Tensor          # (H, W) unnormalized blend, per the render function
    alpha: Tensor          # (H, W) accumulated blending weight
    depth_normalized: Tensor  # (H, W) depth / max(alpha, eps) diagnostic
    contributors: Tensor   # (H, W) int32 count of blended splats per pixel


def project(cloud: GaussianCloud, camera: Camera, config: RasterConfig = RasterConfig()) -> ProjectedGaussians:
    """Perspective-project a cloud: cull by depth, build 2D covariances.

    cov2d = J W Sigma W^T J^T + dilation * I, with J the local affine Jacobian
    of the perspective projection at the Gaussian center.
    """
    if len(cloud) < 1:
        raise ValueError("cannot project an empty cloud")
    dtype = cloud.positions.dtype
    W = camera.world_to_camera(dtype)
    R_wc = W[:3, :3]
    t_wc = W[:3, 3]

    p_cam = cloud.positions @ R_wc.T + t_wc
    z = p_cam[:, 2]
    keep = (z > camera.near) & (z < camera.far)
    ids = torch.nonzero(keep, as_tuple=False).squeeze(1)
    if ids.numel() == 0:
        empty = cloud.positions.new_zeros
        return ProjectedGaussians(
            mean2d=empty((0, 2)), cov2d=empty((0, 2, 2)), depth=empty((0,)),
            color=empty((0, 3)), alpha_base=empty((0,)),
            gaussian_id=torch.zeros(0, dtype=torch.long), source_count=len(cloud))

    p = p_cam[ids]
    x, y, z = p.unbind(-1)
    fx, fy = camera.fx, camera.fy
    u = fx * x / z + camera.cx
    v = fy * y / z + camera.cy
    mean2d = torch.stack([u, v], dim=-1)

    # Jacobian of (x, y, z) -> (fx x / z, fy y / z) at the center.
    zero = torch.zeros_like(z)
    J = torch.stack([
        torch.stack([fx / z, zero, -fx * x / (z * z)], dim=-1),
        torch.stack([zero, fy / z, -fy * y / (z * z)], dim=-1),
    ], dim=-2)  # (M, 2, 3)

    sigma = build_covariance(cloud.rotations[ids], cloud.log_scales[ids])
    sigma_cam = R_wc @ sigma @ R_wc.T
    cov2d = J @ sigma_cam @ J.transpose(-1, -2)
    cov2d = cov2d + config.dilation * torch.eye(2, dtype=dtype)

    view_dir = torch.nn.functional.normalize(
        cloud.positions[ids] - camera.center.to(dtype), dim=-1)
    color = eval_sh(cloud.sh_coeffs[ids], view_dir, cloud.sh_degree)
    alpha_base = torch.sigmoid(cloud.opacity_logits[ids]).squeeze(-1)

    # Degenerate (non-invertible) footprints are skipped here, not rendered.
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    good = det > 0
    if not bool(good.all()):
        sel = torch.nonzero(good, as_tuple=False).squeeze(1)
        mean2d, cov2d, z, color, alpha_base, ids = (
            mean2d[sel], cov2d[sel], z[sel], color[sel], alpha_base[sel], ids[sel])

    return ProjectedGaussians(mean2d=mean2d, cov2d=cov2d, depth=z, color=color,
                              alpha_base=alpha_base, gaussian_id=ids,
                              source_count=len(cloud))


def _depth_order(proj: ProjectedGaussians) -> np.ndarray:
    """Front-to-back order, ties broken by gaussian_id (stable, deterministic)."""
    depth = proj.depth.detach().cpu().numpy().astype(np.float64)
    gid = proj.gaussian_id.cpu().numpy()
    return np.lexsort((gid, depth))


def _alpha_from_parts(a, b, c, det, base, du, dv, config: RasterConfig) -> Tensor:
    """Shared elementwise alpha evaluation (broadcastable parts).

    a = min(o * exp(-q/2), alpha_max), truncated to zero outside the support
    ellipse (q > support_sigmas^2) and below alpha_cutoff. Both renderers
    route through this function so their per-contributor alphas are bitwise
    identical.
    """
    quad = (c * du * du - 2.0 * b * du * dv + a * dv * dv) / det
    alpha = base * torch.exp(-0.5 * quad)
    alpha = torch.clamp(alpha, max=config.alpha_max)
    if math.isfinite(config.support_sigmas):
        alpha = torch.where(quad <= config.support_sigmas ** 2, alpha, 0.0)
    if config.alpha_cutoff > 0:
        alpha = torch.where(alpha >= config.alpha_cutoff, alpha, 0.0)
    return alpha


def _blend(alpha: Tensor, color: Tensor, depth: Tensor, config: RasterConfig,
           background: Tensor):
    """Front-to-back compositing of a batched alpha matrix (B, G, P) against
    per-contributor color (B, G, 3) and depth (B, G).

    Weighted reductions run in float64 (batched matmul) so reduction order
    cannot move results past the oracle-equivalence tolerance.
    """
    dtype = alpha.dtype
    one_minus = 1.0 - alpha
    trans = torch.cumprod(one_minus, dim=1)
    t_excl = torch.cat([torch.ones_like(alpha[:, :1]), trans[:, :-1]], dim=1)
    if config.stop_transmittance > 0:
        # Transmittance is monotone, so the live set is a per-pixel prefix;
        # the leftover light is the running product at the last live slot.
        live = t_excl >= config.stop_transmittance
        weights = torch.where(live, alpha * t_excl, 0.0)
        last_live = live.sum(dim=1).clamp(min=1) - 1
        t_final = trans.gather(1, last_live.unsqueeze(1)).squeeze(1)
    else:
        weights = alpha * t_excl
        t_final = trans[:, -1]

    # (B, G, 5): color, depth, and a ones column for accumulated alpha.
    rhs = torch.cat([color, depth.unsqueeze(-1), torch.ones_like(depth.unsqueeze(-1))],
                    dim=-1).double()
    sums = torch.bmm(weights.double().transpose(1, 2), rhs)  # (B, P, 5)
    color_px = (sums[..., 0:3] + t_final.double().unsqueeze(-1) * background.double()).to(dtype)
    depth_px = sums[..., 3].to(dtype)
    acc = sums[..., 4].to(dtype)
    contributed = (weights > 0).sum(dim=1).to(torch.int32)
    return color_px, depth_px, acc, contributed


def _bbox_radius(proj: ProjectedGaussians, config: RasterConfig) -> np.ndarray:
    """Conservative pixel radius covering the truncated footprint per splat."""
    cov = proj.cov2d.detach().cpu().numpy().astype(np.float64)
    a = cov[:, 0, 0]
    b = cov[:, 0, 1]
    c = cov[:, 1, 1]
    mid = 0.5 * (a + c)
    det = a * c - b * b
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    if not math.isfinite(config.support_sigmas):
        return np.full(len(a), np.inf)
    return config.support_sigmas * np.sqrt(np.maximum(lam_max, 0.0)) + 1.0


def _empty_output(camera: Camera, config: RasterConfig, dtype) -> RenderOutput:
    background = torch.tensor(config.background, dtype=dtype)
    return _finish(background.expand(camera.height, camera.width, 3).clone(),
                   torch.zeros(camera.height, camera.width, dtype=dtype),
                   torch.zeros(camera.height, camera.width, dtype=dtype),
                   torch.zeros(camera.height, camera.width, dtype=torch.int32))


def _tile_table(proj: ProjectedGaussians, camera: Camera, config: RasterConfig):
    """Padded per-tile contributor table.

    Returns (index [T, G] long, valid [T, G] bool) with contributors in
    front-to-back order per tile; pad slots point at splat 0 and are masked.
    """
    order = _depth_order(proj)
    mean = proj.mean2d.detach().cpu().numpy()[order]
    radius = _bbox_radius(proj, config)[order]

    ts = config.tile_size
    tiles_x = (camera.width + ts - 1) // ts
    tiles_y = (camera.height + ts - 1) // ts
    n_tiles = tiles_x * tiles_y

    x0 = np.clip(np.floor((mean[:, 0] - radius) / ts), 0, tiles_x - 1).astype(np.int64)
    x1 = np.clip(np.floor((mean[:, 0] + radius) / ts), 0, tiles_x - 1).astype(np.int64)
    y0 = np.clip(np.floor((mean[:, 1] - radius) / ts), 0, tiles_y - 1).astype(np.int64)
    y1 = np.clip(np.floor((mean[:, 1] + radius) / ts), 0, tiles_y - 1).astype(np.int64)
    offscreen = ((mean[:, 0] + radius < 0) | (mean[:, 0] - radius > camera.width - 1)
                 | (mean[:, 1] + radius < 0) | (mean[:, 1] - radius > camera.height - 1))

    spans_x = x1 - x0 + 1
    counts = np.where(offscreen, 0, spans_x * (y1 - y0 + 1))
    total = int(counts.sum())
    if total == 0:
        return None

    pair_rank = np.repeat(np.arange(len(mean)), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)])[:-1]
    local = np.arange(total) - np.repeat(offsets, counts)
    sx = np.repeat(spans_x, counts)
    tile_x = np.repeat(x0, counts) + local % sx
    tile_y = np.repeat(y0, counts) + local // sx
    tile_id = tile_y * tiles_x + tile_x

    grouped = np.argsort(tile_id, kind="stable")  # preserves depth order per tile
    tile_id = tile_id[grouped]
    pair_rank = pair_rank[grouped]

    tile_counts = np.bincount(tile_id, minlength=n_tiles)
    g_max = int(tile_counts.max())
    starts = np.concatenate([[0], np.cumsum(tile_counts)])[:-1]
    slot = np.arange(total) - starts[tile_id]

    index = np.zeros((n_tiles, g_max), dtype=np.int64)
    valid = np.zeros((n_tiles, g_max), dtype=bool)
    index[tile_id, slot] = order[pair_rank]
    valid[tile_id, slot] = True
    return torch.from_numpy(index), torch.from_numpy(valid), tiles_x, tiles_y


def render(projected: ProjectedGaussians, camera: Camera,
           config: RasterConfig = RasterConfig()) -> RenderOutput:
    """Tile-based forward rendering of color and depth.

    Contributors are gathered per tile via conservative screen bounding boxes
    (all tiles blended as one padded batch), composited front-to-back, and the
    remaining transmittance multiplies the background into the color image.
    Output pixel values are independent of the input list order.
    """
    dtype = projected.mean2d.dtype if len(projected) else torch.float32
    if len(projected) == 0:
        return _empty_output(camera, config, dtype)
    table = _tile_table(projected, camera, config)
    if table is None:
        return _empty_output(camera, config, dtype)
    index, valid, tiles_x, tiles_y = table
    ts = config.tile_size
    H, W = camera.height, camera.width
    background = torch.tensor(config.background, dtype=dtype)

    flat = index.reshape(-1)
    cov = projected.cov2d
    a = cov[:, 0, 0][flat].reshape(index.shape)
    b = cov[:, 0, 1][flat].reshape(index.shape)
    c = cov[:, 1, 1][flat].reshape(index.shape)
    det = (cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0])[flat].reshape(index.shape)
    base = projected.alpha_base[flat].reshape(index.shape)
    mean = projected.mean2d[flat].reshape(*index.shape, 2)
    color = projected.color[flat].reshape(*index.shape, 3)
    depth = projected.depth[flat].reshape(index.shape)

    # Pixel coordinates per tile, padded to the tile grid.
    tys = torch.arange(tiles_y)
    txs = torch.arange(tiles_x)
    within = torch.arange(ts, dtype=dtype)
    px_x = (txs.reshape(-1, 1) * ts + within).to(dtype)          # (tiles_x, ts)
    px_y = (tys.reshape(-1, 1) * ts + within).to(dtype)          # (tiles_y, ts)
    # (T, P) pixel coordinates with P = ts*ts, row-major within the tile.
    xx = px_x[None, :, None, :].expand(tiles_y, tiles_x, ts, ts)
    yy = px_y[:, None, :, None].expand(tiles_y, tiles_x, ts, ts)
    px = torch.stack([xx, yy], dim=-1).reshape(tiles_y * tiles_x, ts * ts, 2)

    du = px[:, None, :, 0] - mean[..., 0:1]
    dv = px[:, None, :, 1] - mean[..., 1:2]
    alpha = _alpha_from_parts(a.unsqueeze(-1), b.unsqueeze(-1), c.unsqueeze(-1),
                              det.unsqueeze(-1), base.unsqueeze(-1), du, dv, config)
    alpha = torch.where(valid.unsqueeze(-1), alpha, 0.0)

    color_px, depth_px, acc, contributed = _blend(alpha, color, depth, config, background)

    def untile(t, channels=None):
        shape = (tiles_y, tiles_x, ts, ts) + ((channels,) if channels else ())
        img = t.reshape(shape)
        img = img.permute(0, 2, 1, 3, 4) if channels else img.permute(0, 2, 1, 3)
        full = img.reshape((tiles_y * ts, tiles_x * ts) + ((channels,) if channels else ()))
        return full[:H, :W]

    return _finish(untile(color_px, 3), untile(depth_px), untile(acc),
                   untile(contributed))


def render_oracle(projected: ProjectedGaussians, camera: Camera,
                  config: RasterConfig = RasterConfig()) -> RenderOutput:
    """Reference renderer: every splat against every pixel, globally depth
    sorted, no tiles, no early stop. Same contract as `render`."""
    config = replace(config, stop_transmittance=0.0)
    dtype = projected.mean2d.dtype if len(projected) else torch.float32
    H, W = camera.height, camera.width
    if len(projected) == 0:
        return _empty_output(camera, config, dtype)
    background = torch.tensor(config.background, dtype=dtype)

    sel = torch.from_numpy(_depth_order(projected).copy())
    ys, xs = torch.meshgrid(torch.arange(H, dtype=dtype),
                            torch.arange(W, dtype=dtype), indexing="ij")
    px = torch.stack([xs, ys], dim=-1).reshape(-1, 2)
    alpha = _oracle_alpha(projected, sel, px, config)
    color_px, depth_px, acc, contributed = _blend(
        alpha.unsqueeze(0), projected.color[sel].unsqueeze(0),
        projected.depth[sel].unsqueeze(0), config, background)
    return _finish(color_px.reshape(H, W, 3), depth_px.reshape(H, W),
                   acc.reshape(H, W), contributed.reshape(H, W))


def _oracle_alpha(proj: ProjectedGaussians, sel: Tensor, px: Tensor,
                  config: RasterConfig) -> Tensor:
    """(contributors, pixels) alpha matrix for contributors `sel` at `px`."""
    cov = proj.cov2d[sel]
    a = cov[:, 0, 0].unsqueeze(-1)
    b = cov[:, 0, 1].unsqueeze(-1)
    c = cov[:, 1, 1].unsqueeze(-1)
    det = (cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]).unsqueeze(-1)
    base = proj.alpha_base[sel].unsqueeze(-1)
    mean = proj.mean2d[sel]
    du = px[None, :, 0] - mean[:, 0:1]
    dv = px[None, :, 1] - mean[:, 1:2]
    return _alpha_from_parts(a, b, c, det, base, du, dv, config)


def _finish(color, depth, alpha, contributors) -> RenderOutput:
    normalized = depth / torch.clamp(alpha, min=1e-8)
    return RenderOutput(color=color, depth=depth, alpha=alpha,
                        depth_normalized=normalized, contributors=contributors.contiguous())


def blending_weights(projected: ProjectedGaussians, camera: Camera,
                     config: RasterConfig, pixel: tuple[int, int]):
    """Introspection for one pixel: (weights, exclusive transmittance,
    gaussian ids) of the front-to-back contributor walk. Test/diagnostic aid."""
    sel = torch.from_numpy(_depth_order(projected).copy())
    px = torch.tensor([[float(pixel[0]), float(pixel[1])]],
                      dtype=projected.mean2d.dtype)
    alpha = _oracle_alpha(projected, sel, px, config)[:, 0]
    one_minus = 1.0 - alpha
    trans = torch.cumprod(one_minus, dim=0)
    t_excl = torch.cat([torch.ones_like(alpha[:1]), trans[:-1]], dim=0)
    if config.stop_transmittance > 0:
        live = t_excl >= config.stop_transmittance
        weights = torch.where(live, alpha * t_excl, 0.0)
    else:
        weights = alpha * t_excl
    return weights, t_excl, projected.gaussian_id[sel]


@dataclass
class CloudGradients:
    positions: Tensor
    rotations: Tensor
    log_scales: Tensor
    opacity_logits: Tensor
    sh_coeffs: Tensor


def render_backward(output: RenderOutput, cloud: GaussianCloud,
                    grad_color: Tensor | None = None,
                    grad_depth: Tensor | None = None,
                    retain_graph: bool = False) -> CloudGradients:
    """Pull upstream image gradients back to every cloud attribute.

    The forward graph retained inside `output` is re-walked; splats that were
    culled or never blended receive exact zeros. Gradients of the sort /
    culling / tile-assignment decisions are zero by construction
    (piecewise-constant). Raises if `output` carries no graph for the cloud.
    """
    attrs = cloud.attribute_tensors()
    for name, t in attrs.items():
        if not t.requires_grad:
            raise ValueError(f"cloud.{name} does not require grad; was the forward "
                             "pass run with gradients enabled on this cloud?")
    outputs, grads = [], []
    if grad_color is not None:
        outputs.append(output.color)
        grads.append(grad_color)
    if grad_depth is not None:
        outputs.append(output.depth)
        grads.append(grad_depth)
    if not outputs:
        raise ValueError("at least one of grad_color / grad_depth is required")
    if not any(o.requires_grad for o in outputs):
        raise ValueError("render output carries no autograd state for this cloud")
    result = torch.autograd.grad(outputs, list(attrs.values()), grads,
                                 allow_unused=True, retain_graph=retain_graph,
                                 materialize_grads=True)
    return CloudGradients(**dict(zip(attrs.keys(), result)))
