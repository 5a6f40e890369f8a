"""Scene representation primitives: Gaussian cloud, camera model, spherical
harmonics, and the closed-form geometry shared by every other module.

All functions are pure and dtype-polymorphic: the computation dtype follows
the input tensors, so the same code runs in float32 for training and float64
for gradient-check tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
from torch import Tensor

# Real spherical harmonics constants, bands 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_SH_DEGREE = 3


def sh_band_count(degree: int) -> int:
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ValueError(f"SH degree must be in 0..{MAX_SH_DEGREE}, got {degree}")
    return (degree + 1) ** 2


def inverse_sigmoid(x: Tensor) -> Tensor:
    return torch.log(x / (1.0 - x))


@dataclass
class GaussianCloud:
    """Optimizable per-Gaussian attributes.

    Scales and opacities are stored pre-activation (log / logit) so that
    unconstrained optimization keeps them valid by construction; quaternions
    are stored raw and normalized on use.
    """

    positions: Tensor      # (N, 3) world-space means
    rotations: Tensor      # (N, 4) quaternions (w, x, y, z), raw storage
    log_scales: Tensor     # (N, 3) per-axis log scale
    opacity_logits: Tensor  # (N, 1)
    sh_coeffs: Tensor      # (N, B, 3), B = (degree + 1)^2

    def __post_init__(self):
        n = self.positions.shape[0]
        if n < 1:
            raise ValueError("GaussianCloud needs at least one Gaussian")
        if self.positions.shape != (n, 3):
            raise ValueError(f"positions must be (N, 3), got {tuple(self.positions.shape)}")
        if self.rotations.shape != (n, 4):
            raise ValueError(f"rotations must be (N, 4), got {tuple(self.rotations.shape)}")
        if self.log_scales.shape != (n, 3):
            raise ValueError(f"log_scales must be (N, 3), got {tuple(self.log_scales.shape)}")
        if self.opacity_logits.shape != (n, 1):
            raise ValueError(f"opacity_logits must be (N, 1), got {tuple(self.opacity_logits.shape)}")
        if self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[0] != n or self.sh_coeffs.shape[2] != 3:
            raise ValueError(f"sh_coeffs must be (N, B, 3), got {tuple(self.sh_coeffs.shape)}")
        bands = self.sh_coeffs.shape[1]
        if bands not in {sh_band_count(d) for d in range(MAX_SH_DEGREE + 1)}:
            raise ValueError(f"sh_coeffs band count {bands} is not (L+1)^2 for L in 0..{MAX_SH_DEGREE}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(math.sqrt(self.sh_coeffs.shape[1]))) - 1

    @property
    def scales(self) -> Tensor:
        return torch.exp(self.log_scales)

    @property
    def opacities(self) -> Tensor:
        return torch.sigmoid(self.opacity_logits)

    @property
    def unit_rotations(self) -> Tensor:
        return torch.nn.functional.normalize(self.rotations, dim=-1)

    def attribute_tensors(self) -> dict[str, Tensor]:
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "sh_coeffs": self.sh_coeffs,
        }

    def detach_clone(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.detach().clone() for k, v in self.attribute_tensors().items()})

    def to(self, dtype: torch.dtype) -> "GaussianCloud":
        return GaussianCloud(**{k: v.to(dtype) for k, v in self.attribute_tensors().items()})

    def requires_grad_(self, flag: bool = True) -> "GaussianCloud":
        for t in self.attribute_tensors().values():
            t.requires_grad_(flag)
        return self

    def renormalize_rotations_(self):
        """Project stored quaternions back to unit length (post-step hygiene)."""
        with torch.no_grad():
            self.rotations /= self.rotations.norm(dim=-1, keepdim=True).clamp_min(1e-12)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics K, rigid camera-to-world transform T."""

    K: Tensor          # (3, 3)
    T: Tensor          # (4, 4) camera-to-world
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        if self.K.shape != (3, 3) or self.T.shape != (4, 4):
            raise ValueError("K must be 3x3 and T must be 4x4")
        if float(self.K[0, 0]) <= 0 or float(self.K[1, 1]) <= 0:
            raise ValueError("focal lengths must be positive")
        if not self.near < self.far:
            raise ValueError("need near < far")
        R = self.T[:3, :3].double()
        if not torch.allclose(R @ R.T, torch.eye(3, dtype=torch.float64), atol=1e-5):
            raise ValueError("T rotation block is not orthonormal")
        if float(torch.linalg.det(R)) < 0:
            raise ValueError("T rotation block must have det +1")

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    def world_to_camera(self, dtype: torch.dtype | None = None) -> Tensor:
        """Inverse of T: W maps world points into the camera frame."""
        T = self.T if dtype is None else self.T.to(dtype)
        R = T[:3, :3]
        t = T[:3, 3]
        W = torch.eye(4, dtype=T.dtype)
        W[:3, :3] = R.T
        W[:3, 3] = -R.T @ t
        return W

    @property
    def center(self) -> Tensor:
        """Camera origin in world coordinates."""
        return self.T[:3, 3]

    def to(self, dtype: torch.dtype) -> "Camera":
        return replace(self, K=self.K.to(dtype), T=self.T.to(dtype))

    @staticmethod
    def identity(width: int, height: int, focal: float, near: float = 0.01,
                 far: float = 100.0, dtype: torch.dtype = torch.float32) -> "Camera":
        """Axis-aligned camera at the origin looking down +z, centered principal point."""
        K = torch.tensor(
            [[focal, 0.0, (width - 1) / 2.0],
             [0.0, focal, (height - 1) / 2.0],
             [0.0, 0.0, 1.0]], dtype=dtype)
        return Camera(K=K, T=torch.eye(4, dtype=dtype), width=width, height=height,
                      near=near, far=far)


def quaternion_to_rotation(q: Tensor) -> Tensor:
    """(..., 4) quaternion (w, x, y, z) -> (..., 3, 3) rotation matrix.

    Input is normalized first, so raw stored quaternions are accepted.
    """
    q = torch.nn.functional.normalize(q, dim=-1)
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def quaternion_multiply(q1: Tensor, q2: Tensor) -> Tensor:
    w1, x1, y1, z1 = q1.unbind(-1)
    w2, x2, y2, z2 = q2.unbind(-1)
    return torch.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], dim=-1)


def build_covariance(q: Tensor, log_scale: Tensor) -> Tensor:
    """World-space covariance from rotation + per-axis scale: R S S^T R^T.

    Symmetric positive-definite by construction; eigenvalues are
    exp(log_scale)^2 up to rotation. Accepts (4,)/(3,) or batched (N, 4)/(N, 3).
    """
    R = quaternion_to_rotation(q)
    S = torch.exp(log_scale)
    M = R * S.unsqueeze(-2)  # columns of R scaled: R @ diag(S)
    return M @ M.transpose(-1, -2)


def sh_basis(dirs: Tensor, degree: int) -> Tensor:
    """Real SH basis values at unit directions: (..., 3) -> (..., (degree+1)^2)."""
    bands = sh_band_count(degree)
    x, y, z = dirs.unbind(-1)
    out = [torch.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out += [
            SH_C2[0] * xy,
            SH_C2[1] * yz,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * xz,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * xy * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]
    basis = torch.stack(out, dim=-1)
    assert basis.shape[-1] == bands
    return basis


def eval_sh(sh_coeffs: Tensor, view_dir: Tensor, degree: int) -> Tensor:
    """View-dependent RGB from SH coefficients.

    Basis contraction plus the 0.5 shift, clamped at zero so zero coefficients
    give mid-gray. sh_coeffs is (..., B, 3) with B = (degree+1)^2, view_dir is
    a matching (..., 3) batch of unit directions.
    """
    bands = sh_band_count(degree)
    if sh_coeffs.shape[-2] != bands:
        raise ValueError(
            f"sh_coeffs has {sh_coeffs.shape[-2]} bands but degree {degree} needs {bands}")
    basis = sh_basis(view_dir, degree)
    color = (basis.unsqueeze(-1) * sh_coeffs).sum(dim=-2) + 0.5
    return torch.clamp(color, min=0.0)


def rgb_to_band0(rgb: Tensor) -> Tensor:
    """Invert the band-0 color convention: coefficients that render as `rgb`."""
    return (rgb - 0.5) / SH_C0


def gaussian_weight(cov2d: Tensor, dx: Tensor) -> Tensor:
    """exp(-1/2 dx^T cov2d^{-1} dx) for a 2x2 covariance; 1 at dx = 0.

    Batched: cov2d (..., 2, 2) against dx (..., 2).
    """
    a = cov2d[..., 0, 0]
    b = cov2d[..., 0, 1]
    c = cov2d[..., 1, 1]
    det = a * c - b * b
    u, v = dx.unbind(-1)
    quad = (c * u * u - 2.0 * b * u * v + a * v * v) / det
    return torch.exp(-0.5 * quad)
