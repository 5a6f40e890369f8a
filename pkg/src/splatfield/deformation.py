"""Spatio-temporal deformation field: a factorized encoding voxel plus tiny
MLP decoder heads that track per-Gaussian attribute shifts over time.

The 4D feature volume is decomposed into six 2D planes over the axis pairs
{XY*ZT, XZ*YT, YZ*XT}; a query bilinearly interpolates each plane, combines
the three pair products channel-wise with mixing vectors, and concatenates
across resolution levels. Decoder output layers are zero-initialized, so the
field is exactly the identity at the start of training.

An MLP-over-(position, time) encoder with positional encoding is provided as
the ablation baseline for the factorized voxel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field

import torch
from torch import Tensor, nn

from .core import GaussianCloud

PLANE_NAMES = ("xy", "xz", "yz", "xt", "yt", "zt")
# Coordinate index pairs for each plane; 3 = time.
PLANE_AXES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
# Pair products combined by the mixing vectors: spatial plane x complementary time plane.
PLANE_PAIRS = ((0, 5), (1, 4), (2, 3))


@dataclass
class HexPlaneConfig:
    spatial_resolution: int = 32
    time_resolution: int = 16
    channels: int = 16
    levels: int = 2
    level_scale: int = 2
    bounds_min: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    bounds_max: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def feature_dim(self) -> int:
        return self.channels * self.levels

    def level_resolutions(self, level: int) -> tuple[int, int]:
        f = self.level_scale ** level
        return self.spatial_resolution * f, self.time_resolution * f


def hexplane_param_counts(config: HexPlaneConfig) -> dict[str, int]:
    """Closed-form parameter count of the decomposition.

    Six planes per level (three spatial-spatial, three spatial-time) plus the
    three channel mixing vectors; the O(N^2) footprint of the factorization.
    """
    spatial = 0
    spatiotemporal = 0
    for level in range(config.levels):
        rs, rt = config.level_resolutions(level)
        spatial += 3 * rs * rs * config.channels
        spatiotemporal += 3 * rs * rt * config.channels
    vectors = 3 * config.channels
    return {
        "spatial_planes": spatial,
        "spatiotemporal_planes": spatiotemporal,
        "mixing_vectors": vectors,
        "total": spatial + spatiotemporal + vectors,
    }


def _bilinear(plane: Tensor, a01: Tensor, b01: Tensor) -> Tensor:
    """Bilinear sample of a (D, Ra, Rb) grid at normalized coords in [0, 1].

    Grid nodes sit at the endpoints (a query of exactly 0 or 1 returns the
    stored node features). Returns (N, D).
    """
    _, ra, rb = plane.shape
    ua = a01 * (ra - 1)
    ub = b01 * (rb - 1)
    ia = ua.floor().long().clamp(0, max(ra - 2, 0))
    ib = ub.floor().long().clamp(0, max(rb - 2, 0))
    fa = (ua - ia).clamp(0.0, 1.0).unsqueeze(0)
    fb = (ub - ib).clamp(0.0, 1.0).unsqueeze(0)
    ia1 = (ia + 1).clamp(max=ra - 1)
    ib1 = (ib + 1).clamp(max=rb - 1)
    v00 = plane[:, ia, ib]
    v10 = plane[:, ia1, ib]
    v01 = plane[:, ia, ib1]
    v11 = plane[:, ia1, ib1]
    out = (v00 * (1 - fa) * (1 - fb) + v10 * fa * (1 - fb)
           + v01 * (1 - fa) * fb + v11 * fa * fb)
    return out.transpose(0, 1)


class HexPlaneField(nn.Module):
    """Multi-resolution factorized 4D encoding voxel."""

    def __init__(self, config: HexPlaneConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        if generator is None:
            generator = torch.Generator().manual_seed(0)
        self.planes = nn.ModuleList()
        for level in range(config.levels):
            rs, rt = config.level_resolutions(level)
            level_planes = nn.ParameterDict()
            for name, (ax_a, ax_b) in zip(PLANE_NAMES, PLANE_AXES):
                shape = (config.channels,
                         rs if ax_a < 3 else rt,
                         rs if ax_b < 3 else rt)
                if ax_b == 3:
                    # Time-bearing planes start constant: zero temporal
                    # variation at initialization.
                    init = torch.ones(shape)
                else:
                    init = 1.0 + 0.1 * torch.randn(shape, generator=generator)
                level_planes[name] = nn.Parameter(init)
            self.planes.append(level_planes)
        self.mixing_vectors = nn.Parameter(torch.ones(3, config.channels))
        self.register_buffer("bounds_min", torch.tensor(config.bounds_min, dtype=torch.float32))
        self.register_buffer("bounds_max", torch.tensor(config.bounds_max, dtype=torch.float32))
        self.time_clamp_events = 0  # diagnostic: queries with t outside [0, 1]

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def set_bounds(self, bounds_min, bounds_max):
        with torch.no_grad():
            self.bounds_min.copy_(torch.as_tensor(bounds_min, dtype=self.bounds_min.dtype))
            self.bounds_max.copy_(torch.as_tensor(bounds_max, dtype=self.bounds_max.dtype))

    def set_bounds_from_points(self, points: Tensor, expand: float = 0.1):
        """Axis-aligned box of `points`, expanded by `expand` of the extent per side."""
        lo = points.min(dim=0).values
        hi = points.max(dim=0).values
        extent = (hi - lo).clamp_min(1e-6)
        self.set_bounds(lo - expand * extent, hi + expand * extent)

    def query(self, positions: Tensor, t) -> Tensor:
        """Latent features for world positions at time t: (N, 3) -> (N, feature_dim).

        Positions outside the box are clamped to its surface; t is clamped to
        [0, 1] with a diagnostic counter.
        """
        n = positions.shape[0]
        dtype = positions.dtype
        lo = self.bounds_min.to(dtype)
        hi = self.bounds_max.to(dtype)
        coords01 = ((positions - lo) / (hi - lo)).clamp(0.0, 1.0)
        if not torch.is_tensor(t):
            t = torch.tensor(float(t), dtype=dtype)
        t = t.to(dtype).expand(n) if t.ndim == 0 else t.to(dtype)
        out_of_range = int((t < 0).sum() + (t > 1).sum())
        if out_of_range:
            self.time_clamp_events += out_of_range
        coords = torch.cat([coords01, t.clamp(0.0, 1.0).unsqueeze(-1)], dim=-1)

        features = []
        for level_planes in self.planes:
            sampled = []
            for name, (ax_a, ax_b) in zip(PLANE_NAMES, PLANE_AXES):
                plane = level_planes[name]
                sampled.append(_bilinear(plane.to(dtype), coords[:, ax_a], coords[:, ax_b]))
            v = self.mixing_vectors.to(dtype)
            f_level = sum(v[i] * sampled[a] * sampled[b]
                          for i, (a, b) in enumerate(PLANE_PAIRS))
            features.append(f_level)
        return torch.cat(features, dim=-1)

    def time_planes(self) -> list[Tensor]:
        """The time-bearing planes (XT, YT, ZT) of every level, time axis last."""
        return [level[name] for level in self.planes for name in ("xt", "yt", "zt")]

    def parameter_counts(self) -> dict[str, int]:
        counts = hexplane_param_counts(self.config)
        actual = sum(p.numel() for p in self.parameters())
        assert actual == counts["total"], (actual, counts)
        return counts


def _reinit_linear(linear: nn.Linear, generator: torch.Generator):
    """Default torch init resampled from an explicit generator (determinism)."""
    fan_in = linear.in_features
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        linear.weight.uniform_(-bound, bound, generator=generator)
        if linear.bias is not None:
            linear.bias.uniform_(-bound, bound, generator=generator)


@dataclass
class DecoderConfig:
    hidden_width: int = 64
    use_trunk: bool = True


HEAD_DIMS = {"position": 3, "rotation": 4, "scale": 3, "opacity": 1}


class DeformationDecoders(nn.Module):
    """Four tiny MLP heads mapping a latent feature to attribute deltas.

    Output layers are zero-initialized: every delta is exactly zero until the
    optimizer moves them.
    """

    def __init__(self, feature_dim: int, config: DecoderConfig | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.config = config = config or DecoderConfig()
        self.feature_dim = feature_dim
        if generator is None:
            generator = torch.Generator().manual_seed(0)
        w = config.hidden_width
        if config.use_trunk:
            self.trunk = nn.Linear(feature_dim, w)
            _reinit_linear(self.trunk, generator)
            head_in = w
        else:
            self.trunk = None
            head_in = feature_dim
        self.heads = nn.ModuleDict()
        for name, out_dim in HEAD_DIMS.items():
            hidden = nn.Linear(head_in, w)
            final = nn.Linear(w, out_dim)
            _reinit_linear(hidden, generator)
            nn.init.zeros_(final.weight)
            nn.init.zeros_(final.bias)
            self.heads[name] = nn.Sequential(nn.ReLU(), hidden, nn.ReLU(), final)

    def forward(self, features: Tensor) -> dict[str, Tensor]:
        if features.shape[-1] != self.feature_dim:
            raise ValueError(
                f"feature dim {features.shape[-1]} != decoder input {self.feature_dim}")
        x = self.trunk(features) if self.trunk is not None else features
        return {name: head(x) for name, head in self.heads.items()}


@dataclass
class MLPEncoderConfig:
    width: int = 128
    depth: int = 3          # hidden layers
    out_dim: int = 32       # latent feature size fed to the decoders
    freq_spatial: int = 6
    freq_time: int = 4

    @property
    def input_dim(self) -> int:
        return 3 + 3 * 2 * self.freq_spatial + 1 + 2 * self.freq_time

    def param_count(self) -> int:
        dims = [self.input_dim] + [self.width] * self.depth + [self.out_dim]
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


def matched_mlp_width(target_params: int, config: MLPEncoderConfig) -> int:
    """Width making the encoder's parameter count approach `target_params`."""
    i, d, o = config.input_dim, config.depth, config.out_dim
    # params(w) = (d-1) w^2 + (i + d + o + 1) w + o
    a = max(d - 1, 1)
    b = i + d + o + 1
    c = o - target_params
    w = (-b + math.sqrt(b * b - 4 * a * c)) / (2 * a)
    return max(8, int(round(w)))


class PositionalMLPEncoder(nn.Module):
    """Ablation encoder: sinusoidal positional encoding of (position, time)
    pushed through a plain MLP. No spatio-temporal factorization prior."""

    def __init__(self, config: MLPEncoderConfig | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.config = config = config or MLPEncoderConfig()
        if generator is None:
            generator = torch.Generator().manual_seed(0)
        dims = [config.input_dim] + [config.width] * config.depth
        layers = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            lin = nn.Linear(d_in, d_out)
            _reinit_linear(lin, generator)
            layers += [lin, nn.ReLU()]
        out = nn.Linear(config.width, config.out_dim)
        _reinit_linear(out, generator)
        layers.append(out)
        self.net = nn.Sequential(*layers)

    @property
    def feature_dim(self) -> int:
        return self.config.out_dim

    def query(self, positions: Tensor, t) -> Tensor:
        n = positions.shape[0]
        dtype = positions.dtype
        if not torch.is_tensor(t):
            t = torch.tensor(float(t), dtype=dtype)
        t = t.to(dtype).expand(n) if t.ndim == 0 else t.to(dtype)
        enc = [positions, t.unsqueeze(-1)]
        for k in range(self.config.freq_spatial):
            enc += [torch.sin(2.0 ** k * math.pi * positions),
                    torch.cos(2.0 ** k * math.pi * positions)]
        for k in range(self.config.freq_time):
            enc += [torch.sin(2.0 ** k * math.pi * t).unsqueeze(-1),
                    torch.cos(2.0 ** k * math.pi * t).unsqueeze(-1)]
        x = torch.cat(enc, dim=-1)
        dtype_net = next(self.net.parameters()).dtype
        return self.net(x.to(dtype_net)).to(dtype)

    def parameter_counts(self) -> dict[str, int]:
        total = sum(p.numel() for p in self.parameters())
        assert total == self.config.param_count()
        return {"mlp_encoder": total, "total": total}


class DeformationModel(nn.Module):
    """Encoder (factorized voxel or MLP baseline) plus the shared decoders."""

    def __init__(self, encoder: nn.Module, decoders: DeformationDecoders):
        super().__init__()
        if encoder.feature_dim != decoders.feature_dim:
            raise ValueError("encoder/decoder feature dims differ")
        self.encoder = encoder
        self.decoders = decoders

    @staticmethod
    def hexplane(config: HexPlaneConfig | None = None,
                 decoder_config: DecoderConfig | None = None,
                 seed: int = 0) -> "DeformationModel":
        g = torch.Generator().manual_seed(seed)
        encoder = HexPlaneField(config or HexPlaneConfig(), generator=g)
        decoders = DeformationDecoders(encoder.feature_dim,
                                       decoder_config or DecoderConfig(), generator=g)
        return DeformationModel(encoder, decoders)

    @staticmethod
    def mlp_baseline(config: MLPEncoderConfig | None = None,
                     decoder_config: DecoderConfig | None = None,
                     seed: int = 0) -> "DeformationModel":
        g = torch.Generator().manual_seed(seed)
        encoder = PositionalMLPEncoder(config or MLPEncoderConfig(), generator=g)
        decoders = DeformationDecoders(encoder.feature_dim,
                                       decoder_config or DecoderConfig(), generator=g)
        return DeformationModel(encoder, decoders)

    @property
    def is_factorized(self) -> bool:
        return isinstance(self.encoder, HexPlaneField)

    def deltas(self, positions: Tensor, t) -> dict[str, Tensor]:
        return self.decoders(self.encoder.query(positions, t))

    def deform(self, cloud: GaussianCloud, t) -> GaussianCloud:
        """Deformed copy of the cloud at time t: attribute shifts are added in
        the stored (pre-activation) spaces; SH coefficients are not deformed.

        Rotation deltas are applied in quaternion space; normalization happens
        where the quaternion is consumed, so zero deltas reproduce the
        canonical cloud bit-for-bit.
        """
        d = self.deltas(cloud.positions, t)
        return GaussianCloud(
            positions=cloud.positions + d["position"],
            rotations=cloud.rotations + d["rotation"],
            log_scales=cloud.log_scales + d["scale"],
            opacity_logits=cloud.opacity_logits + d["opacity"],
            sh_coeffs=cloud.sh_coeffs,
        )

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


# Functional surfaces -------------------------------------------------------

def query_voxel(field: HexPlaneField, positions: Tensor, t) -> Tensor:
    return field.query(positions, t)


def decode(decoders: DeformationDecoders, features: Tensor):
    d = decoders(features)
    return d["position"], d["rotation"], d["scale"], d["opacity"]


def deform(cloud: GaussianCloud, model: DeformationModel, t) -> GaussianCloud:
    return model.deform(cloud, t)


def deform_mlp_baseline(cloud: GaussianCloud, model: DeformationModel, t) -> GaussianCloud:
    if model.is_factorized:
        raise ValueError("expected an MLP-baseline model")
    return model.deform(cloud, t)


def deformation_backward(deformed: GaussianCloud, cloud: GaussianCloud,
                         model: DeformationModel,
                         upstream: dict[str, Tensor],
                         retain_graph: bool = False):
    """Chain-rule gradients from deformed-attribute upstream gradients back to
    the canonical cloud attributes and every deformation parameter.

    Returns (cloud attribute grads dict, model parameter grads dict); entries
    untouched by the forward pass are exact zeros.
    """
    attrs = deformed.attribute_tensors()
    outputs, grads = [], []
    for name, g in upstream.items():
        outputs.append(attrs[name])
        grads.append(g)
    if not outputs:
        raise ValueError("no upstream gradients supplied")
    inputs = list(cloud.attribute_tensors().values()) + list(model.parameters())
    result = torch.autograd.grad(outputs, inputs, grads, allow_unused=True,
                                 materialize_grads=True, retain_graph=retain_graph)
    names = list(cloud.attribute_tensors().keys())
    cloud_grads = dict(zip(names, result[:len(names)]))
    param_grads = {n: g for (n, _), g in zip(model.named_parameters(), result[len(names):])}
    return cloud_grads, param_grads
