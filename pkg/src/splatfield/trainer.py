"""End-to-end optimization: Adam over Gaussian attributes and deformation
parameters, canonical warmup followed by joint training, evaluation metrics,
adaptive density control (off by default), and checkpointing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .core import GaussianCloud, build_covariance
from .deformation import DeformationModel
from .initializer import FrameRecord
from .metrics import psnr, ssim
from .objectives import (
    LossReport,
    LossWeights,
    loss_color,
    loss_depth_binocular,
    loss_depth_monocular,
    loss_spatial_tv,
    loss_temporal_tv,
    total_loss,
)
from .rasterizer import RasterConfig, project, render


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    warmup_iters: int = 1000      # canonical-only optimization before the joint phase
    total_iters: int = 4000
    learning_rate: float = 1.6e-3
    position_lr_mult: float = 0.1        # decays exponentially to the final value
    position_lr_final_mult: float = 0.01
    rotation_lr_mult: float = 1.0
    scale_lr_mult: float = 1.0
    opacity_lr_mult: float = 1.0
    sh_lr_mult: float = 1.0
    deformation_lr_mult: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    seed: int = 0
    deterministic: bool = True
    densify_enabled: bool = False
    densify_interval: int = 200
    densify_until: int = 3000
    densify_grad_threshold: float = 1e-4
    densify_scale_fraction: float = 0.05  # of scene extent; splits above, clones below
    prune_opacity: float = 0.005
    eval_interval: int = 0        # 0 = no periodic eval
    checkpoint_interval: int = 0  # 0 = only on demand

    def __post_init__(self):
        if not self.warmup_iters < self.total_iters:
            raise ValueError("need warmup_iters < total_iters")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class EvalFrameResult:
    index: int
    time: float
    psnr: float
    ssim: float
    psnr_unmasked: float
    ssim_unmasked: float


@dataclass
class EvalReport:
    frames: list[EvalFrameResult] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return sum(f.psnr for f in self.frames) / len(self.frames)

    @property
    def mean_ssim(self) -> float:
        return sum(f.ssim for f in self.frames) / len(self.frames)

    @property
    def mean_psnr_unmasked(self) -> float:
        return sum(f.psnr_unmasked for f in self.frames) / len(self.frames)

    @property
    def mean_ssim_unmasked(self) -> float:
        return sum(f.ssim_unmasked for f in self.frames) / len(self.frames)


GROUP_MULT_FIELDS = {
    "positions": "position_lr_mult",
    "rotations": "rotation_lr_mult",
    "log_scales": "scale_lr_mult",
    "opacity_logits": "opacity_lr_mult",
    "sh_coeffs": "sh_lr_mult",
    "deformation": "deformation_lr_mult",
}


def set_deterministic(flag: bool):
    """Fixed-order reductions everywhere; bit-identical reruns for a fixed
    thread count. The fast mode merely skips enforcing the guard."""
    torch.use_deterministic_algorithms(flag)


class Trainer:
    """One-frame-per-step stochastic optimization over the training split."""

    def __init__(self, cloud: GaussianCloud, deformation: DeformationModel,
                 frames_train: list[FrameRecord], frames_test: list[FrameRecord],
                 config: TrainConfig | None = None,
                 raster_config: RasterConfig | None = None,
                 loss_weights: LossWeights | None = None,
                 out_dir: str | Path | None = None,
                 config_hash: int = 0):
        if not frames_train:
            raise ValueError("empty training split")
        self.cfg = config or TrainConfig()
        self.raster_cfg = raster_config or RasterConfig()
        self.weights = loss_weights or LossWeights()
        self.frames_train = frames_train
        self.frames_test = frames_test
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.config_hash = config_hash
        set_deterministic(self.cfg.deterministic)

        self.cloud = cloud.detach_clone().requires_grad_()
        self.deformation = deformation
        self.iteration = 0
        self.log_rows: list[list] = []
        self.eval_rows: list[tuple[int, EvalReport]] = []
        extent = (self.cloud.positions.max(0).values - self.cloud.positions.min(0).values)
        self.scene_extent = float(extent.max().detach())

        self._sampler = torch.Generator().manual_seed(self.cfg.seed)
        self._densify_gen = torch.Generator().manual_seed(self.cfg.seed + 1)
        self._frame_order: list[int] = []
        self._frame_pos = 0
        self._grad_accum = torch.zeros(len(self.cloud))
        self._grad_count = torch.zeros(len(self.cloud))
        self._build_optimizer()

    # -- optimizer ----------------------------------------------------------

    def _group_mult(self, name: str) -> float:
        return getattr(self.cfg, GROUP_MULT_FIELDS[name])

    def _position_mult(self, iteration: int) -> float:
        m0 = self.cfg.position_lr_mult
        m1 = self.cfg.position_lr_final_mult
        frac = min(max(iteration / self.cfg.total_iters, 0.0), 1.0)
        return m0 * (m1 / m0) ** frac

    def _build_optimizer(self):
        base = self.cfg.learning_rate
        groups = []
        attr_groups = [
            ("positions", [self.cloud.positions]),
            ("rotations", [self.cloud.rotations]),
            ("log_scales", [self.cloud.log_scales]),
            ("opacity_logits", [self.cloud.opacity_logits]),
            ("sh_coeffs", [self.cloud.sh_coeffs]),
            ("deformation", list(self.deformation.parameters())),
        ]
        for name, params in attr_groups:
            mult = self._group_mult(name)
            if mult == 0.0:
                continue  # excluded entirely: frozen bitwise
            lr = base * (self._position_mult(self.iteration) if name == "positions" else mult)
            groups.append({"params": params, "lr": lr, "name": name})
        self.optimizer = torch.optim.Adam(
            groups, betas=(self.cfg.adam_beta1, self.cfg.adam_beta2),
            eps=self.cfg.adam_eps)

    def _set_learning_rates(self):
        for group in self.optimizer.param_groups:
            if group["name"] == "positions":
                group["lr"] = self.cfg.learning_rate * self._position_mult(self.iteration)

    # -- stepping -----------------------------------------------------------

    def _next_frame(self) -> FrameRecord:
        if self._frame_pos >= len(self._frame_order):
            perm = torch.randperm(len(self.frames_train), generator=self._sampler)
            self._frame_order = perm.tolist()
            self._frame_pos = 0
        frame = self.frames_train[self._frame_order[self._frame_pos]]
        self._frame_pos += 1
        return frame

    @property
    def in_warmup(self) -> bool:
        return self.iteration < self.cfg.warmup_iters

    def _forward(self, frame: FrameRecord, deformed: bool):
        cloud_t = self.deformation.deform(self.cloud, frame.time) if deformed else self.cloud
        proj = project(cloud_t, frame.camera, self.raster_cfg)
        return render(proj, frame.camera, self.raster_cfg)

    def _losses(self, out, frame: FrameRecord, deformed: bool):
        flags = {}
        if int(frame.mask.sum()) == 0:
            flags["empty_mask"] = True
        lc = loss_color(out.color, frame.image, frame.mask)
        if self.weights.depth_mode == "binocular":
            ld = loss_depth_binocular(out.depth, frame.depth, frame.mask)
        else:
            ld = loss_depth_monocular(out.depth, frame.depth, frame.mask)
        ls = loss_spatial_tv(out.color, out.depth)
        if deformed and self.deformation.is_factorized:
            lt = loss_temporal_tv(self.deformation.encoder)
        else:
            lt = torch.zeros((), dtype=lc.dtype)
        return total_loss(lc, ld, ls, lt, self.weights, flags)

    def train_step(self) -> LossReport:
        """One stochastic step: forward, loss, backward, Adam update.

        During warmup the deformation field is bypassed entirely, so no
        gradient can reach any of its parameters.
        """
        frame = self._next_frame()
        deformed = not self.in_warmup
        out = self._forward(frame, deformed)
        total, report = self._losses(out, frame, deformed)
        if not math.isfinite(report.total):
            self._dump_diverged(report)
            raise TrainingDivergedError(
                f"non-finite loss at iteration {self.iteration}: {report}")
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if self.cfg.densify_enabled and self.cloud.positions.grad is not None:
            with torch.no_grad():
                norms = self.cloud.positions.grad.norm(dim=-1)
                self._grad_accum += norms
                self._grad_count += (norms > 0).to(self._grad_count.dtype)
        self._set_learning_rates()
        self.optimizer.step()
        self.cloud.renormalize_rotations_()
        self.iteration += 1
        self.log_rows.append([self.iteration] + report.as_row())
        if (self.cfg.densify_enabled and not self.in_warmup
                and self.iteration <= self.cfg.densify_until
                and self.iteration % self.cfg.densify_interval == 0):
            self.densify_and_prune()
        return report

    def run(self, iters: int | None = None, progress=None):
        """Advance to `iters` (default: the configured total), with periodic
        evaluation/checkpoints when configured."""
        target = self.cfg.total_iters if iters is None else iters
        while self.iteration < target:
            report = self.train_step()
            if progress is not None:
                progress(self.iteration, report)
            if self.cfg.eval_interval and self.iteration % self.cfg.eval_interval == 0:
                self.eval_rows.append((self.iteration, self.evaluate()))
            if (self.cfg.checkpoint_interval and self.out_dir is not None
                    and self.iteration % self.cfg.checkpoint_interval == 0):
                self.save_checkpoint(self.out_dir / f"iter_{self.iteration:06d}.splf")
        if self.out_dir is not None:
            self.write_log()
        return self

    def _dump_diverged(self, report: LossReport):
        if self.out_dir is not None:
            try:
                self.save_checkpoint(self.out_dir / "diverged.splf")
            except Exception:
                pass

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, frames: list[FrameRecord] | None = None,
                 deformed: bool | None = None) -> EvalReport:
        """PSNR/SSIM on the test split (masked, with unmasked as a secondary
        column). `deformed=False` evaluates the canonical (static) model."""
        frames = self.frames_test if frames is None else frames
        if not frames:
            raise ValueError("empty evaluation split")
        if deformed is None:
            deformed = not self.in_warmup
        report = EvalReport()
        with torch.no_grad():
            for fr in frames:
                out = self._forward(fr, deformed)
                pred = out.color.clamp(0.0, 1.0)
                report.frames.append(EvalFrameResult(
                    index=fr.index, time=fr.time,
                    psnr=psnr(pred, fr.image, fr.mask),
                    ssim=ssim(pred, fr.image, fr.mask),
                    psnr_unmasked=psnr(pred, fr.image),
                    ssim_unmasked=ssim(pred, fr.image),
                ))
        return report

    # -- density control ----------------------------------------------------

    def densify_and_prune(self):
        """Clone small / split large high-gradient Gaussians, prune low
        opacity. Off by default: the dense initialization replaces it, but the
        random-init ablation benefits. Surviving rows keep their Adam moments;
        new rows start from zero moments."""
        with torch.no_grad():
            avg_grad = self._grad_accum / self._grad_count.clamp(min=1.0)
            scales_max = self.cloud.scales.max(dim=-1).values
            limit = self.cfg.densify_scale_fraction * self.scene_extent
            high = avg_grad > self.cfg.densify_grad_threshold
            prune_mask = self.cloud.opacities.squeeze(-1).detach() < self.cfg.prune_opacity
            clone_mask = high & (scales_max <= limit) & ~prune_mask
            split_mask = high & (scales_max > limit) & ~prune_mask
            keep_mask = ~(prune_mask | split_mask)

            attrs = {k: v.detach() for k, v in self.cloud.attribute_tensors().items()}
            keep_idx = torch.nonzero(keep_mask, as_tuple=False).squeeze(1)
            clone_idx = torch.nonzero(clone_mask, as_tuple=False).squeeze(1)
            split_idx = torch.nonzero(split_mask, as_tuple=False).squeeze(1)

            new_parts = {k: [v[keep_idx], v[clone_idx]] for k, v in attrs.items()}
            if split_idx.numel():
                cov = build_covariance(attrs["rotations"][split_idx],
                                       attrs["log_scales"][split_idx])
                chol = torch.linalg.cholesky(cov + 1e-10 * torch.eye(3, dtype=cov.dtype))
                for _ in range(2):
                    eps = torch.randn(split_idx.numel(), 3, generator=self._densify_gen,
                                      dtype=attrs["positions"].dtype)
                    new_parts["positions"].append(
                        attrs["positions"][split_idx] + (chol @ eps.unsqueeze(-1)).squeeze(-1))
                    new_parts["rotations"].append(attrs["rotations"][split_idx])
                    new_parts["log_scales"].append(
                        attrs["log_scales"][split_idx] - math.log(1.6))
                    new_parts["opacity_logits"].append(attrs["opacity_logits"][split_idx])
                    new_parts["sh_coeffs"].append(attrs["sh_coeffs"][split_idx])
            merged = {k: torch.cat(v).requires_grad_() for k, v in new_parts.items()}
            n_new = clone_idx.numel() + 2 * split_idx.numel()

            carried = {}
            for group in self.optimizer.param_groups:
                name = group["name"]
                if name == "deformation":
                    carried[name] = [(p, self.optimizer.state.get(p)) for p in group["params"]]
                    continue
                state = self.optimizer.state.get(group["params"][0])
                if not state:
                    carried[name] = None
                    continue

                def remap(t):
                    zeros = torch.zeros((n_new,) + t.shape[1:], dtype=t.dtype)
                    return torch.cat([t[keep_idx], zeros])

                carried[name] = {"step": state["step"],
                                 "exp_avg": remap(state["exp_avg"]),
                                 "exp_avg_sq": remap(state["exp_avg_sq"])}

            self.cloud = GaussianCloud(**merged)
            self._build_optimizer()
            for group in self.optimizer.param_groups:
                name = group["name"]
                if name == "deformation":
                    for p, st in carried[name]:
                        if st:
                            self.optimizer.state[p] = st
                elif carried.get(name):
                    self.optimizer.state[group["params"][0]] = carried[name]
            n = len(self.cloud)
            self._grad_accum = torch.zeros(n)
            self._grad_count = torch.zeros(n)
        return self.cloud

    # -- persistence --------------------------------------------------------

    def state_fields(self) -> dict[str, torch.Tensor]:
        fields = {}
        for name, t in self.cloud.attribute_tensors().items():
            fields[f"cloud.{name}"] = t
        for name, t in self.deformation.state_dict().items():
            fields[f"deform.{name}"] = t
        for group in self.optimizer.param_groups:
            for i, p in enumerate(group["params"]):
                state = self.optimizer.state.get(p)
                if not state:
                    continue
                prefix = f"optim.{group['name']}.{i}"
                fields[f"{prefix}.step"] = state["step"]
                fields[f"{prefix}.exp_avg"] = state["exp_avg"]
                fields[f"{prefix}.exp_avg_sq"] = state["exp_avg_sq"]
        fields["sampler.rng"] = self._sampler.get_state()
        fields["sampler.order"] = torch.tensor(self._frame_order, dtype=torch.int64)
        fields["sampler.pos"] = torch.tensor([self._frame_pos], dtype=torch.int64)
        return fields

    def save_checkpoint(self, path):
        write_checkpoint(path, self.state_fields(), self.iteration, self.config_hash)

    def load_checkpoint(self, path):
        """Restore parameters, optimizer moments, and sampler state in place.

        The checkpoint must come from the same architecture (hash check) and
        the same cloud size.
        """
        fields, iteration, _ = read_checkpoint(path, expected_hash=self.config_hash)
        with torch.no_grad():
            for name, t in self.cloud.attribute_tensors().items():
                key = f"cloud.{name}"
                if key not in fields:
                    raise CheckpointError(f"checkpoint is missing {key}")
                if fields[key].shape != t.shape:
                    raise CheckpointError(
                        f"{key} shape {tuple(fields[key].shape)} != model {tuple(t.shape)}")
                t.copy_(fields[key])
        deform_state = {name[len("deform."):]: t for name, t in fields.items()
                        if name.startswith("deform.")}
        self.deformation.load_state_dict(deform_state)
        self.iteration = iteration
        self._build_optimizer()
        for group in self.optimizer.param_groups:
            for i, p in enumerate(group["params"]):
                prefix = f"optim.{group['name']}.{i}"
                if f"{prefix}.exp_avg" in fields:
                    self.optimizer.state[p] = {
                        "step": fields[f"{prefix}.step"],
                        "exp_avg": fields[f"{prefix}.exp_avg"],
                        "exp_avg_sq": fields[f"{prefix}.exp_avg_sq"],
                    }
        if "sampler.rng" in fields:
            self._sampler.set_state(fields["sampler.rng"].to(torch.uint8))
            self._frame_order = fields["sampler.order"].tolist()
            self._frame_pos = int(fields["sampler.pos"][0])
        n = len(self.cloud)
        self._grad_accum = torch.zeros(n)
        self._grad_count = torch.zeros(n)
        return self

    def write_log(self, path=None):
        path = path or (self.out_dir / "train_log.csv" if self.out_dir else None)
        if path is None:
            raise ValueError("no output directory configured")
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iter", "loss_color", "loss_depth", "loss_spatial_tv",
                             "loss_temporal_tv", "loss_total"])
            writer.writerows([[row[0]] + [repr(v) for v in row[1:]] for row in self.log_rows])
        if self.eval_rows:
            with open(Path(path).parent / "eval_log.csv", "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["iter", "psnr", "ssim", "psnr_unmasked", "ssim_unmasked"])
                for it, rep in self.eval_rows:
                    writer.writerow([it, repr(rep.mean_psnr), repr(rep.mean_ssim),
                                     repr(rep.mean_psnr_unmasked), repr(rep.mean_ssim_unmasked)])
