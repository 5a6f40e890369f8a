"""Wiring: build clouds, deformation models, and trainers from a config."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import torch

from .config import PipelineConfig, architecture_hash
from .core import GaussianCloud
from .checkpoint import CheckpointError, read_checkpoint
from .deformation import DeformationModel, HexPlaneConfig, hexplane_param_counts, matched_mlp_width
from .initializer import FrameRecord, combine_holistic, instantiate_gaussians, random_init, reproject_frame
from .trainer import Trainer


def build_cloud(config: PipelineConfig, frames: list[FrameRecord]) -> GaussianCloud:
    """Initial canonical Gaussians: holistic depth reprojection by default,
    uniform random-in-box as the ablation baseline."""
    init = config.init
    if init.mode == "holistic":
        clouds = [reproject_frame(f) for f in frames]
        points = combine_holistic(clouds, keep_fraction=init.keep_fraction, seed=init.seed)
        return instantiate_gaussians(points, sh_degree=config.model.sh_degree,
                                     opacity=init.opacity)
    # Random baseline uses the bounding box of the reprojected geometry, so
    # the comparison isolates *where* points start rather than the box size.
    clouds = [reproject_frame(f) for f in frames]
    pooled = combine_holistic(clouds, keep_fraction=min(1.0, init.keep_fraction * 10),
                              seed=init.seed)
    lo = pooled.positions.min(0).values
    hi = pooled.positions.max(0).values
    return random_init(init.random_count, lo.tolist(), hi.tolist(),
                       sh_degree=config.model.sh_degree, seed=init.seed)


def build_deformation(config: PipelineConfig, cloud: GaussianCloud) -> DeformationModel:
    if config.model.deformation == "hexplane":
        model = DeformationModel.hexplane(
            dataclasses.replace(config.hexplane), config.decoder, seed=config.train.seed)
        model.encoder.set_bounds_from_points(cloud.positions)
        return model
    mlp_cfg = dataclasses.replace(config.mlp)
    if mlp_cfg.width == 0:
        # Match the factorized model's parameter budget for a fair ablation.
        target = hexplane_param_counts(config.hexplane)["total"]
        mlp_cfg.width = matched_mlp_width(target, mlp_cfg)
    return DeformationModel.mlp_baseline(mlp_cfg, config.decoder, seed=config.train.seed)


def build_trainer(config: PipelineConfig, frames_train: list[FrameRecord],
                  frames_test: list[FrameRecord], out_dir=None) -> Trainer:
    cloud = build_cloud(config, frames_train)
    deformation = build_deformation(config, cloud)
    return Trainer(cloud, deformation, frames_train, frames_test,
                   config=config.train, raster_config=config.raster,
                   loss_weights=config.losses, out_dir=out_dir,
                   config_hash=architecture_hash(config))


def load_model(path, config: PipelineConfig):
    """Rebuild (cloud, deformation, iteration) from a checkpoint for
    render/eval; rejects checkpoints from a different architecture."""
    fields, iteration, _ = read_checkpoint(path, expected_hash=architecture_hash(config))
    try:
        cloud = GaussianCloud(
            positions=fields["cloud.positions"],
            rotations=fields["cloud.rotations"],
            log_scales=fields["cloud.log_scales"],
            opacity_logits=fields["cloud.opacity_logits"],
            sh_coeffs=fields["cloud.sh_coeffs"],
        )
    except KeyError as e:
        raise CheckpointError(f"{path}: missing cloud field {e}") from e
    deformation = build_deformation(config, cloud)
    deform_state = {k[len("deform."):]: v for k, v in fields.items() if k.startswith("deform.")}
    deformation.load_state_dict(deform_state)
    return cloud, deformation, iteration


def resume_trainer(path, config: PipelineConfig, frames_train, frames_test,
                   out_dir=None) -> Trainer:
    cloud, deformation, _ = load_model(path, config)
    trainer = Trainer(cloud, deformation, frames_train, frames_test,
                      config=config.train, raster_config=config.raster,
                      loss_weights=config.losses, out_dir=out_dir,
                      config_hash=architecture_hash(config))
    trainer.load_checkpoint(path)
    return trainer
