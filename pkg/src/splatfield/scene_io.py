"""Dataset ingestion and emission.

On-disk layout: a JSON manifest next to 8-bit PNG color images, 16-bit PNG
depth maps (integer value * depth_scale = depth in scene units), and 8-bit
PNG masks (nonzero = keep). Extrinsics are 4x4 camera-to-world, row-major.
ENDONERF-style stereo captures map onto this layout by exporting left-view
rasters and poses; see the README for the field-by-field mapping.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import Camera
from .initializer import FrameRecord

DEPTH_MODES = ("binocular", "monocular")


class SceneLoadError(Exception):
    pass


@dataclass
class FrameFiles:
    image: str
    depth: str
    mask: str
    pose: list  # 4x4 nested list, camera-to-world
    time: float | None = None


@dataclass
class SceneManifest:
    root: Path
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    near: float
    far: float
    depth_mode: str
    depth_scale: float
    frames: list[FrameFiles] = field(default_factory=list)

    def camera_for(self, pose, dtype=torch.float32) -> Camera:
        K = torch.tensor([[self.fx, 0.0, self.cx],
                          [0.0, self.fy, self.cy],
                          [0.0, 0.0, 1.0]], dtype=dtype)
        T = torch.tensor(pose, dtype=dtype)
        return Camera(K=K, T=T, width=self.width, height=self.height,
                      near=self.near, far=self.far)


def read_manifest(path) -> SceneManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SceneLoadError(f"{path}: invalid manifest JSON: {e}") from e
    try:
        intr = raw["intrinsics"]
        manifest = SceneManifest(
            root=path.parent,
            width=int(raw["width"]), height=int(raw["height"]),
            fx=float(intr["fx"]), fy=float(intr["fy"]),
            cx=float(intr["cx"]), cy=float(intr["cy"]),
            near=float(raw["near"]), far=float(raw["far"]),
            depth_mode=raw["depth_mode"],
            depth_scale=float(raw["depth_scale"]),
            frames=[FrameFiles(**f) for f in raw["frames"]],
        )
    except (KeyError, TypeError) as e:
        raise SceneLoadError(f"{path}: missing manifest field: {e}") from e
    if manifest.depth_mode not in DEPTH_MODES:
        raise SceneLoadError(f"{path}: depth_mode must be one of {DEPTH_MODES}")
    if not manifest.frames:
        raise SceneLoadError(f"{path}: manifest lists no frames")
    return manifest


def _load_frame(manifest: SceneManifest, i: int) -> FrameRecord:
    ref = manifest.frames[i]
    t = ref.time if ref.time is not None else (
        i / (len(manifest.frames) - 1) if len(manifest.frames) > 1 else 0.0)

    def load_png(rel, what):
        p = manifest.root / rel
        if not p.exists():
            raise SceneLoadError(f"frame {i}: missing {what} file {p}")
        return np.array(Image.open(p))

    img = load_png(ref.image, "image")
    if img.ndim != 3 or img.shape[2] < 3:
        raise SceneLoadError(f"frame {i}: image must be RGB, got shape {img.shape}")
    img = img[..., :3]
    depth = load_png(ref.depth, "depth").astype(np.float32) * manifest.depth_scale
    mask = load_png(ref.mask, "mask")
    if mask.ndim == 3:
        mask = mask[..., 0]
    expected = (manifest.height, manifest.width)
    for name, arr in (("image", img[..., 0]), ("depth", depth), ("mask", mask)):
        if arr.shape != expected:
            raise SceneLoadError(
                f"frame {i}: {name} raster is {arr.shape}, manifest says {expected}")
    return FrameRecord(
        image=torch.from_numpy(img.astype(np.float32) / 255.0),
        depth=torch.from_numpy(depth),
        mask=torch.from_numpy((mask > 0).astype(np.float32)),
        camera=manifest.camera_for(ref.pose),
        time=float(t),
        index=i,
    )


def load_scene(manifest_path, max_workers: int = 4):
    """Load every frame of a manifest; returns (frames, manifest).

    Times must be strictly increasing; loading is parallel across frames but
    results are ordered by index.
    """
    manifest = read_manifest(manifest_path)
    indices = range(len(manifest.frames))
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            frames = list(pool.map(lambda i: _load_frame(manifest, i), indices))
    else:
        frames = [_load_frame(manifest, i) for i in indices]
    times = [f.time for f in frames]
    for a, b in zip(times, times[1:]):
        if not b > a:
            raise SceneLoadError(f"timestamps not strictly increasing: {times}")
    return frames, manifest


def split_frames(frames: list[FrameRecord]):
    """Deterministic 7:1 split: every 8th frame (index % 8 == 7) is test."""
    train = [f for i, f in enumerate(frames) if i % 8 != 7]
    test = [f for i, f in enumerate(frames) if i % 8 == 7]
    return train, test


def save_scene(out_dir, frames: list[FrameRecord], depth_mode: str,
               depth_scale: float | None = None) -> Path:
    """Emit frames in the on-disk format `load_scene` reads; returns the
    manifest path. Depth is quantized to 16 bits with the given scale."""
    out_dir = Path(out_dir)
    for sub in ("images", "depth", "masks"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    cam0 = frames[0].camera
    if depth_scale is None:
        depth_scale = cam0.far / 60000.0
    refs = []
    for i, fr in enumerate(frames):
        img8 = (fr.image.clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
        d16 = np.clip(np.round(fr.depth.numpy() / depth_scale), 0, 65535).astype(np.uint16)
        m8 = (fr.mask.numpy() > 0).astype(np.uint8) * 255
        names = {k: f"{k}/frame_{i:04d}.png" for k in ("images", "depth", "masks")}
        Image.fromarray(img8).save(out_dir / names["images"])
        Image.fromarray(d16).save(out_dir / names["depth"])
        Image.fromarray(m8).save(out_dir / names["masks"])
        refs.append({
            "image": names["images"], "depth": names["depth"], "mask": names["masks"],
            "pose": fr.camera.T.tolist(), "time": fr.time,
        })
    manifest = {
        "width": cam0.width, "height": cam0.height,
        "intrinsics": {"fx": cam0.fx, "fy": cam0.fy, "cx": cam0.cx, "cy": cam0.cy},
        "near": cam0.near, "far": cam0.far,
        "depth_mode": depth_mode,
        "depth_scale": depth_scale,
        "frames": refs,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest_path
