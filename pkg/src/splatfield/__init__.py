"""splatfield: dynamic-scene Gaussian splatting reconstruction on the CPU."""

__version__ = "0.1.0"

from .core import Camera, GaussianCloud, build_covariance, eval_sh, gaussian_weight

__all__ = [
    "Camera",
    "GaussianCloud",
    "build_covariance",
    "eval_sh",
    "gaussian_weight",
    "__version__",
]
