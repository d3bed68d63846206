"""Trainable fuse-describe-match pipeline for rigid 6D pose estimation
between a complete CAD point cloud and a partial RGB-D observation.

Submodules: tensor (f64 autodiff), geometry (rigid motion, point pair
features, correspondences), networks (rotation-invariant 3D encoders, 2D
encoder, latent fusion), losses (circle / bridged coarse / Sinkhorn fine),
matchpose (correspondences, RANSAC, scoring, ICP, metrics), synthdata
(seeded synthetic scenes), pipeline (training, inference, evaluation), and
cli (command line entry point).
"""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
