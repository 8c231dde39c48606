"""Non-rigid alignment of drifting multi-view depth predictions.

Pipeline: ingest per-frame depth/camera predictions, filter by voxelized
confidence, align frames into a canonical cloud with non-rigid frame-to-model
ICP, refine globally, learn the inverse deformations, and export a 2D
Gaussian-splat initialization. A synthetic drift generator doubles as the
verification oracle.
"""

__version__ = "0.1.0"

from .se3 import RigidTransform, Twist, apply_transform, twist_exp, twist_log
from .pointcloud import PointCloud, read_ply, write_ply

__all__ = [
    "RigidTransform",
    "Twist",
    "apply_transform",
    "twist_exp",
    "twist_log",
    "PointCloud",
    "read_ply",
    "write_ply",
    "__version__",
]
