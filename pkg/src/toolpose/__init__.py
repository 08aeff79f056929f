"""Geometric toolkit for zero-shot 6DoF tool pose estimation.

Stereo depth, CAD-projection pseudo-label masks, render-and-compare pose
search with ICP refinement, evaluation metrics and a synthetic scene
generator. All lengths are millimetres.
"""

from toolpose.geometry import (
    BehindCameraError,
    CameraIntrinsics,
    PointCloud,
    RigidTransform,
    StereoRig,
    back_project,
    compose,
    project,
    transform_points,
)
from toolpose.mesh import MeshError, TriangleMesh, load_mesh, save_mesh

__version__ = "0.1.0"

__all__ = [
    "BehindCameraError",
    "CameraIntrinsics",
    "MeshError",
    "PointCloud",
    "RigidTransform",
    "StereoRig",
    "TriangleMesh",
    "back_project",
    "compose",
    "load_mesh",
    "project",
    "save_mesh",
    "transform_points",
]
