"""Geometry, losses, pseudo-depth and evaluation for surround-camera depth estimation."""

from ._backend import BACKEND
from .geometry import CameraModel, CameraRig, PoseSE3, compose, inverse, relative_pose, universal_to_local
from .photometric import DepthMap, Image, OcclusionMask

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CameraModel",
    "CameraRig",
    "DepthMap",
    "Image",
    "OcclusionMask",
    "PoseSE3",
    "compose",
    "inverse",
    "relative_pose",
    "universal_to_local",
]
