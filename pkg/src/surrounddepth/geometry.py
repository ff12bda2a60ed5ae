"""Pinhole cameras, rigid transforms and two-view epipolar geometry.

Conventions used throughout the package:

* camera frame: x right, y down, z forward (optical axis);
* pixel ``(u, v)`` has homogeneous form ``(u, v, 1)``; integer coordinates
  are pixel centres, ``u`` indexes columns and ``v`` rows;
* a rig extrinsic maps camera coordinates into the vehicle frame
  (camera-to-vehicle), so ``relative_pose(rig, i, j) = inv(T_j) @ T_i``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Base class for geometric failures."""


class BehindCameraError(GeometryError):
    """A point lies at or behind the image plane of a camera."""


class DegenerateGeometryError(GeometryError):
    """Input configuration has no well-defined epipolar structure."""


class Pixel(NamedTuple):
    u: float
    v: float


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraModel:
    """Zero-skew pinhole intrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be >= 1, got {self.width}x{self.height}")
        for name in ("fx", "fy", "cx", "cy"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def in_bounds(self, p: Pixel) -> bool:
        return 0.0 <= p[0] <= self.width - 1 and 0.0 <= p[1] <= self.height - 1


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform ``x -> R x + t`` stored as rotation matrix and translation."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _readonly(self.rotation)
        t = _readonly(self.translation).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"bad pose shapes {R.shape}, {t.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "PoseSE3":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > ORTHO_TOL:
            raise ValueError("bottom row of a rigid transform must be (0, 0, 0, 1)")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform one point ``(3,)`` or an array of points ``(..., 3)``."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return compose(self, other)

    def allclose(self, other: "PoseSE3", atol: float = 1e-9) -> bool:
        return bool(np.abs(self.matrix() - other.matrix()).max() <= atol)

    def __repr__(self):
        return f"PoseSE3(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def translation(x: float, y: float, z: float) -> PoseSE3:
    return PoseSE3(np.eye(3), np.array([x, y, z], dtype=np.float64))


def rot_x(angle: float) -> PoseSE3:
    c, s = math.cos(angle), math.sin(angle)
    return PoseSE3(np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]))


def rot_y(angle: float) -> PoseSE3:
    c, s = math.cos(angle), math.sin(angle)
    return PoseSE3(np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]))


def rot_z(angle: float) -> PoseSE3:
    c, s = math.cos(angle), math.sin(angle)
    return PoseSE3(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))


def random_pose(rng: np.random.Generator, max_translation: float = 5.0) -> PoseSE3:
    """Uniformly random rotation (via a unit quaternion) and box-uniform translation."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
    return PoseSE3(R, rng.uniform(-max_translation, max_translation, size=3))


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """Return ``a @ b``: apply ``b`` first, then ``a``."""
    R = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    return PoseSE3(R, t)


def inverse(p: PoseSE3) -> PoseSE3:
    Rt = p.rotation.T
    return PoseSE3(Rt, -Rt @ p.translation)


@dataclass(frozen=True)
class CameraRig:
    """Ordered cameras with camera-to-vehicle extrinsics and overlapping view pairs."""

    cameras: tuple[CameraModel, ...]
    extrinsics: tuple[PoseSE3, ...]
    adjacency: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "extrinsics", tuple(self.extrinsics))
        object.__setattr__(self, "adjacency", tuple((int(i), int(j)) for i, j in self.adjacency))
        n = len(self.cameras)
        if n < 2:
            raise ValueError(f"a rig needs at least 2 cameras, got {n}")
        if len(self.extrinsics) != n:
            raise ValueError("one extrinsic per camera is required")
        for i, j in self.adjacency:
            if not (0 <= i < n and 0 <= j < n):
                raise IndexError(f"adjacency pair ({i}, {j}) out of range for {n} cameras")

    def __len__(self):
        return len(self.cameras)

    def with_adjacency(self, adjacency) -> "CameraRig":
        return CameraRig(self.cameras, self.extrinsics, tuple(adjacency))

    def scaled(self, s: float) -> "CameraRig":
        """Same rig with every extrinsic translation multiplied by ``s``."""
        ext = tuple(PoseSE3(T.rotation, T.translation * s) for T in self.extrinsics)
        return CameraRig(self.cameras, ext, self.adjacency)


def relative_pose(rig: CameraRig, i: int, j: int) -> PoseSE3:
    """Transform mapping camera-``i`` coordinates into camera-``j`` coordinates."""
    n = len(rig)
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"view index out of range: ({i}, {j}) for {n} cameras")
    return compose(inverse(rig.extrinsics[j]), rig.extrinsics[i])


def backproject(cam: CameraModel, p: Pixel, depth: float) -> np.ndarray:
    """Camera-frame point at ``depth`` (its z) along the ray through ``p``."""
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    u, v = p
    return np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth])


def project(cam: CameraModel, point) -> Pixel:
    x, y, z = (float(c) for c in point)
    if not z > 0:
        raise BehindCameraError(f"point has z={z} <= 0")
    return Pixel(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy)


def warp_pixel(p: Pixel, depth: float, cam_i: CameraModel, cam_j: CameraModel, rel: PoseSE3) -> Pixel:
    """Map pixel ``p`` of view i with known depth into view j through ``rel`` (i -> j)."""
    return project(cam_j, rel.apply(backproject(cam_i, p, depth)))


def skew(t) -> np.ndarray:
    x, y, z = t
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True, eq=False)
class FundamentalMatrix:
    F: np.ndarray

    def __post_init__(self):
        F = _readonly(self.F)
        if F.shape != (3, 3):
            raise ValueError(f"fundamental matrix must be 3x3, got {F.shape}")
        s = np.linalg.svd(F, compute_uv=False)
        if s[0] == 0 or s[2] > 1e-9 * s[0]:
            raise DegenerateGeometryError("fundamental matrix must have rank 2")
        object.__setattr__(self, "F", F)

    def normalized(self) -> "FundamentalMatrix":
        return FundamentalMatrix(self.F / np.linalg.norm(self.F))

    def scaled(self, s: float) -> "FundamentalMatrix":
        return FundamentalMatrix(self.F * s)

    def line(self, q_i: Pixel) -> np.ndarray:
        """Epipolar line ``(a, b, c)`` in view j of pixel ``q_i``."""
        return self.F @ np.array([q_i[0], q_i[1], 1.0])


def fundamental_matrix(cam_i: CameraModel, cam_j: CameraModel, rel: PoseSE3) -> FundamentalMatrix:
    t = rel.translation
    if np.linalg.norm(t) <= 1e-12:
        raise DegenerateGeometryError("zero baseline: epipolar geometry is undefined")
    F = cam_j.K_inv.T @ skew(t) @ rel.rotation @ cam_i.K_inv
    return FundamentalMatrix(F)


def epipolar_distances(F: FundamentalMatrix, q_i, q_j) -> np.ndarray:
    """Vectorised point-to-epipolar-line distances for ``(M, 2)`` pixel arrays."""
    q_i = np.atleast_2d(np.asarray(q_i, dtype=np.float64))
    q_j = np.atleast_2d(np.asarray(q_j, dtype=np.float64))
    hi = np.column_stack([q_i, np.ones(len(q_i))])
    hj = np.column_stack([q_j, np.ones(len(q_j))])
    lines = hi @ F.F.T
    norm = np.hypot(lines[:, 0], lines[:, 1])
    if np.any(norm == 0):
        raise DegenerateGeometryError("degenerate epipolar line (a = b = 0)")
    return np.abs(np.sum(lines * hj, axis=1)) / norm


def epipolar_distance(F: FundamentalMatrix, q_i: Pixel, q_j: Pixel) -> float:
    return float(epipolar_distances(F, [q_i], [q_j])[0])


def universal_to_local(universal: PoseSE3, extrinsic: PoseSE3) -> PoseSE3:
    """Per-camera ego-motion from the vehicle ego-motion: ``inv(T) @ P @ T``."""
    return compose(inverse(extrinsic), compose(universal, extrinsic))


# -- rig files -------------------------------------------------------------


def rig_to_dict(rig: CameraRig) -> dict:
    cams = []
    for cam, T in zip(rig.cameras, rig.extrinsics):
        cams.append(
            {
                "fx": cam.fx,
                "fy": cam.fy,
                "cx": cam.cx,
                "cy": cam.cy,
                "width": cam.width,
                "height": cam.height,
                "extrinsic": T.matrix().reshape(-1).tolist(),
            }
        )
    return {"cameras": cams, "adjacency": [list(p) for p in rig.adjacency]}


def rig_from_dict(d: dict) -> CameraRig:
    cams, exts = [], []
    try:
        for c in d["cameras"]:
            cams.append(
                CameraModel(
                    float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]),
                    int(c["width"]), int(c["height"]),
                )
            )
            m = np.asarray(c["extrinsic"], dtype=np.float64)
            if m.size != 16:
                raise ValueError("extrinsic must hold 16 row-major values")
            exts.append(PoseSE3.from_matrix(m.reshape(4, 4)))
        adjacency = [tuple(p) for p in d.get("adjacency", [])]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed rig description: {exc!r}") from exc
    for p in adjacency:
        if len(p) != 2:
            raise ValueError(f"adjacency entries must be pairs, got {p}")
    return CameraRig(tuple(cams), tuple(exts), tuple(adjacency))


def save_rig(rig: CameraRig, path) -> None:
    Path(path).write_text(json.dumps(rig_to_dict(rig), indent=2))


def load_rig(path) -> CameraRig:
    return rig_from_dict(json.loads(Path(path).read_text()))


def as_pixels(points: Sequence) -> np.ndarray:
    return np.asarray(points, dtype=np.float64).reshape(-1, 2)
