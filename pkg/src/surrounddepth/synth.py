"""Deterministic synthetic surround rig and analytic ray-cast scenes.

Scenes are unions of textured planes and spheres plus an enclosing
background sphere. Rendering intersects every pixel ray analytically, so the
returned depth is exact and every other module can be checked against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import CameraModel, CameraRig, PoseSE3, compose, inverse, rot_y
from .photometric import DepthMap, Image

_TABLE = 64


@dataclass(frozen=True)
class Texture:
    """Seeded value noise (smoothstep lattice) plus a checker pattern, in metres."""

    seed: int = 0
    cell: float = 0.35
    detail: float = 0.5
    checker: float = 1.0
    checker_amp: float = 0.08

    def _tables(self):
        rng = np.random.default_rng(self.seed)
        return rng.uniform(-1.0, 1.0, size=(3, 3, _TABLE, _TABLE))

    def __call__(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        tables = _cached_tables(self)
        out = np.empty(s.shape + (3,))
        chk = (np.floor(s / self.checker) + np.floor(t / self.checker)) % 2 * 2 - 1
        base = 0.3 * _value_noise(tables[0, 0], s / self.cell, t / self.cell)
        if self.detail > 0:
            base = base + 0.15 * _value_noise(tables[0, 1], s / (self.cell * self.detail), t / (self.cell * self.detail))
        for c in range(3):
            tint = 0.1 * _value_noise(tables[1 + c % 2, c], s / (2 * self.cell), t / (2 * self.cell))
            out[..., c] = 0.5 + base + tint + self.checker_amp * chk
        return np.clip(out, 0.0, 1.0)


_table_cache: dict = {}


def _cached_tables(tex: Texture):
    key = tex.seed
    if key not in _table_cache:
        _table_cache[key] = tex._tables()
    return _table_cache[key]


def _value_noise(table: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    fx = fx * fx * (3 - 2 * fx)
    fy = fy * fy * (3 - 2 * fy)
    i0 = x0.astype(np.int64) % _TABLE
    j0 = y0.astype(np.int64) % _TABLE
    i1 = (i0 + 1) % _TABLE
    j1 = (j0 + 1) % _TABLE
    a = table[j0, i0] * (1 - fx) + table[j0, i1] * fx
    b = table[j1, i0] * (1 - fx) + table[j1, i1] * fx
    return a * (1 - fy) + b * fy


@dataclass(frozen=True)
class SolidTexture:
    """Seeded 3-D value noise over world coordinates plus a soft checker, in metres.

    Colour depends only on the hit point, so it is continuous across the
    seams where two surfaces meet.
    """

    seed: int = 0
    cell: float = 0.4
    detail: float = 0.5
    checker: float = 1.0
    checker_amp: float = 0.06

    def at(self, x: np.ndarray) -> np.ndarray:
        tables = _cached_solid_tables(self.seed)
        p = np.asarray(x, dtype=np.float64) / self.cell
        base = 0.3 * _value_noise3(tables[0], p)
        if self.detail > 0:
            base = base + 0.15 * _value_noise3(tables[1], p / self.detail)
        q = np.pi * np.asarray(x, dtype=np.float64) / self.checker
        soft = np.sin(q[..., 0] + 0.3) * np.sin(q[..., 1] + 0.7) * np.sin(q[..., 2] + 1.1)
        out = np.empty(p.shape[:-1] + (3,))
        for c in range(3):
            tint = 0.1 * _value_noise3(tables[2 + c], p / 2.0)
            out[..., c] = 0.5 + base + tint + self.checker_amp * soft
        return np.clip(out, 0.0, 1.0)


_solid_cache: dict = {}
_SOLID_TABLE = 32


def _cached_solid_tables(seed: int) -> np.ndarray:
    if seed not in _solid_cache:
        rng = np.random.default_rng([seed, 3])
        _solid_cache[seed] = rng.uniform(-1.0, 1.0, size=(5,) + (_SOLID_TABLE,) * 3)
    return _solid_cache[seed]


def _value_noise3(table: np.ndarray, p: np.ndarray) -> np.ndarray:
    p0 = np.floor(p)
    f = p - p0
    f = f * f * (3 - 2 * f)
    i0 = p0.astype(np.int64) % _SOLID_TABLE
    i1 = (i0 + 1) % _SOLID_TABLE
    out = 0.0
    for bx in (0, 1):
        ix = i1[..., 0] if bx else i0[..., 0]
        wx = f[..., 0] if bx else 1 - f[..., 0]
        for by in (0, 1):
            iy = i1[..., 1] if by else i0[..., 1]
            wy = f[..., 1] if by else 1 - f[..., 1]
            for bz in (0, 1):
                iz = i1[..., 2] if bz else i0[..., 2]
                wz = f[..., 2] if bz else 1 - f[..., 2]
                out = out + table[ix, iy, iz] * (wx * wy * wz)
    return out


@dataclass(frozen=True, eq=False)
class Plane:
    point: np.ndarray
    normal: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    texture: Texture | SolidTexture = Texture()

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Ray parameter of the hit for rays ``o + t d`` (``inf`` on a miss)."""
        n = np.asarray(self.normal, dtype=np.float64)
        den = d @ n
        num = (np.asarray(self.point) - o) @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / den
        return np.where((np.abs(den) > 1e-12) & (t > 1e-9), t, np.inf)

    def shade(self, x: np.ndarray) -> np.ndarray:
        if isinstance(self.texture, SolidTexture):
            return self.texture.at(x)
        rel = x - np.asarray(self.point)
        return self.texture(rel @ np.asarray(self.axis_u), rel @ np.asarray(self.axis_v))


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray
    radius: float
    texture: Texture | SolidTexture = Texture()

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        oc = o - np.asarray(self.center)
        a = np.einsum("...i,...i->...", d, d)
        b = 2.0 * (d @ oc)
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        root = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - root) / (2 * a)
        t1 = (-b + root) / (2 * a)
        t = np.where(t0 > 1e-9, t0, t1)
        return np.where((disc >= 0) & (t > 1e-9), t, np.inf)

    def shade(self, x: np.ndarray) -> np.ndarray:
        if isinstance(self.texture, SolidTexture):
            return self.texture.at(x)
        rel = x - np.asarray(self.center)
        az = np.arctan2(rel[..., 0], rel[..., 2])
        el = np.arcsin(np.clip(rel[..., 1] / self.radius, -1.0, 1.0))
        return self.texture(az * self.radius, el * self.radius)


@dataclass(frozen=True)
class SyntheticScene:
    primitives: tuple = ()
    # radius of the enclosing background sphere centred on the world origin
    far: float | None = 150.0
    far_texture: Texture = Texture(seed=999, cell=4.0)

    def all_primitives(self) -> list:
        prims = list(self.primitives)
        if self.far is not None:
            prims.append(Sphere(np.zeros(3), self.far, self.far_texture))
        return prims


def fronto_plane(z: float, texture: Texture = Texture()) -> Plane:
    return Plane(np.array([0.0, 0.0, z]), np.array([0.0, 0.0, 1.0]),
                 np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), texture)


def vertical_wall(azimuth: float, distance: float, texture: Texture | SolidTexture) -> Plane:
    n = np.array([math.sin(azimuth), 0.0, math.cos(azimuth)])
    return Plane(distance * n, n, np.array([math.cos(azimuth), 0.0, -math.sin(azimuth)]),
                 np.array([0.0, 1.0, 0.0]), texture)


def default_scene(seed: int = 0, walls: int = 8, distance: tuple[float, float] = (4.0, 7.0),
                  camera_height: float = 1.5, ceiling: float = 3.5, cell: float = 0.4) -> SyntheticScene:
    """Convex room around the vehicle: ground, ceiling and ``walls`` vertical planes.

    Seen from inside a convex room no surface occludes another, which keeps
    cross-view consistency checks free of occlusion effects.
    """
    rng = np.random.default_rng(seed)
    # one world-space texture keeps colour continuous across the room's seams
    tex = SolidTexture(seed, cell)
    prims = [
        Plane(np.array([0.0, camera_height, 0.0]), np.array([0.0, 1.0, 0.0]),
              np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]), tex),
        Plane(np.array([0.0, -ceiling, 0.0]), np.array([0.0, 1.0, 0.0]),
              np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]), tex),
    ]
    step = 2 * math.pi / walls
    for k in range(walls):
        az = k * step + rng.uniform(-0.2, 0.2) * step
        prims.append(vertical_wall(az, rng.uniform(*distance), tex))
    return SyntheticScene(tuple(prims))


@dataclass(frozen=True)
class RigSpec:
    n_cameras: int = 6
    radial_offset: float = 1.0
    width: int = 320
    height: int = 192
    hfov_deg: float = 100.0
    overlap: float = 1.0 / 3.0
    intrinsics: tuple[CameraModel, ...] | None = None

    def camera(self, i: int) -> CameraModel:
        if self.intrinsics is not None:
            return self.intrinsics[i]
        f = (self.width / 2.0) / math.tan(math.radians(self.hfov_deg) / 2.0)
        return CameraModel(f, f, (self.width - 1) / 2.0, (self.height - 1) / 2.0, self.width, self.height)


def ring_adjacency(n: int) -> tuple[tuple[int, int], ...]:
    if n == 2:
        return ((0, 1),)
    return tuple((i, (i + 1) % n) for i in range(n))


def frustum_overlap(cam_i: CameraModel, T_i: PoseSE3, cam_j: CameraModel, T_j: PoseSE3,
                    samples: int = 401, distance: float = 1e4) -> float:
    """Fraction of view-i centre-row rays (at ``distance``) that land inside view j."""
    u = np.linspace(0.0, cam_i.width - 1, samples)
    v = np.full(samples, cam_i.cy)
    rays = np.stack([(u - cam_i.cx) / cam_i.fx, (v - cam_i.cy) / cam_i.fy, np.ones(samples)], axis=1)
    pts = rays / np.linalg.norm(rays, axis=1, keepdims=True) * distance
    pj = compose(inverse(T_j), T_i).apply(pts)
    front = pj[:, 2] > 0
    z = np.where(front, pj[:, 2], 1.0)
    uj = cam_j.fx * pj[:, 0] / z + cam_j.cx
    vj = cam_j.fy * pj[:, 1] / z + cam_j.cy
    inside = front & (uj >= 0) & (uj <= cam_j.width - 1) & (vj >= 0) & (vj <= cam_j.height - 1)
    return float(inside.mean())


def build_rig(spec: RigSpec = RigSpec()) -> CameraRig:
    """Cameras on a ring, yawed by ``2*pi/N``; camera ``i+1`` sits to the right of ``i``."""
    n = spec.n_cameras
    if n < 2:
        raise ValueError("a rig needs at least 2 cameras")
    if spec.intrinsics is not None and len(spec.intrinsics) != n:
        raise ValueError("one intrinsic per camera is required")
    cams, exts = [], []
    for i in range(n):
        R = rot_y(2 * math.pi * i / n)
        exts.append(PoseSE3(R.rotation, R.apply([0.0, 0.0, spec.radial_offset])))
        cams.append(spec.camera(i))
    adjacency = ring_adjacency(n)
    for i, j in adjacency:
        frac = frustum_overlap(cams[i], exts[i], cams[j], exts[j])
        if frac < spec.overlap:
            raise ValueError(
                f"views {i} and {j} overlap by {frac:.3f}, below the required {spec.overlap:.3f}"
            )
    return CameraRig(tuple(cams), tuple(exts), adjacency)


def pixel_rays(cam: CameraModel) -> np.ndarray:
    """(H, W, 3) camera-frame ray directions with unit z."""
    v, u = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    return np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)


def render_view(scene: SyntheticScene, cam: CameraModel, cam_to_world: PoseSE3) -> tuple[Image, DepthMap]:
    rays = pixel_rays(cam)
    d = rays @ cam_to_world.rotation.T
    o = cam_to_world.translation
    prims = scene.all_primitives()
    hits = np.stack([p.intersect(o, d) for p in prims]) if prims else np.full((1,) + rays.shape[:2], np.inf)
    which = np.argmin(hits, axis=0)
    t = np.take_along_axis(hits, which[None], axis=0)[0]
    valid = np.isfinite(t)
    img = np.zeros(rays.shape[:2] + (3,))
    x = o + d * np.where(valid, t, 0.0)[..., None]
    for k, p in enumerate(prims):
        sel = valid & (which == k)
        if sel.any():
            img[sel] = p.shade(x[sel])
    # rays have unit z in the camera frame, so the ray parameter is the depth
    return Image(img), DepthMap(np.where(valid, t, 0.0), valid)


def render(scene: SyntheticScene, rig: CameraRig, pose_of_vehicle: PoseSE3 = PoseSE3.identity()):
    """Render every view; ``pose_of_vehicle`` maps vehicle coordinates to the world."""
    return [
        render_view(scene, cam, compose(pose_of_vehicle, T))
        for cam, T in zip(rig.cameras, rig.extrinsics)
    ]


@dataclass(frozen=True)
class SyntheticSequence:
    """Frames ``frames[t][i] = (Image, DepthMap)`` rendered along a vehicle trajectory.

    ``vehicle_poses[t]`` maps vehicle coordinates at step ``t`` into the world;
    consecutive poses differ by ``motion`` applied in the vehicle frame.
    """

    rig: CameraRig
    frames: list
    vehicle_poses: list
    motion: PoseSE3 = field(default_factory=PoseSE3.identity)

    @property
    def steps(self) -> int:
        return len(self.frames)

    def ego_motion(self, t: int, s: int) -> PoseSE3:
        """Universal ego-motion: maps vehicle coordinates at ``t`` into those at ``s``."""
        return compose(inverse(self.vehicle_poses[s]), self.vehicle_poses[t])

    def camera_motion(self, i: int, t: int, s: int) -> PoseSE3:
        """Camera-``i`` ego-motion computed directly from the rendered camera poses."""
        T = self.rig.extrinsics[i]
        return compose(inverse(compose(self.vehicle_poses[s], T)), compose(self.vehicle_poses[t], T))


def make_sequence(scene: SyntheticScene, rig: CameraRig, motion: PoseSE3, steps: int,
                  start: PoseSE3 = PoseSE3.identity()) -> SyntheticSequence:
    if steps < 2:
        raise ValueError("a sequence needs at least 2 steps")
    poses = [start]
    for _ in range(steps - 1):
        poses.append(compose(poses[-1], motion))
    frames = [render(scene, rig, V) for V in poses]
    return SyntheticSequence(rig, frames, poses, motion)


def scene_with_primitives(prims: Sequence, far: float | None = 150.0) -> SyntheticScene:
    return SyntheticScene(tuple(prims), far)


def depth_at(scene: SyntheticScene, cam: CameraModel, cam_to_world: PoseSE3, pixels) -> np.ndarray:
    """Analytic depth at arbitrary sub-pixel locations (``inf`` where no surface is hit)."""
    q = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    rays = np.column_stack([(q[:, 0] - cam.cx) / cam.fx, (q[:, 1] - cam.cy) / cam.fy, np.ones(len(q))])
    d = rays @ cam_to_world.rotation.T
    prims = scene.all_primitives()
    if not prims:
        return np.full(len(q), np.inf)
    return np.min(np.stack([p.intersect(cam_to_world.translation, d) for p in prims]), axis=0)
