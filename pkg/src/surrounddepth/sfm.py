"""Cross-view pseudo-depth: overlap-band matching, epipolar filtering, triangulation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._backend import kernels, num_threads
from .geometry import (
    BehindCameraError,
    CameraModel,
    CameraRig,
    DegenerateGeometryError,
    FundamentalMatrix,
    Pixel,
    PoseSE3,
    epipolar_distances,
    fundamental_matrix,
    relative_pose,
)
from .photometric import DepthMap, Image

logger = logging.getLogger(__name__)

MIN_TRIANGULATION_ANGLE_DEG = 0.1


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    view_i: int
    view_j: int
    q_i: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    q_j: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    score: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        qi = np.asarray(self.q_i, dtype=np.float64).reshape(-1, 2)
        qj = np.asarray(self.q_j, dtype=np.float64).reshape(-1, 2)
        sc = np.asarray(self.score, dtype=np.float64).reshape(-1)
        if not (len(qi) == len(qj) == len(sc)):
            raise ValueError("correspondence arrays differ in length")
        if len(np.unique(qi, axis=0)) != len(qi):
            raise ValueError("duplicate q_i entries")
        for a in (qi, qj, sc):
            a.setflags(write=False)
        object.__setattr__(self, "q_i", qi)
        object.__setattr__(self, "q_j", qj)
        object.__setattr__(self, "score", sc)

    def __len__(self):
        return len(self.q_i)

    def subset(self, keep: np.ndarray) -> "CorrespondenceSet":
        return CorrespondenceSet(self.view_i, self.view_j, self.q_i[keep], self.q_j[keep], self.score[keep])

    def to_dict(self) -> dict:
        rows = np.column_stack([self.q_i, self.q_j, self.score]).tolist() if len(self) else []
        return {"view_i": self.view_i, "view_j": self.view_j, "pairs": rows}

    @classmethod
    def from_dict(cls, d: dict) -> "CorrespondenceSet":
        rows = np.asarray(d.get("pairs", []), dtype=np.float64).reshape(-1, 5)
        return cls(int(d["view_i"]), int(d["view_j"]), rows[:, 0:2], rows[:, 2:4], rows[:, 4])


@dataclass(frozen=True)
class RegionMask:
    """Horizontal bands (``left``, ``right`` or ``full``) searched in each view."""

    fraction: float = 1.0 / 3.0
    side_i: str = "right"
    side_j: str = "left"

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must be in (0, 1]")
        for s in (self.side_i, self.side_j):
            if s not in ("left", "right", "full"):
                raise ValueError(f"unknown band side {s!r}")

    @classmethod
    def full(cls) -> "RegionMask":
        return cls(1.0, "full", "full")

    def band(self, side: str, width: int) -> tuple[float, float]:
        if side == "full" or self.fraction >= 1.0:
            return 0.0, width - 1.0
        span = self.fraction * width
        if side == "left":
            return 0.0, span - 1.0
        return width - span, width - 1.0


@dataclass(frozen=True, eq=False)
class SparsePseudoDepth:
    view: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    depth: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        d = np.asarray(self.depth, dtype=np.float64).reshape(-1)
        if len(p) != len(d):
            raise ValueError("points and depths differ in length")
        if len(d) and not (np.all(np.isfinite(d)) and np.all(d > 0)):
            raise ValueError("pseudo depths must be positive and finite")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "depth", d)

    def __len__(self):
        return len(self.depth)

    def to_dict(self) -> dict:
        return {"view": self.view, "points": np.column_stack([self.points, self.depth]).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SparsePseudoDepth":
        rows = np.asarray(d.get("points", []), dtype=np.float64).reshape(-1, 3)
        return cls(int(d["view"]), rows[:, :2], rows[:, 2])


@dataclass(frozen=True)
class SfmConfig:
    gamma: float = 2.0
    gamma_reference_width: int = 640
    min_depth: float = 0.1
    max_depth: float = 200.0
    detector: str = "builtin"
    max_keypoints: int = 600
    corner_radius: int = 2
    corner_threshold: float = 1e-5
    nms_radius: int = 3
    patch_radius: int = 5
    search_radius: int = 2
    lk_radius: int = 7
    min_score: float = 0.85

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError("need 0 < min_depth < max_depth")
        if self.detector not in ("builtin", "file"):
            raise ValueError(f"unknown detector {self.detector!r}")

    def gamma_for(self, width: int) -> float:
        """Epipolar threshold scaled from the reference width to ``width``."""
        return self.gamma * width / self.gamma_reference_width


# -- matching -----------------------------------------------------------------


def corner_response(gray: np.ndarray, radius: int) -> np.ndarray:
    """Smallest eigenvalue of the box-summed structure tensor."""
    gy, gx = np.gradient(gray)
    nt = num_threads()
    a = kernels.box_mean(gx * gx, radius, nt)
    b = kernels.box_mean(gx * gy, radius, nt)
    c = kernels.box_mean(gy * gy, radius, nt)
    return np.maximum((a + c) / 2 - np.sqrt(((a - c) / 2) ** 2 + b * b), 0.0)


def detect_corners(gray: np.ndarray, u_range: tuple[float, float], margin: int, cfg: SfmConfig) -> np.ndarray:
    """Integer ``(u, v)`` keypoints inside the band, strongest first, deterministic order."""
    H, W = gray.shape
    resp = corner_response(gray, cfg.corner_radius)
    r = cfg.nms_radius
    padded = np.pad(resp, r, mode="constant", constant_values=-1.0)
    local_max = np.lib.stride_tricks.sliding_window_view(padded, (2 * r + 1, 2 * r + 1)).max(axis=(2, 3))
    keep = (resp >= local_max) & (resp > cfg.corner_threshold)
    v, u = np.nonzero(keep)
    lo = max(u_range[0], margin)
    hi = min(u_range[1], W - 1 - margin)
    sel = (u >= lo) & (u <= hi) & (v >= margin) & (v <= H - 1 - margin)
    u, v = u[sel], v[sel]
    order = np.lexsort((u, v, -resp[v, u]))[: cfg.max_keypoints]
    return np.column_stack([u[order], v[order]])


def patch_descriptors(gray: np.ndarray, pts: np.ndarray, radius: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean, unit-norm patches; the mask drops textureless patches."""
    k = 2 * radius + 1
    if len(pts) == 0:
        return np.zeros((0, k * k)), np.zeros(0, dtype=bool)
    offs = np.arange(-radius, radius + 1)
    rows = pts[:, 1, None, None] + offs[None, :, None]
    cols = pts[:, 0, None, None] + offs[None, None, :]
    patches = gray[rows, cols].reshape(len(pts), -1)
    patches = patches - patches.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(patches, axis=1)
    ok = norm > 1e-6
    desc = np.where(ok[:, None], patches / np.where(ok, norm, 1.0)[:, None], 0.0)
    return desc, ok


def refine_projective(gi: np.ndarray, gj: np.ndarray, qi: np.ndarray, qj: np.ndarray, radius: int,
                      iterations: int = 40) -> tuple[np.ndarray, np.ndarray]:
    """Lucas-Kanade refinement of ``qj`` for the template centred at integer ``qi``.

    The template window is mapped into ``gj`` by an 8-parameter projective
    warp (exact for locally planar surfaces, so the centre estimate is not
    biased by perspective foreshortening). Gauss-Newton runs on all matches
    at once. Returns refined ``(M, 2)`` locations and the NCC between the
    template and the warped window (-1 when sampling left the image).
    """
    n = len(qi)
    if n == 0:
        return np.zeros((0, 2)), np.zeros(0)
    offs = np.arange(-radius, radius + 1, dtype=np.float64)
    dy, dx = (a.reshape(-1) for a in np.meshgrid(offs, offs, indexing="ij"))
    rows = qi[:, 1, None].astype(np.intp) + dy.astype(np.intp)[None]
    cols = qi[:, 0, None].astype(np.intp) + dx.astype(np.intp)[None]
    tmpl = gi[rows, cols]
    # normalised window coordinates keep the projective terms well conditioned
    x, y = dx / radius, dy / radius
    gy, gx = np.gradient(gj)
    stack = np.stack([gj, gx, gy], axis=-1)

    # u = (p0 x + p1 y + p4) / w, v = (p2 x + p3 y + p5) / w, w = 1 + p6 x + p7 y
    p = np.zeros((n, 8))
    p[:, 0] = p[:, 3] = radius
    p[:, 4:6] = qj

    def warp(p):
        w = 1.0 + p[:, 6, None] * x + p[:, 7, None] * y
        u = (p[:, 0, None] * x + p[:, 1, None] * y + p[:, 4, None]) / w
        v = (p[:, 2, None] * x + p[:, 3, None] * y + p[:, 5, None]) / w
        return u, v, w

    alive = np.ones(n, dtype=bool)
    damping = 1e-6 * np.eye(8)
    for _ in range(iterations):
        u, v, w = warp(p)
        alive &= np.all(w > 0.1, axis=1)
        vals, inb = kernels.bilinear_sample(stack, u.reshape(-1), v.reshape(-1))
        vals = vals.reshape(n, -1, 3)
        alive &= inb.reshape(n, -1).all(axis=1)
        e = vals[:, :, 0] - tmpl
        Ix, Iy = vals[:, :, 1] / w, vals[:, :, 2] / w
        J = np.stack(
            [Ix * x, Ix * y, Iy * x, Iy * y, Ix, Iy, -(Ix * u + Iy * v) * x, -(Ix * u + Iy * v) * y],
            axis=-1,
        )
        JtJ = np.einsum("mpi,mpj->mij", J, J)
        JtJ += damping * np.maximum(np.trace(JtJ, axis1=1, axis2=2), 1e-12)[:, None, None]
        Jte = np.einsum("mpi,mp->mi", J, e)
        step = np.linalg.solve(JtJ, -Jte[..., None])[..., 0]
        step[~alive] = 0.0
        p += step
        if np.abs(step[:, 4:6]).max() < 1e-6:
            break
    u, v, w = warp(p)
    alive &= np.all(w > 0.1, axis=1)
    vals, inb = kernels.bilinear_sample(gj[:, :, None], u.reshape(-1), v.reshape(-1))
    alive &= inb.reshape(n, -1).all(axis=1) & np.all(np.isfinite(p), axis=1)
    wv = vals.reshape(n, -1)
    a = tmpl - tmpl.mean(axis=1, keepdims=True)
    b = wv - wv.mean(axis=1, keepdims=True)
    den = np.sqrt((a * a).sum(axis=1) * (b * b).sum(axis=1))
    score = np.where(alive & (den > 1e-12), (a * b).sum(axis=1) / np.maximum(den, 1e-300), -1.0)
    return p[:, 4:6].copy(), score


def extract_matches(img_i: Image, img_j: Image, mask: RegionMask = RegionMask(),
                    cfg: SfmConfig = SfmConfig(), view_i: int = 0, view_j: int = 1) -> CorrespondenceSet:
    """Corner + normalised-patch matching restricted to the overlap bands.

    Mutual nearest neighbours under normalised cross-correlation are refined
    to sub-pixel accuracy in view j around the integer keypoint of view i.
    """
    gi, gj = img_i.gray(), img_j.gray()
    margin = max(cfg.patch_radius + cfg.search_radius, cfg.lk_radius) + 1
    band_i = mask.band(mask.side_i, img_i.width)
    band_j = mask.band(mask.side_j, img_j.width)
    ki = detect_corners(gi, band_i, margin, cfg)
    kj = detect_corners(gj, band_j, margin, cfg)
    di, oki = patch_descriptors(gi, ki, cfg.patch_radius)
    dj, okj = patch_descriptors(gj, kj, cfg.patch_radius)
    ki, di = ki[oki], di[oki]
    kj, dj = kj[okj], dj[okj]
    empty = CorrespondenceSet(view_i, view_j)
    if len(ki) == 0 or len(kj) == 0:
        return empty
    sim = di @ dj.T
    best_j = np.argmax(sim, axis=1)
    best_i = np.argmax(sim, axis=0)
    mutual = best_i[best_j] == np.arange(len(ki))
    good = mutual & (sim[np.arange(len(ki)), best_j] >= cfg.min_score)
    if not good.any():
        return empty
    qi = ki[good]
    qj = kj[best_j[good]]
    u, v, score = kernels.ncc_refine(gi, gj, qi, qj, cfg.patch_radius, cfg.search_radius, num_threads())
    coarse = score >= cfg.min_score
    qi = qi[coarse]
    qj, score = refine_projective(gi, gj, qi, np.column_stack([u, v])[coarse], cfg.lk_radius)
    u, v = qj[:, 0], qj[:, 1]
    keep = (score >= cfg.min_score) & (u >= band_j[0]) & (u <= band_j[1]) & (v >= 0) & (v <= img_j.height - 1)
    return CorrespondenceSet(view_i, view_j, qi[keep].astype(np.float64), qj[keep], score[keep])


def epipolar_filter(c: CorrespondenceSet, F: FundamentalMatrix, gamma: float) -> CorrespondenceSet:
    """Keep exactly the pairs whose epipolar distance is at most ``gamma``; order preserved."""
    if len(c) == 0:
        return c
    return c.subset(epipolar_distances(F, c.q_i, c.q_j) <= gamma)


# -- triangulation ------------------------------------------------------------


def _normalized(cam: CameraModel, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(-1, 2)
    return np.column_stack([(q[:, 0] - cam.cx) / cam.fx, (q[:, 1] - cam.cy) / cam.fy, np.ones(len(q))])


def triangulate_many(q_i, q_j, cam_i: CameraModel, cam_j: CameraModel, rel: PoseSE3):
    """Linear two-view triangulation for ``(M, 2)`` pixel arrays.

    Returns camera-i points ``(M, 3)`` and a status array: 0 ok, 1 near-parallel
    rays, 2 behind a camera.
    """
    if np.linalg.norm(rel.translation) <= 1e-12:
        raise DegenerateGeometryError("zero baseline cannot be triangulated")
    xi = _normalized(cam_i, q_i)
    xj = _normalized(cam_j, q_j)
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([rel.rotation, rel.translation[:, None]])
    A = np.stack(
        [
            xi[:, 0, None] * P1[2] - P1[0],
            xi[:, 1, None] * P1[2] - P1[1],
            xj[:, 0, None] * P2[2] - P2[0],
            xj[:, 1, None] * P2[2] - P2[1],
        ],
        axis=1,
    )
    _, _, vt = np.linalg.svd(A)
    Xh = vt[:, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        X = Xh[:, :3] / Xh[:, 3:4]

    di = xi / np.linalg.norm(xi, axis=1, keepdims=True)
    dj = xj @ rel.rotation
    dj /= np.linalg.norm(dj, axis=1, keepdims=True)
    angle = np.degrees(np.arccos(np.clip(np.sum(di * dj, axis=1), -1.0, 1.0)))
    status = np.zeros(len(xi), dtype=np.int8)
    parallel = (angle < MIN_TRIANGULATION_ANGLE_DEG) | ~np.all(np.isfinite(X), axis=1)
    status[parallel] = 1
    Xj = rel.apply(np.where(parallel[:, None], 0.0, X))
    behind = ~parallel & ((X[:, 2] <= 0) | (Xj[:, 2] <= 0))
    status[behind] = 2
    return X, status


def triangulate(q_i: Pixel, q_j: Pixel, cam_i: CameraModel, cam_j: CameraModel, rel: PoseSE3) -> np.ndarray:
    """Camera-i point seen at ``q_i`` in view i and ``q_j`` in view j; its z is the depth."""
    X, status = triangulate_many([q_i], [q_j], cam_i, cam_j, rel)
    if status[0] == 1:
        raise DegenerateGeometryError("rays are near-parallel; triangulation is unstable")
    if status[0] == 2:
        raise BehindCameraError("triangulated point lies behind a camera")
    return X[0]


# -- pipeline -----------------------------------------------------------------


def generate_pseudo_depths(
    rig: CameraRig,
    images: Sequence[Image],
    cfg: SfmConfig = SfmConfig(),
    region: RegionMask = RegionMask(),
    matches: dict | None = None,
) -> list[SparsePseudoDepth]:
    """Sparse metric depths per view from every adjacent pair of the rig.

    ``matches`` optionally maps ``(i, j)`` to an externally computed
    :class:`CorrespondenceSet`, replacing the built-in matcher for that edge.
    Points are merged per view in (edge order, match order).
    """
    if len(images) != len(rig):
        raise ValueError(f"expected {len(rig)} images, got {len(images)}")
    pts: list[list] = [[] for _ in range(len(rig))]
    dep: list[list] = [[] for _ in range(len(rig))]
    for i, j in rig.adjacency:
        cam_i, cam_j = rig.cameras[i], rig.cameras[j]
        if matches is not None and (i, j) in matches:
            c = matches[(i, j)]
        elif cfg.detector == "file":
            logger.warning("no match file for edge (%d, %d); skipping", i, j)
            continue
        else:
            c = extract_matches(images[i], images[j], region, cfg, i, j)
        rel = relative_pose(rig, i, j)
        try:
            F = fundamental_matrix(cam_i, cam_j, rel)
        except DegenerateGeometryError:
            logger.warning("edge (%d, %d) has zero baseline; skipping", i, j)
            continue
        c = epipolar_filter(c, F, cfg.gamma_for(cam_i.width))
        if len(c) == 0:
            continue
        X, status = triangulate_many(c.q_i, c.q_j, cam_i, cam_j, rel)
        zi = X[:, 2]
        zj = rel.apply(np.where(status[:, None] == 0, X, 0.0))[:, 2]
        ok = (status == 0) & (zi >= cfg.min_depth) & (zi <= cfg.max_depth)
        ok &= (zj >= cfg.min_depth) & (zj <= cfg.max_depth)
        logger.debug("edge (%d, %d): %d matches, %d triangulated", i, j, len(c), int(ok.sum()))
        pts[i].append(c.q_i[ok])
        dep[i].append(zi[ok])
        pts[j].append(c.q_j[ok])
        dep[j].append(zj[ok])
    out = []
    for v in range(len(rig)):
        if pts[v]:
            out.append(SparsePseudoDepth(v, np.concatenate(pts[v]), np.concatenate(dep[v])))
        else:
            out.append(SparsePseudoDepth(v))
    return out


def pseudo_depth_loss(pred: DepthMap, sparse: SparsePseudoDepth) -> float:
    """Mean absolute error between bilinearly sampled predicted depth and pseudo depth."""
    if len(sparse) == 0:
        return 0.0
    stack = np.stack([pred.data, pred.valid.astype(np.float64)], axis=-1)
    vals, inb = kernels.bilinear_sample(stack, sparse.points[:, 0], sparse.points[:, 1])
    ok = inb & (vals[:, 1] >= 1.0 - 1e-12)
    if not ok.any():
        return 0.0
    return float(np.mean(np.abs(vals[ok, 0] - sparse.depth[ok])))


def load_matches(path) -> CorrespondenceSet:
    return CorrespondenceSet.from_dict(json.loads(Path(path).read_text()))


def save_matches(c: CorrespondenceSet, path) -> None:
    Path(path).write_text(json.dumps(c.to_dict()))


def save_pseudo_depth(s: SparsePseudoDepth, path) -> None:
    Path(path).write_text(json.dumps(s.to_dict()))


def load_pseudo_depth(path) -> SparsePseudoDepth:
    return SparsePseudoDepth.from_dict(json.loads(Path(path).read_text()))
