"""Image warping and the self-supervised photometric objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._backend import kernels, num_threads
from .geometry import CameraModel, Pixel, PoseSE3

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True, eq=False)
class Image:
    """Row-major (H, W, C) float image with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        a = np.array(self.data, dtype=np.float64)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[2] not in (1, 3) or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"image must be HxW, HxWx1 or HxWx3, got {np.shape(self.data)}")
        if not np.all(np.isfinite(a)):
            raise ValueError("image contains non-finite values")
        if a.min() < 0.0 or a.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape[:2]

    def gray(self) -> np.ndarray:
        return self.data.mean(axis=2)


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Metric depth with a validity mask; invalid entries are stored as 0."""

    data: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got shape {d.shape}")
        ok = np.isfinite(d) & (d > 0)
        if self.valid is not None:
            v = np.asarray(self.valid, dtype=bool)
            if v.shape != d.shape:
                raise ValueError("validity mask shape mismatch")
            ok &= v
        d = np.where(ok, d, 0.0)
        d.setflags(write=False)
        ok.setflags(write=False)
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "valid", ok)

    @property
    def shape(self):
        return self.data.shape

    def scaled(self, s: float) -> "DepthMap":
        return DepthMap(self.data * s, self.valid)


@dataclass(frozen=True, eq=False)
class OcclusionMask:
    weight: np.ndarray

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64)
        if w.ndim != 2 or not np.all(np.isfinite(w)) or w.min() < 0 or w.max() > 1:
            raise ValueError("occlusion weights must be a 2-D array in [0, 1]")
        w.setflags(write=False)
        object.__setattr__(self, "weight", w)

    @classmethod
    def ones(cls, height: int, width: int) -> "OcclusionMask":
        return cls(np.ones((height, width)))


@dataclass(frozen=True)
class LossConfig:
    ssim_weight: float = 0.85
    smoothness_weight: float = 1e-3
    ssim_window: int = 3
    min_reprojection: bool = True
    # spatial and temporal reconstructions share one per-pixel minimum
    joint_min: bool = True

    def __post_init__(self):
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise ValueError("ssim_weight must be in [0, 1]")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be odd and >= 3")
        if self.smoothness_weight < 0:
            raise ValueError("smoothness_weight must be non-negative")


def _same_shape(a: Image, b: Image):
    if a.data.shape != b.data.shape:
        raise ValueError(f"image shapes differ: {a.data.shape} vs {b.data.shape}")


def bilinear_sample(img: Image, p: Pixel) -> tuple[np.ndarray, bool]:
    vals, ok = kernels.bilinear_sample(img.data, [p[0]], [p[1]])
    return vals[0], bool(ok[0])


def warp_image(
    src: Image, tgt_depth: DepthMap, cam_tgt: CameraModel, cam_src: CameraModel, rel: PoseSE3
) -> tuple[Image, np.ndarray]:
    """Reconstruct the target view from ``src`` using target depth.

    ``rel`` maps target-camera coordinates into source-camera coordinates.
    Returns the reconstruction and a mask that is False where depth is
    invalid, the point falls behind the source camera, or it lands outside
    the source image.
    """
    if tgt_depth.shape != (cam_tgt.height, cam_tgt.width):
        raise ValueError(f"depth {tgt_depth.shape} does not match target camera {cam_tgt.height}x{cam_tgt.width}")
    if src.shape != (cam_src.height, cam_src.width):
        raise ValueError(f"source image {src.shape} does not match source camera {cam_src.height}x{cam_src.width}")
    out, mask = kernels.warp_sample(
        src.data, tgt_depth.data, tgt_depth.valid, cam_tgt.K_inv, rel.rotation,
        rel.translation, cam_src.K, num_threads(),
    )
    return Image(np.clip(out, 0.0, 1.0)), mask


def ssim(a: Image, b: Image, window: int = 3) -> np.ndarray:
    """Per-pixel, per-channel SSIM over a box window with reflection padding."""
    _same_shape(a, b)
    r = window // 2
    H, W, C = a.data.shape
    if r >= H or r >= W:
        raise ValueError("image too small for the SSIM window")
    out = np.empty((H, W, C))
    nt = num_threads()
    for c in range(C):
        x = a.data[:, :, c]
        y = b.data[:, :, c]
        mx = kernels.box_mean(x, r, nt)
        my = kernels.box_mean(y, r, nt)
        sx = kernels.box_mean(x * x, r, nt) - mx * mx
        sy = kernels.box_mean(y * y, r, nt) - my * my
        sxy = kernels.box_mean(x * y, r, nt) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sx + sy + SSIM_C2)
        out[:, :, c] = num / den
    return np.clip(out, -1.0, 1.0)


def photometric_error(tgt: Image, recon: Image, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """``a * (1 - SSIM) / 2 + (1 - a) * |tgt - recon|``, averaged over channels."""
    _same_shape(tgt, recon)
    l1 = np.abs(tgt.data - recon.data).mean(axis=2)
    if cfg.ssim_weight == 0.0:
        return l1
    dssim = np.clip((1.0 - ssim(tgt, recon, cfg.ssim_window)) / 2.0, 0.0, 1.0).mean(axis=2)
    return cfg.ssim_weight * dssim + (1.0 - cfg.ssim_weight) * l1


def window_valid(valid: np.ndarray, window: int) -> np.ndarray:
    """Pixels whose whole SSIM window (reflection padded) is valid."""
    v = np.asarray(valid, dtype=np.float64)
    if window <= 1:
        return v > 0.5
    return kernels.box_mean(v, window // 2, num_threads()) >= 1.0 - 1e-12


def _error_stack(tgt, recons, cfg):
    errs = []
    for recon, valid in recons:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != tgt.shape:
            raise ValueError("validity mask does not match target image")
        if cfg.ssim_weight > 0:
            # SSIM next to invalid pixels would read the zero fill of the reconstruction
            valid = window_valid(valid, cfg.ssim_window)
        errs.append(np.where(valid, photometric_error(tgt, recon, cfg), np.inf))
    return np.stack(errs)


def _reduce(errs: np.ndarray, cfg: LossConfig) -> np.ndarray:
    finite = np.isfinite(errs)
    if cfg.min_reprojection:
        return errs.min(axis=0)
    cnt = finite.sum(axis=0)
    tot = np.where(finite, errs, 0.0).sum(axis=0)
    return np.where(cnt > 0, tot / np.maximum(cnt, 1), np.inf)


def _masked_mean(per_pixel: np.ndarray, mask: OcclusionMask | None) -> float:
    covered = np.isfinite(per_pixel)
    if not covered.any():
        return 0.0
    w = 1.0 if mask is None else mask.weight
    weighted = np.where(covered, per_pixel * w, 0.0)
    return float(weighted.sum() / covered.sum())


def min_reprojection_loss(
    tgt: Image,
    recons: Sequence[tuple[Image, np.ndarray]],
    mask: OcclusionMask | None = None,
    cfg: LossConfig = LossConfig(),
) -> float:
    """Per-pixel minimum error over the valid reconstructions, reweighted and averaged.

    A reconstruction counts at a pixel only when its whole SSIM window is
    valid there (when the SSIM term is active). The average runs over pixels
    that at least one reconstruction covers.
    """
    if not recons:
        raise ValueError("at least one reconstruction is required")
    if mask is not None and mask.weight.shape != tgt.shape:
        raise ValueError("occlusion mask does not match target image")
    return _masked_mean(_reduce(_error_stack(tgt, recons, cfg), cfg), mask)


def smoothness_loss(depth: DepthMap, img: Image) -> float:
    """Edge-aware first-order smoothness of mean-normalised disparity."""
    if depth.shape != img.shape:
        raise ValueError(f"depth {depth.shape} and image {img.shape} differ in size")
    valid = depth.valid
    if not valid.any():
        raise ValueError("depth map has no valid pixels")
    disp = np.where(valid, 1.0 / np.where(valid, depth.data, 1.0), 0.0)
    disp = disp / disp[valid].mean()

    gx = np.abs(disp[:, 1:] - disp[:, :-1])
    gy = np.abs(disp[1:, :] - disp[:-1, :])
    ix = np.abs(img.data[:, 1:] - img.data[:, :-1]).mean(axis=2)
    iy = np.abs(img.data[1:, :] - img.data[:-1, :]).mean(axis=2)
    vx = valid[:, 1:] & valid[:, :-1]
    vy = valid[1:, :] & valid[:-1, :]

    loss = 0.0
    if vx.any():
        loss += float((gx * np.exp(-ix))[vx].mean())
    if vy.any():
        loss += float((gy * np.exp(-iy))[vy].mean())
    return loss


def total_loss(
    temporal: Sequence[tuple[Image, np.ndarray]],
    spatial: Sequence[tuple[Image, np.ndarray]],
    depth: DepthMap,
    img: Image,
    mask: OcclusionMask | None = None,
    cfg: LossConfig = LossConfig(),
) -> tuple[float, dict]:
    """Photometric term over temporal and spatial reconstructions plus weighted smoothness."""
    temporal, spatial = list(temporal), list(spatial)
    if not temporal and not spatial:
        raise ValueError("at least one reconstruction is required")
    if cfg.joint_min:
        photo = min_reprojection_loss(img, temporal + spatial, mask, cfg)
    else:
        photo = sum(min_reprojection_loss(img, part, mask, cfg) for part in (temporal, spatial) if part)
    smooth = smoothness_loss(depth, img)
    total = photo + cfg.smoothness_weight * smooth
    return total, {"photometric": photo, "smoothness": smooth, "total": total}
