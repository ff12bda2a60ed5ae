"""Depth error metrics, median scaling and cross-view depth consistency."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ._backend import kernels, num_threads
from .geometry import CameraRig, relative_pose
from .photometric import DepthMap


@dataclass(frozen=True)
class DepthEvalResult:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int
    scale_factor: float = 1.0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EvalConfig:
    min_depth: float = 0.0
    max_depth: float = 200.0
    median_scaling: bool = True

    def __post_init__(self):
        if not self.min_depth < self.max_depth:
            raise ValueError("min_depth must be below max_depth")


class NoValidPixelsError(ValueError):
    pass


def _joint_valid(pred: DepthMap, gt: DepthMap) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    return pred.valid & gt.valid


def median_scale_factor(pred: DepthMap, gt: DepthMap) -> float:
    """``median(gt) / median(pred)`` over jointly valid pixels."""
    m = _joint_valid(pred, gt)
    if not m.any():
        raise NoValidPixelsError("no jointly valid pixels")
    return float(np.median(gt.data[m]) / np.median(pred.data[m]))


def depth_errors(pred: np.ndarray, gt: np.ndarray) -> tuple[float, ...]:
    """The seven standard errors for flattened, strictly positive depths."""
    ratio = np.maximum(pred / gt, gt / pred)
    diff = pred - gt
    abs_rel = float(np.mean(np.abs(diff) / gt))
    sq_rel = float(np.mean(diff**2 / gt))
    rmse = float(np.sqrt(np.mean(diff**2)))
    rmse_log = float(np.sqrt(np.mean((np.log(pred) - np.log(gt)) ** 2)))
    d1 = float(np.mean(ratio < 1.25))
    d2 = float(np.mean(ratio < 1.25**2))
    d3 = float(np.mean(ratio < 1.25**3))
    return abs_rel, sq_rel, rmse, rmse_log, d1, d2, d3


def evaluate_depth(pred: DepthMap, gt: DepthMap, cfg: EvalConfig = EvalConfig()) -> DepthEvalResult:
    m = _joint_valid(pred, gt) & (gt.data > cfg.min_depth) & (gt.data <= cfg.max_depth)
    if not m.any():
        raise NoValidPixelsError("no valid pixels inside the evaluation range")
    p = pred.data[m]
    g = gt.data[m]
    scale = 1.0
    if cfg.median_scaling:
        scale = float(np.median(g) / np.median(p))
        p = p * scale
    return DepthEvalResult(*depth_errors(p, g), n_pixels=int(m.sum()), scale_factor=scale)


def mean_results(results: Sequence[DepthEvalResult]) -> DepthEvalResult:
    """Field-wise average over views; ``n_pixels`` is summed."""
    if not results:
        raise ValueError("nothing to average")
    keys = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")
    avg = {k: float(np.mean([getattr(r, k) for r in results])) for k in keys}
    return DepthEvalResult(
        **avg,
        n_pixels=int(sum(r.n_pixels for r in results)),
        scale_factor=float(np.mean([r.scale_factor for r in results])),
    )


@dataclass(frozen=True)
class PairConsistency:
    i: int
    j: int
    abs_rel: float | None
    n_pixels: int


@dataclass(frozen=True)
class ConsistencyReport:
    pairs: tuple[PairConsistency, ...]
    mean: float | None

    def as_dict(self) -> dict:
        return {"pairs": [asdict(p) for p in self.pairs], "mean": self.mean}


def _sample_valid(depth: DepthMap, u: np.ndarray, v: np.ndarray):
    """Bilinear depth lookup; valid only when every contributing neighbour is valid."""
    stack = np.stack([depth.data, depth.valid.astype(np.float64)], axis=-1)
    vals, inb = kernels.bilinear_sample(stack, u, v, num_threads())
    ok = inb & (vals[:, 1] >= 1.0 - 1e-12)
    return vals[:, 0], ok


def pair_consistency(rig: CameraRig, depths: Sequence[DepthMap], i: int, j: int) -> PairConsistency:
    """Abs Rel between view-i depth carried into view j and view j's own depth."""
    di = depths[i]
    cam_i, cam_j = rig.cameras[i], rig.cameras[j]
    rel = relative_pose(rig, i, j)
    if not di.valid.any():
        return PairConsistency(i, j, None, 0)
    su, sv, ok, z = kernels.warp_coords(di.data, di.valid, cam_i.K_inv, rel.rotation, rel.translation,
                                        cam_j.K, num_threads())
    su, sv, z = su[ok], sv[ok], z[ok]
    dj, hit = _sample_valid(depths[j], su, sv)
    if not hit.any():
        return PairConsistency(i, j, None, 0)
    err = np.abs(z[hit] - dj[hit]) / dj[hit]
    return PairConsistency(i, j, float(err.mean()), int(hit.sum()))


def depth_consistency(rig: CameraRig, depths: Sequence[DepthMap]) -> ConsistencyReport:
    """Cross-view consistency for every adjacency pair; ``mean`` averages the pairs with overlap."""
    if len(depths) != len(rig):
        raise ValueError(f"expected {len(rig)} depth maps, got {len(depths)}")
    for cam, d in zip(rig.cameras, depths):
        if d.shape != (cam.height, cam.width):
            raise ValueError("depth map does not match its camera")
    pairs = tuple(pair_consistency(rig, depths, i, j) for i, j in rig.adjacency)
    scored = [p.abs_rel for p in pairs if p.abs_rel is not None]
    return ConsistencyReport(pairs, float(np.mean(scored)) if scored else None)
