"""Small shared utilities for the test-suite."""

import math

import numpy as np

from surrounddepth.geometry import CameraModel, PoseSE3, backproject, project, random_pose, relative_pose
from surrounddepth.photometric import warp_image
from surrounddepth.sfm import CorrespondenceSet


def pose_from_seed(seed: int, max_translation: float = 5.0) -> PoseSE3:
    return random_pose(np.random.default_rng(seed), max_translation)


def stereo_pair(baseline: float = 1.0):
    """Two identical cameras, view j displaced by ``baseline`` along +x."""
    cam = CameraModel(100.0, 100.0, 50.0, 50.0, 101, 101)
    rel = PoseSE3(np.eye(3), np.array([-baseline, 0.0, 0.0]))
    return cam, rel


def random_visible_config(seed: int):
    """A random camera pair, pixel and depth whose point is in front of both cameras."""
    rng = np.random.default_rng(seed)
    cam_i = CameraModel(*rng.uniform(80, 400, 2), *rng.uniform(40, 200, 2), 320, 240)
    cam_j = CameraModel(*rng.uniform(80, 400, 2), *rng.uniform(40, 200, 2), 320, 240)
    while True:
        rel = random_pose(rng, 1.0)
        # keep the second camera looking roughly the same way
        if rel.rotation[2, 2] > 0.7:
            break
    while True:
        p = (rng.uniform(0, cam_i.width - 1), rng.uniform(0, cam_i.height - 1))
        d = rng.uniform(2.0, 50.0)
        X = np.array([(p[0] - cam_i.cx) / cam_i.fx * d, (p[1] - cam_i.cy) / cam_i.fy * d, d])
        if rel.apply(X)[2] > 0.5:
            return cam_i, cam_j, rel, p, d


def gt_matches(rig, frames, i, j, stride=7):
    """Noise-free correspondences for edge (i, j) from the rendered depth of view i."""
    cam_i, cam_j = rig.cameras[i], rig.cameras[j]
    rel = relative_pose(rig, i, j)
    depth = frames[i][1].data
    qi, qj = [], []
    for v in range(3, cam_i.height - 3, stride):
        for u in range(3, cam_i.width - 3, stride):
            X = rel.apply(backproject(cam_i, (u, v), depth[v, u]))
            if X[2] <= 0:
                continue
            p = project(cam_j, X)
            if 0 <= p.u <= cam_j.width - 1 and 0 <= p.v <= cam_j.height - 1:
                qi.append((u, v))
                qj.append(p)
    return CorrespondenceSet(i, j, qi, qj, np.ones(len(qi)))


def reconstructions(seq, rig, view, t, depth):
    """Temporal (neighbouring steps) and spatial (adjacent views) reconstructions of ``view`` at ``t``."""
    cam = rig.cameras[view]
    temporal = []
    for s in (t - 1, t + 1):
        src = seq.frames[s][view][0]
        temporal.append(warp_image(src, depth, cam, cam, seq.camera_motion(view, t, s)))
    spatial = []
    for i, j in rig.adjacency:
        other = j if i == view else i if j == view else None
        if other is not None:
            src = seq.frames[t][other][0]
            spatial.append(warp_image(src, depth, cam, rig.cameras[other], relative_pose(rig, view, other)))
    return temporal, spatial


def naive_median(values):
    s = sorted(values)
    n = len(s)
    return s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2


def naive_depth_metrics(pred, gt, valid, lo, hi, scaling):
    """Loop-by-loop metric evaluation kept independent of the vectorised code."""
    p, g = [], []
    for r in range(pred.shape[0]):
        for c in range(pred.shape[1]):
            if valid[r][c] and lo < gt[r][c] <= hi:
                p.append(float(pred[r][c]))
                g.append(float(gt[r][c]))
    if scaling:
        s = naive_median(g) / naive_median(p)
        p = [x * s for x in p]
    n = len(p)
    abs_rel = sum(abs(a - b) / b for a, b in zip(p, g)) / n
    sq_rel = sum((a - b) ** 2 / b for a, b in zip(p, g)) / n
    rmse = math.sqrt(sum((a - b) ** 2 for a, b in zip(p, g)) / n)
    rmse_log = math.sqrt(sum((math.log(a) - math.log(b)) ** 2 for a, b in zip(p, g)) / n)
    deltas = []
    for t in (1.25, 1.25**2, 1.25**3):
        deltas.append(sum(1 for a, b in zip(p, g) if max(a / b, b / a) < t) / n)
    return (abs_rel, sq_rel, rmse, rmse_log, *deltas)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []
