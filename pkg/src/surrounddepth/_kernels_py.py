"""Pure numpy implementations of the hot kernels.

Semantics are shared with the compiled ``_kernels`` extension; both are
exercised by the test-suite and must agree to round-off.
"""

import numpy as np

BACKEND = "python"

# samples this close outside the image snap onto the border (absorbs round-off)
BORDER_EPS = 1e-9


def bilinear_sample(img, u, v, num_threads=0):
    """Sample ``img`` (H, W, C) at sub-pixel ``(u, v)``.

    A sample is valid when it lies inside ``[0, W-1] x [0, H-1]`` (up to
    ``BORDER_EPS``); invalid samples are returned as 0.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    H, W, C = img.shape
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    e = BORDER_EPS
    valid = (u >= -e) & (u <= W - 1 + e) & (v >= -e) & (v <= H - 1 + e)
    out = np.zeros((u.size, C))
    if not valid.any():
        return out, valid
    uu = np.clip(u[valid], 0.0, W - 1.0)
    vv = np.clip(v[valid], 0.0, H - 1.0)
    x0 = np.minimum(np.floor(uu), max(W - 2, 0)).astype(np.intp)
    y0 = np.minimum(np.floor(vv), max(H - 2, 0)).astype(np.intp)
    ax = (uu - x0)[:, None]
    ay = (vv - y0)[:, None]
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    top = img[y0, x0] * (1.0 - ax) + img[y0, x1] * ax
    bot = img[y1, x0] * (1.0 - ax) + img[y1, x1] * ax
    out[valid] = top * (1.0 - ay) + bot * ay
    return out, valid


def warp_coords(depth, valid, Kt_inv, R, t, Ks, num_threads=0):
    """Per-pixel target -> source coordinates through depth and a rigid transform."""
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    vs, us = np.mgrid[0:H, 0:W].astype(np.float64)
    ok = np.asarray(valid, dtype=bool) & np.isfinite(depth) & (depth > 0)
    d = np.where(ok, depth, 1.0)
    rx = Kt_inv[0, 0] * us + Kt_inv[0, 1] * vs + Kt_inv[0, 2]
    ry = Kt_inv[1, 0] * us + Kt_inv[1, 1] * vs + Kt_inv[1, 2]
    rz = Kt_inv[2, 0] * us + Kt_inv[2, 1] * vs + Kt_inv[2, 2]
    X = rx * d
    Y = ry * d
    Z = rz * d
    px = R[0, 0] * X + R[0, 1] * Y + R[0, 2] * Z + t[0]
    py = R[1, 0] * X + R[1, 1] * Y + R[1, 2] * Z + t[1]
    pz = R[2, 0] * X + R[2, 1] * Y + R[2, 2] * Z + t[2]
    ok &= pz > 0
    pz = np.where(ok, pz, 1.0)
    xn = px / pz
    yn = py / pz
    su = Ks[0, 0] * xn + Ks[0, 1] * yn + Ks[0, 2]
    sv = Ks[1, 0] * xn + Ks[1, 1] * yn + Ks[1, 2]
    su = np.where(ok, su, -1.0)
    sv = np.where(ok, sv, -1.0)
    return su, sv, ok, np.where(ok, pz, 0.0)


def warp_sample(src, depth, valid, Kt_inv, R, t, Ks, num_threads=0):
    """Dense inverse warp: for each target pixel, sample ``src`` where it lands."""
    H, W = np.asarray(depth).shape
    su, sv, ok, _ = warp_coords(depth, valid, Kt_inv, R, t, Ks)
    vals, inb = bilinear_sample(src, su.reshape(-1), sv.reshape(-1))
    mask = ok.reshape(-1) & inb
    vals[~mask] = 0.0
    return vals.reshape(H, W, -1), mask.reshape(H, W)


def box_mean(x, radius, num_threads=0):
    """Mean over a (2r+1)^2 window with reflection padding (edge not repeated)."""
    x = np.asarray(x, dtype=np.float64)
    r = int(radius)
    if r == 0:
        return x.copy()
    H, W = x.shape
    p = np.pad(x, r, mode="reflect")
    k = 2 * r + 1
    out = np.zeros((H, W))
    for dy in range(k):
        for dx in range(k):
            out += p[dy:dy + H, dx:dx + W]
    return out / (k * k)


def _ncc(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    if den <= 1e-12:
        return -1.0
    return float((a * b).sum() / den)


def _parabola(cm, c0, cp):
    den = cm - 2.0 * c0 + cp
    if den >= 0.0:
        return 0.0
    off = 0.5 * (cm - cp) / den
    return min(max(off, -0.5), 0.5)


def ncc_refine(gi, gj, qi, qj, radius, search, num_threads=0):
    """Sub-pixel location in ``gj`` of the patch centred at each integer ``qi``.

    Integer search over a ``(2*search+1)^2`` neighbourhood of ``qj`` followed by
    separable parabola fitting of the correlation peak. A perfect correlation
    is taken as the exact location.
    """
    gi = np.asarray(gi, dtype=np.float64)
    gj = np.asarray(gj, dtype=np.float64)
    qi = np.asarray(qi, dtype=np.intp).reshape(-1, 2)
    qj = np.asarray(qj, dtype=np.intp).reshape(-1, 2)
    r, s = int(radius), int(search)
    n = len(qi)
    uo = np.zeros(n)
    vo = np.zeros(n)
    score = np.full(n, -1.0)
    k = 2 * s + 1
    for m in range(n):
        ui, vi = qi[m]
        uj, vj = qj[m]
        a = gi[vi - r:vi + r + 1, ui - r:ui + r + 1]
        c = np.empty((k, k))
        for dy in range(-s, s + 1):
            for dx in range(-s, s + 1):
                y, x = vj + dy, uj + dx
                c[dy + s, dx + s] = _ncc(a, gj[y - r:y + r + 1, x - r:x + r + 1])
        best = int(np.argmax(c))
        by, bx = divmod(best, k)
        c0 = c[by, bx]
        fx = fy = 0.0
        if c0 < 1.0 - 1e-12:
            if 0 < bx < k - 1:
                fx = _parabola(c[by, bx - 1], c0, c[by, bx + 1])
            if 0 < by < k - 1:
                fy = _parabola(c[by - 1, bx], c0, c[by + 1, bx])
        uo[m] = uj + (bx - s) + fx
        vo[m] = vj + (by - s) + fy
        score[m] = c0
    return uo, vo, score
