# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Mirrors ``_kernels_py`` call-for-call."""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport floor, sqrt, isfinite

cnp.import_array()

BACKEND = "cython"

# samples this close outside the image snap onto the border (absorbs round-off)
cdef double BORDER_EPS = 1e-9


cdef inline int _threads(int n) noexcept nogil:
    return n if n > 0 else 1


cdef inline bint _sample(const double[:, :, ::1] img, double u, double v,
                         double[:, ::1] out, Py_ssize_t row) noexcept nogil:
    cdef Py_ssize_t H = img.shape[0], W = img.shape[1], C = img.shape[2]
    cdef Py_ssize_t x0, y0, x1, y1, c
    cdef double ax, ay, top, bot
    if not (u >= -BORDER_EPS and u <= W - 1 + BORDER_EPS and v >= -BORDER_EPS and v <= H - 1 + BORDER_EPS):
        for c in range(C):
            out[row, c] = 0.0
        return False
    u = min(max(u, 0.0), W - 1.0)
    v = min(max(v, 0.0), H - 1.0)
    x0 = <Py_ssize_t>floor(u)
    y0 = <Py_ssize_t>floor(v)
    if x0 > W - 2:
        x0 = W - 2 if W > 1 else 0
    if y0 > H - 2:
        y0 = H - 2 if H > 1 else 0
    ax = u - x0
    ay = v - y0
    x1 = x0 + 1 if x0 + 1 < W else W - 1
    y1 = y0 + 1 if y0 + 1 < H else H - 1
    for c in range(C):
        top = img[y0, x0, c] * (1.0 - ax) + img[y0, x1, c] * ax
        bot = img[y1, x0, c] * (1.0 - ax) + img[y1, x1, c] * ax
        out[row, c] = top * (1.0 - ay) + bot * ay
    return True


def bilinear_sample(img, u, v, int num_threads=0):
    cdef const double[:, :, ::1] im = np.ascontiguousarray(img, dtype=np.float64)
    cdef const double[::1] uu = np.ascontiguousarray(u, dtype=np.float64).reshape(-1)
    cdef const double[::1] vv = np.ascontiguousarray(v, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t n = uu.shape[0], m
    out = np.zeros((n, im.shape[2]))
    valid = np.zeros(n, dtype=np.uint8)
    cdef double[:, ::1] o = out
    cdef unsigned char[::1] ok = valid
    for m in prange(n, nogil=True, num_threads=_threads(num_threads), schedule="static"):
        ok[m] = _sample(im, uu[m], vv[m], o, m)
    return out, valid.astype(bool)


cdef inline bint _warp_one(Py_ssize_t y, Py_ssize_t x, double d, bint dvalid,
                           const double[:, ::1] Ki, const double[:, ::1] R,
                           const double[::1] t, const double[:, ::1] Ks,
                           double* su, double* sv, double* sz) noexcept nogil:
    cdef double u = x, v = y
    cdef double rx, ry, rz, X, Y, Z, px, py, pz, xn, yn
    if not (dvalid and isfinite(d) and d > 0):
        su[0] = -1.0
        sv[0] = -1.0
        sz[0] = 0.0
        return False
    rx = Ki[0, 0] * u + Ki[0, 1] * v + Ki[0, 2]
    ry = Ki[1, 0] * u + Ki[1, 1] * v + Ki[1, 2]
    rz = Ki[2, 0] * u + Ki[2, 1] * v + Ki[2, 2]
    X = rx * d
    Y = ry * d
    Z = rz * d
    px = R[0, 0] * X + R[0, 1] * Y + R[0, 2] * Z + t[0]
    py = R[1, 0] * X + R[1, 1] * Y + R[1, 2] * Z + t[1]
    pz = R[2, 0] * X + R[2, 1] * Y + R[2, 2] * Z + t[2]
    if not pz > 0:
        su[0] = -1.0
        sv[0] = -1.0
        sz[0] = 0.0
        return False
    xn = px / pz
    yn = py / pz
    su[0] = Ks[0, 0] * xn + Ks[0, 1] * yn + Ks[0, 2]
    sv[0] = Ks[1, 0] * xn + Ks[1, 1] * yn + Ks[1, 2]
    sz[0] = pz
    return True


def warp_coords(depth, valid, Kt_inv, R, t, Ks, int num_threads=0):
    cdef const double[:, ::1] dep = np.ascontiguousarray(depth, dtype=np.float64)
    cdef const unsigned char[:, ::1] val = np.ascontiguousarray(valid, dtype=np.uint8)
    cdef const double[:, ::1] Ki = np.ascontiguousarray(Kt_inv, dtype=np.float64)
    cdef const double[:, ::1] Rm = np.ascontiguousarray(R, dtype=np.float64)
    cdef const double[::1] tv = np.ascontiguousarray(t, dtype=np.float64)
    cdef const double[:, ::1] Km = np.ascontiguousarray(Ks, dtype=np.float64)
    cdef Py_ssize_t H = dep.shape[0], W = dep.shape[1], y, x
    su = np.empty((H, W))
    sv = np.empty((H, W))
    sz = np.empty((H, W))
    ok = np.zeros((H, W), dtype=np.uint8)
    cdef double[:, ::1] a = su
    cdef double[:, ::1] b = sv
    cdef double[:, ::1] c = sz
    cdef unsigned char[:, ::1] o = ok
    for y in prange(H, nogil=True, num_threads=_threads(num_threads), schedule="static"):
        for x in range(W):
            o[y, x] = _warp_one(y, x, dep[y, x], val[y, x], Ki, Rm, tv, Km,
                                &a[y, x], &b[y, x], &c[y, x])
    return su, sv, ok.astype(bool), sz


def warp_sample(src, depth, valid, Kt_inv, R, t, Ks, int num_threads=0):
    cdef const double[:, :, ::1] im = np.ascontiguousarray(src, dtype=np.float64)
    cdef const double[:, ::1] dep = np.ascontiguousarray(depth, dtype=np.float64)
    cdef const unsigned char[:, ::1] val = np.ascontiguousarray(valid, dtype=np.uint8)
    cdef const double[:, ::1] Ki = np.ascontiguousarray(Kt_inv, dtype=np.float64)
    cdef const double[:, ::1] Rm = np.ascontiguousarray(R, dtype=np.float64)
    cdef const double[::1] tv = np.ascontiguousarray(t, dtype=np.float64)
    cdef const double[:, ::1] Km = np.ascontiguousarray(Ks, dtype=np.float64)
    cdef Py_ssize_t H = dep.shape[0], W = dep.shape[1], C = im.shape[2], y, x, row
    cdef double su, sv, sz
    out = np.zeros((H * W, C))
    mask = np.zeros(H * W, dtype=np.uint8)
    cdef double[:, ::1] o = out
    cdef unsigned char[::1] mk = mask
    cdef bint hit
    for y in prange(H, nogil=True, num_threads=_threads(num_threads), schedule="static"):
        for x in range(W):
            row = y * W + x
            hit = _warp_one(y, x, dep[y, x], val[y, x], Ki, Rm, tv, Km, &su, &sv, &sz)
            if hit:
                mk[row] = _sample(im, su, sv, o, row)
    return out.reshape(H, W, C), mask.reshape(H, W).astype(bool)


def box_mean(x, int radius, int num_threads=0):
    cdef int r = radius
    if r == 0:
        return np.array(x, dtype=np.float64, copy=True)
    cdef const double[:, ::1] p = np.ascontiguousarray(np.pad(np.asarray(x, dtype=np.float64), r, mode="reflect"))
    cdef Py_ssize_t H = p.shape[0] - 2 * r, W = p.shape[1] - 2 * r, y, xx
    cdef int dy, dx, k = 2 * r + 1
    cdef double acc
    out = np.empty((H, W))
    cdef double[:, ::1] o = out
    for y in prange(H, nogil=True, num_threads=_threads(num_threads), schedule="static"):
        for xx in range(W):
            acc = 0.0
            for dy in range(k):
                for dx in range(k):
                    acc = acc + p[y + dy, xx + dx]
            o[y, xx] = acc / (k * k)
    return out


cdef double _ncc(const double[:, ::1] gi, Py_ssize_t ui, Py_ssize_t vi,
                 const double[:, ::1] gj, Py_ssize_t uj, Py_ssize_t vj, int r) noexcept nogil:
    cdef Py_ssize_t dy, dx
    cdef double ma = 0.0, mb = 0.0, sab = 0.0, saa = 0.0, sbb = 0.0, a, b, den
    cdef double n = (2 * r + 1) * (2 * r + 1)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            ma += gi[vi + dy, ui + dx]
            mb += gj[vj + dy, uj + dx]
    ma /= n
    mb /= n
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            a = gi[vi + dy, ui + dx] - ma
            b = gj[vj + dy, uj + dx] - mb
            sab += a * b
            saa += a * a
            sbb += b * b
    den = sqrt(saa * sbb)
    if den <= 1e-12:
        return -1.0
    return sab / den


cdef inline double _parabola(double cm, double c0, double cp) noexcept nogil:
    cdef double den = cm - 2.0 * c0 + cp, off
    if den >= 0.0:
        return 0.0
    off = 0.5 * (cm - cp) / den
    if off < -0.5:
        return -0.5
    if off > 0.5:
        return 0.5
    return off


def ncc_refine(gi, gj, qi, qj, int radius, int search, int num_threads=0):
    cdef const double[:, ::1] a = np.ascontiguousarray(gi, dtype=np.float64)
    cdef const double[:, ::1] b = np.ascontiguousarray(gj, dtype=np.float64)
    cdef const Py_ssize_t[:, ::1] pi = np.ascontiguousarray(np.asarray(qi).reshape(-1, 2), dtype=np.intp)
    cdef const Py_ssize_t[:, ::1] pj = np.ascontiguousarray(np.asarray(qj).reshape(-1, 2), dtype=np.intp)
    cdef Py_ssize_t n = pi.shape[0], m
    cdef int s = search, k = 2 * search + 1, dy, dx, bx, by
    uo = np.zeros(n)
    vo = np.zeros(n)
    score = np.full(n, -1.0)
    corr = np.empty((n, k, k))
    cdef double[::1] u_o = uo
    cdef double[::1] v_o = vo
    cdef double[::1] sc = score
    cdef double[:, :, ::1] c = corr
    cdef double c0, fx, fy
    for m in prange(n, nogil=True, num_threads=_threads(num_threads), schedule="static"):
        bx = 0
        by = 0
        for dy in range(k):
            for dx in range(k):
                c[m, dy, dx] = _ncc(a, pi[m, 0], pi[m, 1], b, pj[m, 0] + dx - s, pj[m, 1] + dy - s, radius)
                if c[m, dy, dx] > c[m, by, bx]:
                    by = dy
                    bx = dx
        c0 = c[m, by, bx]
        fx = 0.0
        fy = 0.0
        if c0 < 1.0 - 1e-12:
            if bx > 0 and bx < k - 1:
                fx = _parabola(c[m, by, bx - 1], c0, c[m, by, bx + 1])
            if by > 0 and by < k - 1:
                fy = _parabola(c[m, by - 1, bx], c0, c[m, by + 1, bx])
        u_o[m] = pj[m, 0] + (bx - s) + fx
        v_o[m] = pj[m, 1] + (by - s) + fy
        sc[m] = c0
    return uo, vo, score
