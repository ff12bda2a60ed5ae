"""Cross-view transformer block in float64 numpy.

The block summarises multi-view features with a depthwise separable
convolution, adds view/row/column positional encodings, runs ``Z`` stacked
multi-head self-attention units over the tokens of *all* views together,
restores the resolution with a depthwise separable transposed convolution and
adds the input back. The attention core has a hand-written backward pass
that the gradient checker compares against central differences.

Feature tensors are ``(N, H, W, d)`` arrays (views, rows, columns, channels).
Linear maps act on row vectors: ``Q = X @ w_q``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import raster


@dataclass(frozen=True)
class CvtConfig:
    layers: int = 8
    target_h: int = 20
    target_w: int = 12
    heads: int = 4
    kernel: int = 3

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one attention layer")
        if self.target_h < 1 or self.target_w < 1:
            raise ValueError("target grid must be at least 1x1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")

    @property
    def padding(self) -> int:
        return self.kernel // 2


@dataclass
class PositionalEncodings:
    pe_n: np.ndarray
    pe_h: np.ndarray
    pe_w: np.ndarray


@dataclass
class AttentionParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    heads: int = 1

    def __post_init__(self):
        d = self.w_q.shape[0]
        for w in (self.w_q, self.w_k, self.w_v):
            if w.shape != (d, d):
                raise ValueError(f"projection must be {d}x{d}, got {w.shape}")
            if not np.all(np.isfinite(w)):
                raise ValueError("projection weights must be finite")
        if self.heads < 1 or d % self.heads:
            raise ValueError(f"{self.heads} heads do not divide {d} channels")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]


@dataclass
class DSConvParams:
    depthwise: np.ndarray  # (d, k, k)
    pointwise: np.ndarray  # (d_in, d_out)

    @classmethod
    def identity(cls, d: int, kernel: int = 3) -> "DSConvParams":
        dw = np.zeros((d, kernel, kernel))
        dw[:, kernel // 2, kernel // 2] = 1.0
        return cls(dw, np.eye(d))


@dataclass
class CvtParams:
    pe: PositionalEncodings
    down: DSConvParams
    attention: list[AttentionParams] = field(default_factory=list)
    up: DSConvParams | None = None

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in snapshot order."""
        out = [self.pe.pe_n, self.pe.pe_h, self.pe.pe_w, self.down.depthwise, self.down.pointwise]
        for a in self.attention:
            out += [a.w_q, a.w_k, a.w_v]
        out += [self.up.depthwise, self.up.pointwise]
        return out

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays()])

    def load_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        arrays = self.arrays()
        if vec.size != sum(a.size for a in arrays):
            raise ValueError("parameter count mismatch")
        pos = 0
        for a in arrays:
            a[...] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size


def save_params(params: CvtParams, path, double: bool = True) -> None:
    """Write a flat ``SWGT`` snapshot in :meth:`CvtParams.arrays` order."""
    raster.write_weights(path, params.to_vector(), double)


def load_params(path, cfg: CvtConfig, n_views: int, dim: int) -> CvtParams:
    params = zero_params(cfg, n_views, dim)
    params.load_vector(raster.read_weights(path))
    return params


def check_features(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or min(x.shape) < 1:
        raise ValueError(f"features must be (N, H, W, d) with every size >= 1, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    return x


def init_params(cfg: CvtConfig, n_views: int, dim: int, seed: int = 0, scale: float = 0.05) -> CvtParams:
    """Seeded uniform ``[-scale, scale]`` initialisation of every learnable array."""
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-scale, scale, size=shape)

    k = cfg.kernel
    pe = PositionalEncodings(u(n_views, dim), u(cfg.target_h, dim), u(cfg.target_w, dim))
    down = DSConvParams(u(dim, k, k), u(dim, dim))
    att = [AttentionParams(u(dim, dim), u(dim, dim), u(dim, dim), cfg.heads) for _ in range(cfg.layers)]
    up = DSConvParams(u(dim, k, k), u(dim, dim))
    return CvtParams(pe, down, att, up)


def zero_params(cfg: CvtConfig, n_views: int, dim: int) -> CvtParams:
    p = init_params(cfg, n_views, dim, 0)
    p.load_vector(np.zeros_like(p.to_vector()))
    return p


def add_positional(x, pe: PositionalEncodings) -> np.ndarray:
    x = check_features(x)
    N, H, W, d = x.shape
    if pe.pe_n.shape != (N, d) or pe.pe_h.shape != (H, d) or pe.pe_w.shape != (W, d):
        raise ValueError(
            f"encodings {pe.pe_n.shape}, {pe.pe_h.shape}, {pe.pe_w.shape} do not fit features {x.shape}"
        )
    return x + pe.pe_n[:, None, None, :] + pe.pe_h[None, :, None, :] + pe.pe_w[None, None, :, :]


def conv_stride(size: int, target: int, kernel: int = 3) -> int:
    """Stride (ceil of the size ratio) that maps ``size`` onto ``target`` with same-padding."""
    if size < target:
        raise ValueError(f"cannot downsample {size} to larger {target}")
    s = -(-size // target)
    pad = kernel // 2
    out = (size + 2 * pad - kernel) // s + 1
    if out != target:
        raise ValueError(f"no stride maps {size} onto {target} (stride {s} gives {out})")
    return s


def _depthwise(x: np.ndarray, kern: np.ndarray, stride: tuple[int, int], pad: int) -> np.ndarray:
    N, H, W, d = x.shape
    k = kern.shape[1]
    sy, sx = stride
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    oh = (H + 2 * pad - k) // sy + 1
    ow = (W + 2 * pad - k) // sx + 1
    out = np.zeros((N, oh, ow, d))
    for ky in range(k):
        for kx in range(k):
            out += xp[:, ky:ky + sy * (oh - 1) + 1:sy, kx:kx + sx * (ow - 1) + 1:sx, :] * kern[:, ky, kx]
    return out


def ds_conv_down(x, params: DSConvParams, cfg: CvtConfig) -> np.ndarray:
    """Depthwise k x k convolution then 1 x 1 channel mixing onto the target grid."""
    x = check_features(x)
    _, H, W, d = x.shape
    stride = (conv_stride(H, cfg.target_h, cfg.kernel), conv_stride(W, cfg.target_w, cfg.kernel))
    if params.depthwise.shape != (d, cfg.kernel, cfg.kernel) or params.pointwise.shape != (d, d):
        raise ValueError("convolution parameters do not match the channel count")
    return _depthwise(x, params.depthwise, stride, cfg.padding) @ params.pointwise


def ds_deconv_up(x, params: DSConvParams, cfg: CvtConfig, out_hw: tuple[int, int]) -> np.ndarray:
    """Transposed depthwise convolution then 1 x 1 mixing back to ``out_hw``."""
    x = check_features(x)
    N, h, w, d = x.shape
    H, W = out_hw
    k, pad = cfg.kernel, cfg.padding
    sy = conv_stride(H, h, k)
    sx = conv_stride(W, w, k)
    full_h = (h - 1) * sy + k
    full_w = (w - 1) * sx + k
    # output padding must stay below the stride for a valid transposed conv
    op_h = H - (full_h - 2 * pad)
    op_w = W - (full_w - 2 * pad)
    if not (0 <= op_h < sy and 0 <= op_w < sx):
        raise ValueError(f"transposed convolution cannot produce {H}x{W} from {h}x{w}")
    full = np.zeros((N, full_h + op_h, full_w + op_w, d))
    for ky in range(k):
        for kx in range(k):
            full[:, ky:ky + sy * (h - 1) + 1:sy, kx:kx + sx * (w - 1) + 1:sx, :] += x * params.depthwise[:, ky, kx]
    return full[:, pad:pad + H, pad:pad + W, :] @ params.pointwise


def flatten_views(x) -> np.ndarray:
    """``(N, h, w, d) -> (N*h*w, d)``; token ``n*h*w + r*w + c`` is view n, row r, column c."""
    x = check_features(x)
    return x.reshape(-1, x.shape[-1]).copy()


def unflatten_views(tokens: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape[0] != n * h * w:
        raise ValueError(f"{tokens.shape[0]} tokens cannot form {n}x{h}x{w}")
    return tokens.reshape(n, h, w, tokens.shape[-1]).copy()


@dataclass
class AttentionCache:
    tokens: np.ndarray
    q: np.ndarray  # (M, T, dh)
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray  # (M, T, T), rows = queries
    scale: float
    params: AttentionParams

    @property
    def scores_shape(self) -> tuple[int, ...]:
        return self.attn.shape


def _split(a: np.ndarray, heads: int) -> np.ndarray:
    T, d = a.shape
    return a.reshape(T, heads, d // heads).transpose(1, 0, 2)


def _merge(a: np.ndarray) -> np.ndarray:
    M, T, dh = a.shape
    return a.transpose(1, 0, 2).reshape(T, M * dh)


def softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    z = s - s.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attention_forward(tokens, params: AttentionParams) -> tuple[np.ndarray, AttentionCache]:
    """Multi-head self-attention over all tokens, scores scaled by ``sqrt(d)``.

    Each query's weights are normalised over the keys, so every head's output
    is a convex combination of that head's value vectors.
    """
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise ValueError(f"tokens must be (T, {params.dim}), got {x.shape}")
    scale = 1.0 / math.sqrt(params.dim)
    q = _split(x @ params.w_q, params.heads)
    k = _split(x @ params.w_k, params.heads)
    v = _split(x @ params.w_v, params.heads)
    scores = (q @ k.transpose(0, 2, 1)) * scale
    attn = softmax(scores, axis=-1)
    out = _merge(attn @ v)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite attention output")
    return out, AttentionCache(x, q, k, v, attn, scale, params)


def attention_backward(cache: AttentionCache, grad_out) -> dict[str, np.ndarray]:
    """Exact gradients of ``attention_forward`` for an upstream gradient."""
    g = np.asarray(grad_out, dtype=np.float64)
    T = cache.tokens.shape[0]
    p = cache.params
    if g.shape != (T, p.dim):
        raise ValueError(f"upstream gradient {g.shape} does not match cached output {(T, p.dim)}")
    go = _split(g, p.heads)
    A = cache.attn
    dA = go @ cache.v.transpose(0, 2, 1)
    dv = A.transpose(0, 2, 1) @ go
    dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) * cache.scale
    dq = dS @ cache.k
    dk = dS.transpose(0, 2, 1) @ cache.q
    dQ, dK, dV = _merge(dq), _merge(dk), _merge(dv)
    x = cache.tokens
    return {
        "tokens": dQ @ p.w_q.T + dK @ p.w_k.T + dV @ p.w_v.T,
        "w_q": x.T @ dQ,
        "w_k": x.T @ dK,
        "w_v": x.T @ dV,
    }


def attention_stack(tokens: np.ndarray, layers: list[AttentionParams]) -> np.ndarray:
    """Cascade of attention units, each with a token-wise residual."""
    for layer in layers:
        out, _ = attention_forward(tokens, layer)
        tokens = tokens + out
    return tokens


def cvt_block(x, params: CvtParams, cfg: CvtConfig) -> np.ndarray:
    """Full block: down-sample, encode positions, attend across views, up-sample, add input."""
    x = check_features(x)
    N, H, W, _ = x.shape
    low = ds_conv_down(x, params.down, cfg)
    low = add_positional(low, params.pe)
    tokens = attention_stack(flatten_views(low), params.attention)
    restored = ds_deconv_up(unflatten_views(tokens, N, cfg.target_h, cfg.target_w), params.up, cfg, (H, W))
    return x + restored


# -- gradient verification -----------------------------------------------------


def numeric_gradients(tokens: np.ndarray, params: AttentionParams, upstream: np.ndarray,
                      step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of ``sum(upstream * forward(...))`` for every input array."""

    def objective(x, wq, wk, wv):
        out, _ = attention_forward(x, AttentionParams(wq, wk, wv, params.heads))
        return float(np.sum(out * upstream))

    arrays = {"tokens": tokens, "w_q": params.w_q, "w_k": params.w_k, "w_v": params.w_v}
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            plus = {k: v.copy() for k, v in arrays.items()}
            minus = {k: v.copy() for k, v in arrays.items()}
            plus[name][idx] += step
            minus[name][idx] -= step
            g[idx] = (objective(plus["tokens"], plus["w_q"], plus["w_k"], plus["w_v"])
                      - objective(minus["tokens"], minus["w_q"], minus["w_k"], minus["w_v"])) / (2 * step)
        grads[name] = g
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max over entries of ``|a - b| / max(|a|, |b|, floor)``."""
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def gradient_check(seed: int = 0, views: int = 2, h: int = 2, w: int = 3, dim: int = 8, heads: int = 2,
                   step: float = 1e-5, corrupt: bool = False) -> dict:
    """Compare analytic and numeric attention gradients on a random small instance.

    ``corrupt`` perturbs the analytic result and exists as a negative control.
    """
    rng = np.random.default_rng(seed)
    T = views * h * w
    tokens = rng.normal(size=(T, dim))
    params = AttentionParams(*(rng.normal(scale=1.0 / math.sqrt(dim), size=(dim, dim)) for _ in range(3)), heads)
    upstream = rng.normal(size=(T, dim))
    _, cache = attention_forward(tokens, params)
    analytic = attention_backward(cache, upstream)
    if corrupt:
        analytic["w_k"] = analytic["w_k"] * 1.01 + 1e-3
    numeric = numeric_gradients(tokens, params, upstream, step)
    errors = {k: relative_error(analytic[k], numeric[k]) for k in analytic}
    return {"seed": seed, "tokens": T, "dim": dim, "heads": heads, "errors": errors,
            "max_rel_error": max(errors.values())}
