"""Dense NCHW float32 kernels.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 and rank 4.
Every op here is a pure function: inputs are never mutated and the same
inputs always give bit-identical outputs.

``conv2d`` is the fast path; ``conv2d_naive`` is the literal loop
definition kept as an independent oracle.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, ShapeError, UsageError

DTYPE = np.float32
FVT_MAGIC = b"FVT1"
_FVT_HEADER = struct.Struct("<4s4I")

GELU_C = 0.7978845608
GELU_A = 0.044715


def as_tensor(data, shape=None) -> np.ndarray:
    """Coerce ``data`` to a contiguous float32 NCHW array."""
    x = np.ascontiguousarray(data, dtype=DTYPE)
    if shape is not None:
        x = x.reshape(shape)
    if x.ndim != 4:
        raise ShapeError(f"expected a rank-4 NCHW tensor, got shape {x.shape}")
    return x


def validate_tensor(x: np.ndarray) -> np.ndarray:
    """Check the Tensor invariants: rank 4, float32, dims >= 1, finite values."""
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"expected a rank-4 array, got {getattr(x, 'shape', type(x))}")
    if x.dtype != DTYPE:
        raise ShapeError(f"expected float32 data, got {x.dtype}")
    if min(x.shape) < 1:
        raise ShapeError(f"all dimensions must be >= 1, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ShapeError("tensor contains non-finite values")
    return x


@dataclass(frozen=True)
class ConvParams:
    weight: np.ndarray  # (out_ch, in_ch // groups, k, k)
    bias: np.ndarray  # (out_ch,)
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got shape {w.shape}")
        if w.shape[2] != w.shape[3]:
            raise ShapeError(f"only square kernels are supported, got {w.shape[2]}x{w.shape[3]}")
        if self.bias.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match out_ch {w.shape[0]}")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ShapeError(
                f"invalid stride/padding/groups ({self.stride}, {self.padding}, {self.groups})"
            )
        if w.shape[0] % self.groups:
            raise ShapeError(f"out_ch {w.shape[0]} not divisible by groups {self.groups}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def num_params(self) -> int:
        return self.weight.size + self.bias.size


@dataclass(frozen=True)
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        n = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == n):
            raise ShapeError("batch-norm vectors must all have the same length")
        if self.eps < 0:
            raise ShapeError("eps must be non-negative")
        if np.any(self.running_var + self.eps <= 0):
            raise ShapeError("running_var + eps must be positive")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def num_params(self) -> int:
        return 4 * self.gamma.size


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_conv(x: np.ndarray, p: ConvParams) -> tuple[int, int]:
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4, got shape {x.shape}")
    c = x.shape[1]
    if c % p.groups:
        raise ShapeError(f"input channels {c} not divisible by groups {p.groups}")
    if c != p.in_channels:
        raise ShapeError(
            f"channel mismatch: input has c={c}, weight expects in_ch={p.in_channels}"
        )
    k = p.kernel_size
    h, w = x.shape[2] + 2 * p.padding, x.shape[3] + 2 * p.padding
    if h < k:
        raise ShapeError(f"padded height {h} smaller than kernel {k}")
    if w < k:
        raise ShapeError(f"padded width {w} smaller than kernel {k}")
    return (
        conv_output_size(x.shape[2], k, p.stride, p.padding),
        conv_output_size(x.shape[3], k, p.stride, p.padding),
    )


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """2-D cross-correlation with zero padding, groups and bias.

    Depthwise kernels accumulate shifted strided slices; everything else
    goes through im2col + matmul. Reduction order is fixed, so results do
    not depend on call history.
    """
    ho, wo = _check_conv(x, p)
    n, c = x.shape[:2]
    oc, icg, k, _ = p.weight.shape
    s, pad, g = p.stride, p.padding, p.groups
    w = p.weight.astype(DTYPE, copy=False)

    if k == 1 and s == 1 and pad == 0 and g == 1:
        out = np.matmul(w.reshape(oc, c), x.reshape(n, c, -1))
        out += p.bias.astype(DTYPE)[None, :, None]
        return out.reshape(n, oc, ho, wo)

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    hspan, wspan = s * (ho - 1) + 1, s * (wo - 1) + 1

    if g == c and icg == 1 and oc == c:
        out = np.zeros((n, c, ho, wo), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                tap = w[:, 0, i, j][None, :, None, None]
                out += tap * xp[:, :, i : i + hspan : s, j : j + wspan : s]
        out += p.bias.astype(DTYPE)[None, :, None, None]
        return out

    # (n, c, ho, wo, k, k) view of every receptive field
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    ocg = oc // g
    out = np.empty((n, oc, ho * wo), dtype=DTYPE)
    for gi in range(g):
        cols = windows[:, gi * icg : (gi + 1) * icg]
        cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, icg * k * k)
        wg = w[gi * ocg : (gi + 1) * ocg].reshape(ocg, icg * k * k)
        out[:, gi * ocg : (gi + 1) * ocg] = np.matmul(cols, wg.T).transpose(0, 2, 1)
    out += p.bias.astype(DTYPE)[None, :, None]
    return out.reshape(n, oc, ho, wo)


def conv2d_naive(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Reference convolution: the six nested loops, accumulated in float64."""
    ho, wo = _check_conv(x, p)
    n, c, h, wd = x.shape
    oc, icg, k, _ = p.weight.shape
    s, pad, g = p.stride, p.padding, p.groups
    ocg = oc // g
    xs = x.tolist()
    ws = p.weight.tolist()
    bs = p.bias.tolist()
    out = np.zeros((n, oc, ho, wo), dtype=np.float64)
    for b in range(n):
        for o in range(oc):
            grp = o // ocg
            for oy in range(ho):
                for ox in range(wo):
                    acc = bs[o]
                    for ci in range(icg):
                        plane = xs[b][grp * icg + ci]
                        kern = ws[o][ci]
                        for ky in range(k):
                            iy = oy * s + ky - pad
                            if iy < 0 or iy >= h:
                                continue
                            row = plane[iy]
                            krow = kern[ky]
                            for kx in range(k):
                                ix = ox * s + kx - pad
                                if 0 <= ix < wd:
                                    acc += row[ix] * krow[kx]
                    out[b, o, oy, ox] = acc
    return out.astype(DTYPE)


def batch_norm_inference(x: np.ndarray, p: BnParams) -> np.ndarray:
    """gamma * (x - mean) / sqrt(var + eps) + beta, per channel."""
    if x.shape[1] != p.channels:
        raise ShapeError(f"batch-norm channel mismatch: input c={x.shape[1]}, params c={p.channels}")
    std = np.sqrt(p.running_var.astype(np.float64) + p.eps)
    scale = (p.gamma / std).astype(DTYPE)[None, :, None, None]
    mean = p.running_mean.astype(DTYPE)[None, :, None, None]
    beta = p.beta.astype(DTYPE)[None, :, None, None]
    return (x - mean) * scale + beta


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation: 0.5 x (1 + tanh(0.7978845608 (x + 0.044715 x^3)))."""
    x = np.asarray(x, dtype=DTYPE)
    # evaluated in place as 0.5 x (1 + tanh(c x (1 + a x^2)))
    y = x * x
    y *= DTYPE(GELU_A)
    y += DTYPE(1.0)
    y *= x
    y *= DTYPE(GELU_C)
    np.tanh(y, out=y)
    y += DTYPE(1.0)
    y *= x
    y *= DTYPE(0.5)
    return y


def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / np.sum(e, axis=-1, keepdims=True)).astype(DTYPE)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalise over channels independently at every (n, h, w) position."""
    if x.shape[1] != gamma.shape[0] or beta.shape != gamma.shape:
        raise ShapeError(
            f"layer_norm channel mismatch: input c={x.shape[1]}, gamma {gamma.shape}, beta {beta.shape}"
        )
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    y = centered / np.sqrt(var + DTYPE(eps))
    return (y * gamma.astype(DTYPE)[None, :, None, None] + beta.astype(DTYPE)[None, :, None, None]).astype(DTYPE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matrix product over the trailing two axes."""
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        return np.matmul(a, b).astype(DTYPE, copy=False)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from exc


def avg_pool(x: np.ndarray, k: int, stride: int | None = None) -> np.ndarray:
    """Unpadded average pooling with a square window."""
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ShapeError(f"invalid pooling window {k} / stride {stride}")
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeError(f"pooling window {k} larger than input {h}x{w}")
    ho, wo = conv_output_size(h, k, stride, 0), conv_output_size(w, k, stride, 0)
    if k == stride and h == ho * k and w == wo * k:
        return x.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5), dtype=DTYPE)
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return windows.mean(axis=(4, 5), dtype=DTYPE)


def _bilinear_taps(in_size: int, out_size: int):
    # half-pixel centres, clamped at the border
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = (src - lo).astype(DTYPE)
    return lo, hi, frac


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"invalid resize target {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return x.copy()
    y0, y1, fy = _bilinear_taps(h, out_h)
    x0, x1, fx = _bilinear_taps(w, out_w)
    top, bot = x[:, :, y0, :], x[:, :, y1, :]
    rows = top + (bot - top) * fy[None, None, :, None]
    left, right = rows[:, :, :, x0], rows[:, :, :, x1]
    return (left + (right - left) * fx[None, None, None, :]).astype(DTYPE)


def mhsa(x: np.ndarray, wq: ConvParams, wk: ConvParams, wv: ConvParams, wo: ConvParams, heads: int) -> np.ndarray:
    """Multi-head scaled dot-product self-attention over the h*w positions.

    Projections are 1x1 convs. No residual is added here.
    """
    n, c, h, w = x.shape
    if heads < 1 or c % heads:
        raise ShapeError(f"channels {c} not divisible by heads {heads}")
    d = c // heads
    seq = h * w

    def split(t):
        return t.reshape(n, heads, d, seq).transpose(0, 1, 3, 2)

    q, k, v = split(conv2d(x, wq)), split(conv2d(x, wk)), split(conv2d(x, wv))
    logits = matmul(q, k.transpose(0, 1, 3, 2)) * DTYPE(1.0 / math.sqrt(d))
    attn = softmax_lastdim(logits)
    y = matmul(attn, v).transpose(0, 1, 3, 2).reshape(n, c, h, w)
    return conv2d(np.ascontiguousarray(y), wo)


# ---------------------------------------------------------------- FVT1 files


def encode_fvt(x: np.ndarray) -> bytes:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise ShapeError(f"FVT1 stores rank-4 tensors, got shape {x.shape}")
    return _FVT_HEADER.pack(FVT_MAGIC, *x.shape) + x.astype("<f4").tobytes()


def decode_fvt(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < _FVT_HEADER.size:
        raise FormatError(f"{source}: truncated FVT1 header ({len(buf)} of {_FVT_HEADER.size} bytes)")
    magic, *dims = _FVT_HEADER.unpack_from(buf)
    if magic != FVT_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {FVT_MAGIC!r}")
    count = math.prod(dims)
    expected = _FVT_HEADER.size + 4 * count
    if len(buf) != expected:
        raise FormatError(
            f"{source}: payload size mismatch at byte offset {min(len(buf), expected)}: "
            f"expected {expected} bytes for shape {tuple(dims)}, got {len(buf)}"
        )
    data = np.frombuffer(buf, dtype="<f4", offset=_FVT_HEADER.size, count=count)
    return data.astype(DTYPE).reshape(dims)


def write_fvt(path, x: np.ndarray) -> None:
    Path(path).write_bytes(encode_fvt(x))


def read_fvt(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    return decode_fvt(buf, source=str(path))
