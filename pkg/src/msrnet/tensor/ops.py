"""Differentiable operators on :class:`DiffTensor`.

Every operator is a pure function of its inputs. Backward rules receive the
upstream gradient and return one gradient per input (``None`` for inputs that
do not need one).
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

from .core import DiffTensor, LearnableScalar, make_node


def _check_same_shape(op: str, x: DiffTensor, y: DiffTensor) -> None:
    if x.shape != y.shape:
        raise ValueError(f"{op}: shape mismatch {x.shape} vs {y.shape}")


def _as_tensor(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    return DiffTensor(arr.reshape((1,) * (4 - arr.ndim) + arr.shape) if arr.ndim < 4 else arr)


# --------------------------------------------------------------------------
# convolution

def conv_output_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int, dilation: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(n, ho, wo, c, kh, kw),
        strides=(sn, stride * sh, stride * sw, sc, dilation * sh, dilation * sw),
        writeable=False,
    )
    return view.reshape(n * ho * wo, c * kh * kw)


def conv2d(x: DiffTensor, w: DiffTensor, b: DiffTensor | None = None,
           stride: int = 1, pad: int = 0, dilation: int = 1) -> DiffTensor:
    """2-D cross-correlation. ``w`` is ``(out, in, kh, kw)``, ``b`` is ``(1, out, 1, 1)``."""
    if stride < 1 or dilation < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1, dilation >= 1, pad >= 0 "
                         f"(got stride={stride}, dilation={dilation}, pad={pad})")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {ci} "
                         f"(input shape {x.shape}, kernel shape {w.shape})")
    if b is not None and b.shape != (1, o, 1, 1):
        raise ValueError(f"conv2d: bias shape {b.shape} does not match (1, {o}, 1, 1)")
    ho = conv_output_size(h, kh, stride, pad, dilation)
    wo = conv_output_size(wd, kw, stride, pad, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} (dilation {dilation}) does not fit "
                         f"input {h}x{wd} with pad {pad}")
    xp = np.pad(x.values, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.values
    xp = np.ascontiguousarray(xp)
    cols = _im2col(xp, kh, kw, ho, wo, stride, dilation)
    w2 = w.values.reshape(o, -1)
    out = (cols @ w2.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.values
    out = np.ascontiguousarray(out)

    def _backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape)
            for a in range(kh):
                r0 = a * dilation
                for bb in range(kw):
                    c0 = bb * dilation
                    dxp[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
                        c0:c0 + stride * (wo - 1) + 1:stride] += dcols[..., a, bb].transpose(0, 3, 1, 2)
            gx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(b.shape)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_node(out, parents, _backward)


# --------------------------------------------------------------------------
# resampling

def _pad_even(arr: np.ndarray, fill: float) -> np.ndarray:
    h, w = arr.shape[2:]
    ph, pw = h % 2, w % 2
    if ph or pw:
        arr = np.pad(arr, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=fill)
    return arr


def _windows2(arr: np.ndarray) -> np.ndarray:
    n, c, h, w = arr.shape
    return (arr.reshape(n, c, h // 2, 2, w // 2, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, h // 2, w // 2, 4))


def maxpool2(x: DiffTensor) -> DiffTensor:
    """2x2 / stride-2 max pooling; odd sizes are padded with -inf."""
    if x.values.size == 0:
        raise ValueError("maxpool2: empty tensor")
    n, c, h, w = x.shape
    win = _windows2(_pad_even(x.values, -np.inf))
    arg = win.argmax(axis=-1)  # first row-major maximum wins ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def _backward(g):
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        ho, wo = g.shape[2:]
        full = gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        return (full[:, :, :h, :w],)

    return make_node(out, (x,), _backward)


def avgpool2(x: DiffTensor) -> DiffTensor:
    """2x2 / stride-2 mean pooling; odd sizes are padded with zeros."""
    if x.values.size == 0:
        raise ValueError("avgpool2: empty tensor")
    n, c, h, w = x.shape
    out = _windows2(_pad_even(x.values, 0.0)).mean(axis=-1)

    def _backward(g):
        full = np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3)
        return (full[:, :, :h, :w],)

    return make_node(out, (x,), _backward)


def upsample_nearest2(x: DiffTensor) -> DiffTensor:
    out = np.repeat(np.repeat(x.values, 2, axis=2), 2, axis=3)

    def _backward(g):
        n, c, h2, w2 = g.shape
        return (g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return make_node(out, (x,), _backward)


# --------------------------------------------------------------------------
# channel plumbing

def concat_channels(xs: Sequence[DiffTensor]) -> DiffTensor:
    xs = list(xs)
    if not xs:
        raise ValueError("concat_channels: empty input list")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: spatial/batch mismatch {t.shape} vs {ref}")
    if len(xs) == 1:
        return xs[0]
    out = np.concatenate([t.values for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def _backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return make_node(out, xs, _backward)


def slice_channels(x: DiffTensor, start: int, stop: int) -> DiffTensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ValueError(f"slice_channels: bad range [{start}, {stop}) for {x.shape[1]} channels")
    out = x.values[:, start:stop].copy()

    def _backward(g):
        full = np.zeros(x.shape)
        full[:, start:stop] = g
        return (full,)

    return make_node(out, (x,), _backward)


def detach(x: DiffTensor) -> DiffTensor:
    return DiffTensor(x.values.copy())


# --------------------------------------------------------------------------
# element-wise

def add(x: DiffTensor, y: DiffTensor) -> DiffTensor:
    _check_same_shape("add", x, y)
    return make_node(x.values + y.values, (x, y), lambda g: (g, g))


def sub(x: DiffTensor, y: DiffTensor) -> DiffTensor:
    _check_same_shape("sub", x, y)
    return make_node(x.values - y.values, (x, y), lambda g: (g, -g))


def mul(x: DiffTensor, y: DiffTensor) -> DiffTensor:
    _check_same_shape("mul", x, y)
    xv, yv = x.values, y.values
    return make_node(xv * yv, (x, y), lambda g: (g * yv, g * xv))


def scale(s, x: DiffTensor) -> DiffTensor:
    """``s * x`` for a learnable scalar (graph-tracked) or a plain float."""
    if not isinstance(s, DiffTensor):
        c = float(s)
        return make_node(c * x.values, (x,), lambda g: (c * g,))
    if s.shape != (1, 1, 1, 1):
        raise ValueError(f"scale: expected a (1, 1, 1, 1) scalar, got {s.shape}")
    sv = s.values[0, 0, 0, 0]
    xv = x.values

    def _backward(g):
        return (np.full((1, 1, 1, 1), np.sum(g * xv)), g * sv)

    return make_node(sv * xv, (s, x), _backward)


def add_const(x: DiffTensor, c) -> DiffTensor:
    c = np.asarray(c, dtype=np.float64)
    return make_node(x.values + c, (x,), lambda g: (g,))


def mul_const(x: DiffTensor, c) -> DiffTensor:
    c = np.asarray(c, dtype=np.float64)
    out = x.values * c
    if out.shape != x.shape:
        raise ValueError(f"mul_const: constant of shape {c.shape} changes shape {x.shape}")
    return make_node(out, (x,), lambda g: (g * c,))


def relu(x: DiffTensor) -> DiffTensor:
    mask = x.values > 0
    return make_node(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: DiffTensor) -> DiffTensor:
    y = expit(x.values)
    return make_node(y, (x,), lambda g: (g * y * (1.0 - y),))


def log(x: DiffTensor) -> DiffTensor:
    xv = x.values
    if np.any(xv <= 0):
        raise FloatingPointError("log: non-positive input")
    return make_node(np.log(xv), (x,), lambda g: (g / xv,))


def absolute(x: DiffTensor) -> DiffTensor:
    sgn = np.sign(x.values)
    return make_node(np.abs(x.values), (x,), lambda g: (g * sgn,))


def square(x: DiffTensor) -> DiffTensor:
    xv = x.values
    return make_node(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def power(x: DiffTensor, p: float) -> DiffTensor:
    """``x ** p`` for a constant exponent; ``x`` must be positive unless ``p`` is a whole number."""
    xv = x.values
    p = float(p)
    if p == 0.0:
        return make_node(np.ones_like(xv), (x,), lambda g: (np.zeros_like(g),))
    out = xv ** p
    return make_node(out, (x,), lambda g: (g * p * xv ** (p - 1.0),))


def clamp(x: DiffTensor, lo: float, hi: float) -> DiffTensor:
    """Clip to ``[lo, hi]``; gradient passes only where the input was inside."""
    inside = (x.values >= lo) & (x.values <= hi)
    return make_node(np.clip(x.values, lo, hi), (x,), lambda g: (g * inside,))


def sum_all(x: DiffTensor) -> DiffTensor:
    shape = x.shape
    return make_node(np.full((1, 1, 1, 1), x.values.sum()), (x,),
                     lambda g: (np.full(shape, g[0, 0, 0, 0]),))


def gather_pixels(x: DiffTensor, n_idx, c_idx, y_idx, x_idx) -> DiffTensor:
    """Pick individual elements; returns a ``(1, 1, 1, K)`` tensor. Repeated
    indices accumulate their gradients."""
    idx = tuple(np.asarray(a, dtype=np.intp) for a in (n_idx, c_idx, y_idx, x_idx))
    out = x.values[idx].reshape(1, 1, 1, -1)
    shape = x.shape

    def _backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g.reshape(-1))
        return (full,)

    return make_node(out, (x,), _backward)


def as_learnable_scalar(value: float, name: str | None = None) -> LearnableScalar:
    return LearnableScalar(value, name=name)
