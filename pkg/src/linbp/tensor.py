"""Dense float32 kernels on numpy arrays.

A "tensor" throughout this package is a C-contiguous ``numpy.ndarray`` of
dtype float32, channels-first for images. Convolution and pooling accept a
single image ``(C, H, W)`` or a batch ``(N, C, H, W)``.

Randomness comes from numpy's PCG64 bit generator (``numpy.random.Generator``),
whose output stream is fixed across platforms for a given seed. Streams for
parallel work are derived with ``numpy.random.SeedSequence`` spawn keys.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, EvaluationError, ShapeError

FLOAT = np.float32


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=FLOAT)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def derive_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for work item ``index`` under a run seed.

    The stream depends only on ``(seed, index)``, never on the order in which
    items are processed, so serial and parallel runs agree.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.PCG64(ss))


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a.astype(FLOAT, copy=False), b.astype(FLOAT, copy=False))


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    span = size + 2 * pad - kernel
    if span < 0:
        raise ConfigError(f"kernel {kernel} larger than padded input {size + 2 * pad}")
    if span % stride:
        raise ConfigError(
            f"output size ({size}+2*{pad}-{kernel})/{stride}+1 is not integral"
        )
    return span // stride + 1


def _batched(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")


def im2col(x, kh, kw, stride, pad):
    """Unfold a batch into patch rows of length ``C*kh*kw``.

    Returns ``(cols, ho, wo)`` with ``cols`` shaped ``(N*ho*wo, C*kh*kw)``.
    """
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def col2im(gcols, x_shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to pixels."""
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    g = gcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Zero-padded cross-correlation.

    ``x`` is ``(C_in, H, W)`` or ``(N, C_in, H, W)``; ``w`` is
    ``(C_out, C_in, kH, kW)``. The output keeps the batching of ``x``.
    """
    xb, single = _batched(x)
    w = np.asarray(w)
    if w.ndim != 4 or w.shape[1] != xb.shape[1]:
        raise ShapeError(f"conv2d: input {xb.shape[1:]} incompatible with kernel {w.shape}")
    out, _ = conv2d_forward(xb, w, b, stride, pad)
    return out[0] if single else out


def conv2d_forward(x, w, b, stride, pad):
    """Batched convolution that also returns the patch matrix for reuse."""
    cout, cin, kh, kw = w.shape
    cols, ho, wo = im2col(x, kh, kw, stride, pad)
    out = cols @ w.reshape(cout, -1).T
    if b is not None:
        out += b
    out = out.reshape(x.shape[0], ho, wo, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv2d_backward_input(g, w, x_shape, stride, pad):
    cout, cin, kh, kw = w.shape
    gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    return col2im(gmat @ w.reshape(cout, -1), x_shape, kh, kw, stride, pad)


def conv2d_backward_params(g, cols, w_shape):
    cout = w_shape[0]
    gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    return (gmat.T @ cols).reshape(w_shape), gmat.sum(axis=0)


def maxpool2d(x, kernel: int, stride: int):
    """Max pooling; returns ``(out, argmax)`` where argmax indexes the window.

    Ties resolve to the first occurrence in row-major window order.
    """
    xb, single = _batched(x)
    n, c, h, w = xb.shape
    conv_output_size(h, kernel, stride, 0)
    conv_output_size(w, kernel, stride, 0)
    win = sliding_window_view(xb, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(*win.shape[:4], kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)
    if single:
        return out[0], idx[0]
    return out, idx


def maxpool2d_backward(g, idx, x_shape, kernel, stride):
    n, c, h, w = x_shape
    ho, wo = g.shape[2], g.shape[3]
    out = np.zeros(x_shape, dtype=g.dtype)
    for p in range(kernel * kernel):
        i, j = divmod(p, kernel)
        out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(idx == p, g, 0)
    return out


def avgpool2d(x, kernel: int, stride: int) -> np.ndarray:
    xb, single = _batched(x)
    conv_output_size(xb.shape[2], kernel, stride, 0)
    conv_output_size(xb.shape[3], kernel, stride, 0)
    win = sliding_window_view(xb, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.ascontiguousarray(win.mean(axis=(-2, -1)))
    return out[0] if single else out


def avgpool2d_backward(g, x_shape, kernel, stride):
    ho, wo = g.shape[2], g.shape[3]
    out = np.zeros(x_shape, dtype=g.dtype)
    share = g / (kernel * kernel)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += share
    return out


def sign(t) -> np.ndarray:
    """Elementwise sign with ``sign(0) == 0``."""
    t = np.asarray(t)
    return np.sign(t).astype(t.dtype if t.dtype.kind == "f" else FLOAT, copy=False)


def clamp(t, lo, hi) -> np.ndarray:
    return np.clip(t, lo, hi)


def linf_project(x_adv, x_ref, eps) -> np.ndarray:
    """Project onto the intersection of the eps-ball around ``x_ref`` and [0, 1]."""
    if eps < 0:
        raise ConfigError(f"epsilon must be non-negative, got {eps}")
    x_adv = np.asarray(x_adv)
    x_ref = np.asarray(x_ref)
    if x_adv.shape != x_ref.shape:
        raise ShapeError(f"linf_project: {x_adv.shape} vs {x_ref.shape}")
    eps = x_ref.dtype.type(eps) if x_ref.dtype.kind == "f" else eps
    return np.clip(np.clip(x_adv, x_ref - eps, x_ref + eps), 0, 1)


def finite_diff_grad(fn, x, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    ``fn`` receives float64 arrays; network code in this package keeps
    float64 end to end when handed float64 input, so the oracle is not
    limited by single-precision round-off. Returns a float64 array.
    """
    if h <= 0:
        raise ConfigError(f"step h must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn(x))
        flat[i] = orig - h
        down = float(fn(x))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise EvaluationError(f"non-finite function value at coordinate {i}", index=i)
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(x.shape)
