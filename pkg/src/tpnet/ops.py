"""Array primitives with explicit forward and backward passes.

All operations are pure functions over numpy arrays in (batch, channels,
height, width) layout. Convolutions are stride-1 cross-correlations;
dense ones run as im2col + BLAS matmul, grouped/depth-wise ones through
fused kernels (``tpnet._kernels``) with numpy fallbacks. Backward passes
are hand-derived so gradients can be validated against finite
differences; the input gradient of any stride-1 convolution is itself a
convolution with flipped, channel-swapped kernels and reuses the same
forward machinery.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .errors import ConfigurationError, NumericError, ShapeError

__all__ = [
    "conv2d",
    "conv2d_backward",
    "relu",
    "relu_backward",
    "sigmoid",
    "sigmoid_backward",
    "maxpool2",
    "maxpool2_backward",
    "adaptive_max_pool",
    "adaptive_max_pool_backward",
    "adaptive_avg_pool",
    "adaptive_avg_pool_backward",
    "l1_loss",
    "assert_finite",
]


def assert_finite(x: np.ndarray, what: str = "input") -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"{what} contains non-finite values")


def _check_4d(x: np.ndarray, what: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} must be rank-4 (n, c, h, w), got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Padded (N, C, Hp, Wp) -> (N*Ho*Wo, kh*kw*C) patch matrix.

    Column layout is kernel-offset major, channel minor, matching
    ``_weight_mat``.
    """
    n, c, hp, wp = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    xcl = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))  # channels-last
    cols = np.empty((n, ho, wo, kh * kw, c), dtype=xp.dtype)
    for a in range(kh):
        for t in range(kw):
            cols[:, :, :, a * kw + t, :] = xcl[:, a : a + ho, t : t + wo, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _weight_mat(w: np.ndarray) -> np.ndarray:
    co, ci, kh, kw = w.shape
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(kh * kw * ci, co)


def _conv_dense(xp: np.ndarray, w: np.ndarray, b, return_cols: bool):
    n, _, hp, wp = xp.shape
    co, _, kh, kw = w.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    cols = _im2col(xp, kh, kw)
    y = cols @ _weight_mat(w)
    if b is not None:
        y += b
    y = np.ascontiguousarray(y.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))
    return y, (cols if return_cols else None)


def _conv_grouped_numpy(xp: np.ndarray, w: np.ndarray, b, groups: int):
    n, cin, hp, wp = xp.shape
    co, cig, kh, kw = w.shape
    cog = co // groups
    ho, wo = hp - kh + 1, wp - kw + 1
    y = np.empty((n, co, ho, wo), dtype=xp.dtype)
    for g in range(groups):
        xg = xp[:, g * cig : (g + 1) * cig]
        wg = w[g * cog : (g + 1) * cog]
        bg = None if b is None else b[g * cog : (g + 1) * cog]
        y[:, g * cog : (g + 1) * cog], _ = _conv_dense(xg, wg, bg, False)
    return y


def _conv_grouped(xp: np.ndarray, w: np.ndarray, b, groups: int):
    if _kernels.ENABLED:
        n, _, hp, wp = xp.shape
        co, _, kh, kw = w.shape
        y = np.empty((n, co, hp - kh + 1, wp - kw + 1), dtype=xp.dtype)
        bb = b if b is not None else np.zeros(co, dtype=xp.dtype)
        _kernels.gconv_fwd(xp, w, bb, y, groups)
        return y
    return _conv_grouped_numpy(xp, w, b, groups)


def _check_conv_args(x, w, b, groups):
    _check_4d(x)
    if w.ndim != 4:
        raise ShapeError(f"conv weight must be rank-4, got shape {w.shape}")
    co, cig, _, _ = w.shape
    cin = x.shape[1]
    if groups < 1 or cin % groups or co % groups:
        raise ConfigurationError(
            f"channel counts (in={cin}, out={co}) must be divisible by groups={groups}"
        )
    if cig != cin // groups:
        raise ShapeError(
            f"weight expects {cig} input channels per group, input provides {cin // groups}"
        )
    if b is not None and b.shape != (co,):
        raise ShapeError(f"bias must have shape ({co},), got {b.shape}")


def conv2d(x, w, b=None, *, padding=0, groups=1, return_cols=False):
    """Stride-1 2-D cross-correlation.

    x: (n, cin, h, w); w: (cout, cin/groups, kh, kw); b: (cout,) or None.
    With ``return_cols`` the dense path also returns its patch matrix so a
    following backward pass can skip rebuilding it.
    """
    _check_conv_args(x, w, b, groups)
    xp = _pad2d(x, padding)
    if xp.shape[2] < w.shape[2] or xp.shape[3] < w.shape[3]:
        raise ShapeError(f"input {x.shape} too small for kernel {w.shape} at padding={padding}")
    if groups == 1:
        y, cols = _conv_dense(xp, w, b, return_cols)
    else:
        y, cols = _conv_grouped(xp, w, b, groups), None
    return (y, cols) if return_cols else y


def _flip_swap(w: np.ndarray, groups: int) -> np.ndarray:
    """Kernels of the convolution that computes the input gradient."""
    co, cig, kh, kw = w.shape
    if groups == 1:
        return np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    cog = co // groups
    wg = w.reshape(groups, cog, cig, kh, kw).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(wg.reshape(groups * cig, cog, kh, kw)[:, :, ::-1, ::-1])


def conv2d_backward(
    dy,
    x,
    w,
    *,
    padding=0,
    groups=1,
    need_dx=True,
    dx_channels=None,
    cols=None,
):
    """Gradients of ``conv2d``: returns (dx, dw, db).

    ``dx_channels=(lo, hi)`` restricts the input gradient to that channel
    slice (the rest of dx is not computed and must not be consumed);
    ``dx`` is None when ``need_dx`` is False. ``cols`` may pass the patch
    matrix returned by the forward call.
    """
    co, cig, kh, kw = w.shape
    db = dy.sum(axis=(0, 2, 3))
    n, ho, wo = dy.shape[0], dy.shape[2], dy.shape[3]

    if groups == 1:
        if cols is None:
            cols = _im2col(_pad2d(x, padding), kh, kw)
        dy_mat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)
        dw_mat = cols.T @ dy_mat  # (kh*kw*cin, cout)
        dw = np.ascontiguousarray(
            dw_mat.reshape(kh, kw, x.shape[1], co).transpose(3, 2, 0, 1)
        )
    else:
        dw = np.zeros_like(w)
        xp = _pad2d(x, padding)
        if _kernels.ENABLED:
            _kernels.gconv_dw(xp, dy, dw, groups)
        else:
            cog = co // groups
            for g in range(groups):
                xg = xp[:, g * cig : (g + 1) * cig]
                dyg = dy[:, g * cog : (g + 1) * cog]
                c = _im2col(xg, kh, kw)
                dym = np.ascontiguousarray(dyg.transpose(0, 2, 3, 1)).reshape(-1, cog)
                dw[g * cog : (g + 1) * cog] = (
                    (c.T @ dym).reshape(kh, kw, cig, cog).transpose(3, 2, 0, 1)
                )

    dx = None
    if need_dx:
        wfs = _flip_swap(w, groups)
        lo, hi = 0, x.shape[1]
        if dx_channels is not None:
            if groups != 1:
                raise ConfigurationError("dx_channels requires groups == 1")
            lo, hi = dx_channels
            wfs = wfs[lo:hi]
        full = conv2d(dy, wfs, padding=max(kh, kw) - 1, groups=groups)
        p = padding
        dx = full[:, :, p : p + x.shape[2], p : p + x.shape[3]]
        if dx_channels is not None:
            pad_ch = np.zeros((n, x.shape[1], x.shape[2], x.shape[3]), dtype=dy.dtype)
            pad_ch[:, lo:hi] = dx
            dx = pad_ch
        else:
            dx = np.ascontiguousarray(dx)
    return dx, dw, db


# ---------------------------------------------------------------------------
# activations


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return dy * (x > 0)


def sigmoid(x):
    from scipy.special import expit

    return expit(x)


def sigmoid_backward(dy, s):
    """Gradient through sigmoid given its output ``s``."""
    return dy * s * (1.0 - s)


# ---------------------------------------------------------------------------
# pooling


def maxpool2(x):
    """2x2 stride-2 max pooling; returns (y, argmax) with argmax in 0..3."""
    _check_4d(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {(h, w)}")
    xr = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = xr.argmax(axis=-1)
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool2_backward(dy, idx, in_shape):
    n, c, h, w = in_shape
    g = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
    np.put_along_axis(g, idx[..., None], dy[..., None], axis=-1)
    return (
        g.reshape(n, c, h // 2, w // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )


def _adaptive_bins(size: int, out: int):
    i = np.arange(out)
    starts = (i * size) // out
    ends = ((i + 1) * size + out - 1) // out
    return starts, ends


def adaptive_max_pool(x, out_size: int):
    """Max pooling onto an (out_size, out_size) grid for any input >= that size.

    Bin i spans [floor(i*S/out), ceil((i+1)*S/out)); bins may overlap when
    S is not a multiple of out_size. Returns (y, (h_idx, w_idx)) with the
    argmax coordinates for the backward pass.
    """
    _check_4d(x)
    n, c, h, w = x.shape
    if h < out_size or w < out_size:
        raise ShapeError(f"adaptive pool target {out_size} exceeds input {(h, w)}")
    hs, he = _adaptive_bins(h, out_size)
    ws, we = _adaptive_bins(w, out_size)
    y = np.empty((n, c, out_size, out_size), dtype=x.dtype)
    h_idx = np.empty((n, c, out_size, out_size), dtype=np.int64)
    w_idx = np.empty_like(h_idx)
    for i in range(out_size):
        for j in range(out_size):
            region = x[:, :, hs[i] : he[i], ws[j] : we[j]]
            rw = region.shape[3]
            flat = region.reshape(n, c, -1)
            loc = flat.argmax(axis=-1)
            y[:, :, i, j] = np.take_along_axis(flat, loc[..., None], axis=-1)[..., 0]
            h_idx[:, :, i, j] = hs[i] + loc // rw
            w_idx[:, :, i, j] = ws[j] + loc % rw
    return y, (h_idx, w_idx)


def adaptive_max_pool_backward(dy, idx, in_shape):
    h_idx, w_idx = idx
    n, c = in_shape[0], in_shape[1]
    dx = np.zeros(in_shape, dtype=dy.dtype)
    ngrid, cgrid = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    ngrid = ngrid[..., None, None]
    cgrid = cgrid[..., None, None]
    np.add.at(dx, (ngrid, cgrid, h_idx, w_idx), dy)
    return dx


def adaptive_avg_pool(x, out_size: int):
    _check_4d(x)
    n, c, h, w = x.shape
    if h < out_size or w < out_size:
        raise ShapeError(f"adaptive pool target {out_size} exceeds input {(h, w)}")
    hs, he = _adaptive_bins(h, out_size)
    ws, we = _adaptive_bins(w, out_size)
    y = np.empty((n, c, out_size, out_size), dtype=x.dtype)
    for i in range(out_size):
        for j in range(out_size):
            y[:, :, i, j] = x[:, :, hs[i] : he[i], ws[j] : we[j]].mean(axis=(2, 3))
    return y


def adaptive_avg_pool_backward(dy, in_shape, out_size: int):
    h, w = in_shape[2], in_shape[3]
    hs, he = _adaptive_bins(h, out_size)
    ws, we = _adaptive_bins(w, out_size)
    dx = np.zeros(in_shape, dtype=dy.dtype)
    for i in range(out_size):
        for j in range(out_size):
            count = (he[i] - hs[i]) * (we[j] - ws[j])
            dx[:, :, hs[i] : he[i], ws[j] : we[j]] += dy[:, :, i : i + 1, j : j + 1] / count
    return dx


# ---------------------------------------------------------------------------
# loss


def l1_loss(pred, target):
    """Mean absolute error and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    loss = float(np.abs(diff).mean())
    dpred = np.sign(diff) / diff.size
    return loss, dpred
