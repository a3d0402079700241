"""Differentiable network primitives on H x W x C float64 fields.

Every forward has a matching backward that is the exact
derivative/adjoint; all of them are checked against central finite
differences by the gradcheck suite.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import InvalidArgumentError

UPSAMPLE_FACTORS = (2, 4, 8)


def _as_field(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise InvalidArgumentError(f"{name} must be H x W x C, got shape {x.shape}")
    return x


def conv2d(x, filters, bias, stride=1, padding=0):
    """Cross-correlate x (H,W,Cin) with filters (Cout,Cin,kh,kw) + bias."""
    x = _as_field(x, "input")
    filters = np.asarray(filters, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if filters.ndim != 4:
        raise InvalidArgumentError("filters must be Cout x Cin x kh x kw")
    cout, cin, kh, kw = filters.shape
    if x.shape[2] != cin:
        raise InvalidArgumentError(
            f"input has {x.shape[2]} channels, filters expect {cin}"
        )
    if bias.shape != (cout,):
        raise InvalidArgumentError("bias shape must match output channels")
    xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
    if xp.shape[0] < kh or xp.shape[1] < kw:
        raise InvalidArgumentError("kernel larger than padded input")
    patches = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride]
    return np.einsum("hwckl,ockl->hwo", patches, filters, optimize=True) + bias


def conv2d_backward(dout, x, filters, stride=1, padding=0):
    """Gradients of conv2d: returns (dx, dfilters, dbias)."""
    x = _as_field(x, "input")
    dout = np.asarray(dout, dtype=np.float64)
    cout, cin, kh, kw = filters.shape
    xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
    patches = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride]
    dbias = dout.sum(axis=(0, 1))
    dfilters = np.einsum("hwckl,hwo->ockl", patches, dout, optimize=True)
    dxp = np.zeros_like(xp)
    ho, wo = dout.shape[:2]
    for u in range(kh):
        for v in range(kw):
            dxp[u : u + stride * ho : stride, v : v + stride * wo : stride] += (
                np.einsum("hwo,oc->hwc", dout, filters[:, :, u, v], optimize=True)
            )
    h, w = x.shape[:2]
    dx = dxp[padding : padding + h, padding : padding + w]
    return dx, dfilters, dbias


def maxpool2x2(x):
    """2x2/stride-2 max pooling.  Returns (pooled, indices).

    indices[i,j,c] in 0..3 is the window-relative argmax position in
    row-major order; ties break toward the top-left.  Odd spatial dims
    are rejected.
    """
    x = _as_field(x, "input")
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise InvalidArgumentError(f"maxpool2x2 needs even dims, got {h}x{w}")
    win = x.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 4, 1, 3).reshape(
        h // 2, w // 2, c, 4
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def unpool2x2(y, indices, out_shape):
    """Place each pooled value at its memorized window position, zeros elsewhere."""
    y = _as_field(y, "input")
    h2, w2, c = y.shape
    if indices.shape != (h2, w2, c):
        raise InvalidArgumentError("indices shape does not match input")
    if len(out_shape) < 2 or out_shape[0] != 2 * h2 or out_shape[1] != 2 * w2:
        raise InvalidArgumentError(
            f"out_shape {tuple(out_shape[:2])} inconsistent with {h2}x{w2} input"
        )
    if indices.min() < 0 or indices.max() > 3:
        raise InvalidArgumentError("indices must lie inside 2x2 windows")
    full = np.zeros((h2, w2, c, 4))
    np.put_along_axis(full, indices[..., None], y[..., None], axis=-1)
    return (
        full.reshape(h2, w2, c, 2, 2)
        .transpose(0, 3, 1, 4, 2)
        .reshape(2 * h2, 2 * w2, c)
    )


def unpool2x2_backward(dout, indices):
    """Adjoint of unpool: gather upstream values at the memorized positions."""
    dout = _as_field(dout, "gradient")
    h, w, c = dout.shape
    win = dout.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 4, 1, 3).reshape(
        h // 2, w // 2, c, 4
    )
    return np.take_along_axis(win, indices[..., None], axis=-1)[..., 0]


def maxpool2x2_backward(dout, indices, in_shape):
    """Adjoint of maxpool: scatter gradients to the argmax positions."""
    return unpool2x2(dout, indices, in_shape)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dout, x):
    # subgradient 0 at x == 0
    return dout * (x > 0)


def softplus(x):
    """log(1 + e^x), the positivity map for pairwise affinities."""
    return np.logaddexp(0.0, x)


def softplus_backward(dout, x):
    return dout * expit(x)


def _interp_matrix(n_out, n_in, factor):
    """Row-interpolation matrix for align-corners-false bilinear upsampling."""
    pos = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = pos - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - w1)
    np.add.at(m, (rows, i1), w1)
    return m


def _check_factor(factor):
    if factor not in UPSAMPLE_FACTORS:
        raise InvalidArgumentError(f"upsample factor must be one of {UPSAMPLE_FACTORS}")


def bilinear_upsample(x, factor):
    """Upsample by an integer factor with align-corners-false semantics."""
    x = _as_field(x, "input")
    _check_factor(factor)
    h, w, _ = x.shape
    my = _interp_matrix(h * factor, h, factor)
    mx = _interp_matrix(w * factor, w, factor)
    return np.einsum("ih,jw,hwc->ijc", my, mx, x, optimize=True)


def bilinear_upsample_backward(dout, factor, in_shape):
    """Transpose of bilinear_upsample."""
    dout = _as_field(dout, "gradient")
    _check_factor(factor)
    h, w = in_shape[:2]
    my = _interp_matrix(h * factor, h, factor)
    mx = _interp_matrix(w * factor, w, factor)
    return np.einsum("ih,jw,ijc->hwc", my, mx, dout, optimize=True)
