"""Forward/backward pairs for the 3-D layers of the registration network.

Feature maps have shape ``(N, C, X, Y, Z)``. Every ``*_forward`` returns
``(out, cache)`` and the matching ``*_backward`` takes ``(dout, cache)``.
"""

from __future__ import annotations

import numpy as np


# im2col buffers above this many elements fall back to a per-offset loop
IM2COL_MAX_ELEMENTS = 1 << 24


def _im2col(xp, k, X, Y, Z):
    """``(N, Cin * k**3, X*Y*Z)`` columns; row order matches ``w.reshape(Cout, -1)``."""
    n, cin = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    # win: (N, Cin, X, Y, Z, k, k, k) -> (N, Cin, k, k, k, X, Y, Z)
    cols = np.ascontiguousarray(win.transpose(0, 1, 5, 6, 7, 2, 3, 4))
    return cols.reshape(n, cin * k ** 3, X * Y * Z)


def _use_im2col(n, cin, k, V) -> bool:
    return n * cin * k ** 3 * V <= IM2COL_MAX_ELEMENTS


def conv3d_forward(x, w, b):
    """'Same' 3-D cross-correlation with zero padding.

    - x: input of shape (N, Cin, X, Y, Z)
    - w: kernel of shape (Cout, Cin, k, k, k), k odd
    - b: bias of shape (Cout,)
    """
    n, cin, X, Y, Z = x.shape
    cout, cin_w, k = w.shape[0], w.shape[1], w.shape[2]
    if cin != cin_w or w.shape[2:] != (k, k, k) or b.shape != (cout,):
        raise ValueError(f"conv shapes do not match: x {x.shape}, w {w.shape}, b {b.shape}")
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    r = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r), (r, r))) if r else x
    V = X * Y * Z
    if _use_im2col(n, cin, k, V):
        out = np.matmul(w.reshape(cout, -1), _im2col(xp, k, X, Y, Z))
    else:
        out = np.zeros((n, cout, V))
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    patch = xp[:, :, i:i + X, j:j + Y, l:l + Z].reshape(n, cin, V)
                    out += np.matmul(w[:, :, i, j, l], patch)
    out += b[None, :, None]
    return out.reshape(n, cout, X, Y, Z), (xp, w, x.shape)


def conv3d_backward(dout, cache):
    xp, w, xshape = cache
    n, cin, X, Y, Z = xshape
    cout, k = w.shape[0], w.shape[2]
    r = k // 2
    V = X * Y * Z
    d = dout.reshape(n, cout, V)
    if _use_im2col(n, cin, k, V) and _use_im2col(n, cout, k, V):
        cols = _im2col(xp, k, X, Y, Z)
        dw = np.sum(np.matmul(d, cols.transpose(0, 2, 1)), axis=0).reshape(w.shape)
        # dx is the 'same' correlation of dout with the flipped, transposed kernel
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        dp = np.pad(dout, ((0, 0), (0, 0), (r, r), (r, r), (r, r))) if r else dout
        dx = np.matmul(wt.reshape(cin, -1), _im2col(dp, k, X, Y, Z)).reshape(xshape)
        return dx, dw, d.sum(axis=(0, 2))

    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                patch = xp[:, :, i:i + X, j:j + Y, l:l + Z].reshape(n, cin, V)
                dw[:, :, i, j, l] = np.sum(np.matmul(d, patch.transpose(0, 2, 1)), axis=0)
                dxp[:, :, i:i + X, j:j + Y, l:l + Z] += np.matmul(
                    w[:, :, i, j, l].T, d).reshape(n, cin, X, Y, Z)
    db = d.sum(axis=(0, 2))
    dx = dxp[:, :, r:r + X, r:r + Y, r:r + Z] if r else dxp
    return dx, dw, db


def leaky_relu_forward(x, slope: float = 0.2):
    return np.where(x > 0, x, slope * x), (x, slope)


def leaky_relu_backward(dout, cache):
    x, slope = cache
    return np.where(x > 0, dout, slope * dout)


def maxpool3d_forward(x):
    """2x2x2 max pooling with stride 2; ties route to the first index in the window."""
    n, c, X, Y, Z = x.shape
    if X % 2 or Y % 2 or Z % 2:
        raise RuntimeError(f"max pooling needs even spatial dims, got {(X, Y, Z)}")
    win = (x.reshape(n, c, X // 2, 2, Y // 2, 2, Z // 2, 2)
           .transpose(0, 1, 2, 4, 6, 3, 5, 7)
           .reshape(n, c, X // 2, Y // 2, Z // 2, 8))
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool3d_backward(dout, cache):
    idx, xshape = cache
    n, c, X, Y, Z = xshape
    win = np.zeros(dout.shape + (8,))
    np.put_along_axis(win, idx[..., None], dout[..., None], axis=-1)
    return (win.reshape(n, c, X // 2, Y // 2, Z // 2, 2, 2, 2)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(xshape))


def _upsample_matrix(n: int) -> np.ndarray:
    """Linear 2x upsampling along one axis, half-voxel aligned, edges clamped."""
    src = np.clip((np.arange(2 * n) + 0.5) / 2.0 - 0.5, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    t = src - lo
    m = np.zeros((2 * n, n))
    np.add.at(m, (np.arange(2 * n), lo), 1.0 - t)
    np.add.at(m, (np.arange(2 * n), hi), t)
    return m


def _apply_axis(x, m, axis):
    return np.moveaxis(np.tensordot(x, m, axes=([axis], [1])), -1, axis)


def upsample_trilinear_forward(x):
    mats = [_upsample_matrix(s) for s in x.shape[2:]]
    out = x
    for ax, m in zip((2, 3, 4), mats):
        out = _apply_axis(out, m, ax)
    return out, mats


def upsample_trilinear_backward(dout, cache):
    mats = cache
    dx = dout
    for ax, m in zip((2, 3, 4), mats):
        dx = _apply_axis(dx, m.T, ax)
    return dx


def batchnorm3d_forward(x, gamma, beta, running_mean, running_var, mode: str = "train",
                        momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel normalization over batch and spatial axes.

    In train mode batch statistics are used and the running buffers are
    updated in place; in infer mode the running buffers are used.
    """
    axes = (0, 2, 3, 4)
    shape = (1, -1, 1, 1, 1)
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        count = x.size // x.shape[1]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        unbiased = var * count / max(count - 1, 1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    elif mode == "infer":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out, (xhat, inv_std, gamma, mode)


def batchnorm3d_backward(dout, cache):
    xhat, inv_std, gamma, mode = cache
    axes = (0, 2, 3, 4)
    shape = (1, -1, 1, 1, 1)
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    dxhat = dout * gamma.reshape(shape)
    if mode == "infer":
        return dxhat * inv_std.reshape(shape), dgamma, dbeta
    m = dout.size // dout.shape[1]
    dx = (inv_std.reshape(shape) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(shape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
    )
    return dx, dgamma, dbeta


def concat_forward(a, b):
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_backward(dout, cache):
    ca = cache
    return dout[:, :ca], dout[:, ca:]
