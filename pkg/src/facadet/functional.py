"""Convolution, normalisation and sampling kernels with backward rules.

Layout is NCHW throughout and convolution is cross-correlation (no kernel
flip). Out-of-bounds bilinear reads return zero.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from .tensor import ShapeError, Tensor, as_tensor, make, matmul, reshape

GN_EPS = 1e-5


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N,C,Hp,Wp) padded input -> (N, C, k, k, ho*wo) column buffer."""
    n, c = xp.shape[:2]
    if k == 1:
        return xp[:, :, : (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride].reshape(n, c, 1, 1, ho * wo)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c, k, k, ho * wo)


def _col2im(dcols: np.ndarray, shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`; ``shape`` is the padded input shape."""
    n, c = shape[:2]
    dxp = np.zeros(shape, dtype=dcols.dtype)
    dcols = dcols.reshape(n, c, k, k, ho, wo)
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, :, i, j]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation.

    Args:
        x: input of shape (N, C_in, H, W).
        weight: kernel of shape (C_out, C_in // groups, k, k).
        bias: optional (C_out,) offsets.
    """
    n, cin, h, w = x.shape
    cout, cg, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"square kernels only, got {weight.shape}")
    if cin % groups or cout % groups or cg != cin // groups:
        raise ShapeError(f"channel mismatch: input {x.shape}, weight {weight.shape}, groups={groups}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"non-positive output size {ho}x{wo} for input {x.shape}, kernel {k}, "
                         f"stride {stride}, padding {padding}")
    og = cout // groups
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, k, stride, ho, wo).reshape(n, groups, cg * k * k, ho * wo)
    wmat = weight.data.reshape(groups, og, cg * k * k)
    out = np.matmul(wmat, cols).reshape(n, cout, ho, wo)
    inputs = (x, weight) if bias is None else (x, weight, bias)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def bw(g):
        gm = g.reshape(n, groups, og, ho * wo)
        gx = gw = None
        if weight.requires_grad:
            gw = np.matmul(gm, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            dcols = np.matmul(wmat.transpose(0, 2, 1), gm).reshape(n, cin, k, k, ho * wo)
            gx = _col2im(dcols, xp.shape, k, stride, ho, wo)
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make(out, inputs, bw)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """One odd ``k x k`` kernel per channel, 'same' padding, stride 1.

    ``weight`` has shape (C, 1, k, k). Implemented as a loop over kernel taps,
    independent of the grouped path in :func:`conv2d`.
    """
    n, c, h, w = x.shape
    k = weight.shape[-1]
    if k % 2 == 0:
        raise ShapeError(f"depthwise kernels must be odd, got k={k}")
    if weight.shape != (c, 1, k, k):
        raise ShapeError(f"depthwise weight {weight.shape} does not match input channels {c}")
    p = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    wd = weight.data
    out = np.zeros(x.shape, dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += wd[None, :, 0, i, j, None, None] * xp[:, :, i:i + h, j:j + w]
    if bias is not None:
        out += bias.data.reshape(1, c, 1, 1)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gw = np.zeros_like(wd) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(k):
            for j in range(k):
                if gw is not None:
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, i:i + h, j:j + w])
                if gxp is not None:
                    gxp[:, :, i:i + h, j:j + w] += wd[None, :, 0, i, j, None, None] * g
        gx = gxp[:, :, p:p + h, p:p + w] if gxp is not None else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make(out, inputs, bw)


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = GN_EPS) -> Tensor:
    n, c, h, w = x.shape
    if c % num_groups:
        raise ShapeError(f"{c} channels not divisible into {num_groups} groups")
    xg = x.data.reshape(n, num_groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    gd = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        gx = None
        if x.requires_grad:
            dxh = (g * gd).reshape(n, num_groups, -1)
            xh = xhat.reshape(n, num_groups, -1)
            gx = (inv * (dxh - dxh.mean(axis=2, keepdims=True)
                         - xh * (dxh * xh).mean(axis=2, keepdims=True))).reshape(x.shape)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make(out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


def bilinear_sample(x: Tensor, u: Tensor, v: Tensor) -> Tensor:
    """Sample ``x`` at real positions, blending the four integer neighbours.

    Args:
        x: (N, C, H, W) source.
        u: (N, *S) column coordinates (integer value = pixel index).
        v: (N, *S) row coordinates.

    Returns:
        (N, C, *S) samples; neighbours outside the map contribute zero.
        Differentiable with respect to ``x``, ``u`` and ``v``.
    """
    u, v = as_tensor(u, x.dtype), as_tensor(v, x.dtype)
    n, c, h, w = x.shape
    if u.shape != v.shape or u.shape[0] != n:
        raise ShapeError(f"sample grids {u.shape}/{v.shape} do not match batch of {x.shape}")
    sample_shape = u.shape[1:]
    uf = u.data.reshape(n, -1)
    vf = v.data.reshape(n, -1)
    npts = uf.shape[1]
    x0 = np.floor(uf)
    y0 = np.floor(vf)
    fx = (uf - x0).astype(x.dtype)
    fy = (vf - y0).astype(x.dtype)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xf = x.data.reshape(n, c, h * w)

    corners = []  # (weight, d weight/d fx, d weight/d fy, flat index, valid)
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = np.where(valid, yi * w + xi, 0)
        wx = fx if dx else 1 - fx
        wy = fy if dy else 1 - fy
        dwx = (1 if dx else -1) * wy
        dwy = (1 if dy else -1) * wx
        corners.append((wx * wy * valid, dwx * valid, dwy * valid, idx))

    vals = []
    out = np.zeros((n, c, npts), dtype=x.dtype)
    for wgt, _, _, idx in corners:
        val = np.take_along_axis(xf, np.broadcast_to(idx[:, None, :], (n, c, npts)), axis=2)
        vals.append(val)
        out += wgt[:, None, :] * val

    def bw(g):
        g = g.reshape(n, c, npts)
        gx = gu = gv = None
        if x.requires_grad:
            gx = np.empty((n, c, h * w), dtype=x.dtype)
            for b in range(n):
                rows = np.concatenate([cr[3][b] for cr in corners])
                data = np.concatenate([cr[0][b] for cr in corners])
                cols = np.tile(np.arange(npts), 4)
                s = sparse.csr_matrix((data, (rows, cols)), shape=(h * w, npts))
                gx[b] = (s @ g[b].T).T
            gx = gx.reshape(x.shape)
        if u.requires_grad:
            gu = sum((g * val).sum(axis=1) * cr[1] for cr, val in zip(corners, vals)).reshape(u.shape)
        if v.requires_grad:
            gv = sum((g * val).sum(axis=1) * cr[2] for cr, val in zip(corners, vals)).reshape(v.shape)
        return gx, gu, gv

    return make(out.reshape((n, c) + sample_shape), (x, u, v), bw)


def deformable_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], offsets: Tensor,
                      stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """Deformable convolution without modulation masks.

    ``offsets`` has shape (N, 2*k*k, H_out, W_out); channels ``2t`` and
    ``2t+1`` hold the horizontal and vertical shift of kernel tap ``t``
    (taps in row-major order). With all offsets zero this is :func:`conv2d`.
    """
    n, cin, h, w = x.shape
    cout, cg, k, _ = weight.shape
    if cg != cin:
        raise ShapeError(f"channel mismatch: input {x.shape}, weight {weight.shape}")
    p = (k - 1) // 2 if padding is None else padding
    ho = conv_output_size(h, k, stride, p)
    wo = conv_output_size(w, k, stride, p)
    kk = k * k
    if offsets.shape != (n, 2 * kk, ho, wo):
        raise ShapeError(f"offsets must have shape {(n, 2 * kk, ho, wo)}, got {offsets.shape}")
    ti, tj = np.divmod(np.arange(kk), k)
    rows = (np.arange(ho) * stride - p)[None, :, None] + ti[:, None, None]
    cols = (np.arange(wo) * stride - p)[None, None, :] + tj[:, None, None]
    base_u = np.broadcast_to(cols, (kk, ho, wo)).astype(x.dtype)
    base_v = np.broadcast_to(rows, (kk, ho, wo)).astype(x.dtype)
    u = offsets[:, 0::2] + base_u
    v = offsets[:, 1::2] + base_v
    sampled = bilinear_sample(x, u, v)  # (N, C, kk, ho, wo)
    out = matmul(reshape(weight, (cout, cin * kk)), reshape(sampled, (n, cin * kk, ho * wo)))
    out = reshape(out, (n, cout, ho, wo))
    if bias is not None:
        out = out + reshape(bias, (1, cout, 1, 1))
    return out


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return make(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, shape (N, C, 1, 1)."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return make(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))
