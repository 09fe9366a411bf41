"""Differentiable layer primitives in NHWC layout with hand-written adjoints.

Each forward returns (out, cache); the matching backward consumes the cache
and the upstream gradient and returns gradients for its inputs and
parameters. Convolutions are materialized as a column matrix (9 shifted
slices for 3x3 kernels) so the heavy work is a single BLAS matmul.
"""

from __future__ import annotations

import numpy as np


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-x) saturating to inf for very negative x yields the correct 0.0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def silu_fwd(x: np.ndarray):
    s = sigmoid(x)
    return x * s, (x, s)


def silu_bwd(dout: np.ndarray, cache):
    x, s = cache
    return dout * (s * (1.0 + x * (1.0 - s)))


def linear_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, (x, w)


def linear_bwd(dout: np.ndarray, cache):
    x, w = cache
    dx = dout @ w.T
    dw = x.T @ dout
    db = dout.sum(axis=0)
    return dx, dw, db


def _conv_cols(x: np.ndarray, k: int, stride: int, pad: int):
    """Column matrix (B, Ho, Wo, k*k*Cin) of receptive fields, plus geometry."""
    B, H, W, C = x.shape
    if pad:
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    else:
        xp = x
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if k == 1 and stride == 1:
        return xp, Ho, Wo
    slices = [
        xp[:, di : di + Ho * stride : stride, dj : dj + Wo * stride : stride, :]
        for di in range(k)
        for dj in range(k)
    ]
    return np.concatenate(slices, axis=3), Ho, Wo


def conv2d_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 1):
    """2D convolution; w has shape (k, k, Cin, Cout)."""
    k = w.shape[0]
    cols, Ho, Wo = _conv_cols(x, k, stride, pad)
    B = x.shape[0]
    kkc = w.shape[0] * w.shape[1] * w.shape[2]
    out = cols.reshape(-1, kkc) @ w.reshape(kkc, -1) + b
    out = out.reshape(B, Ho, Wo, w.shape[3])
    cache = (cols, w, x.shape, stride, pad)
    return out, cache


def conv2d_bwd(dout: np.ndarray, cache):
    cols, w, x_shape, stride, pad = cache
    k = w.shape[0]
    B, H, W, Cin = x_shape
    _, Ho, Wo, Cout = dout.shape
    kkc = k * k * Cin
    dout2 = dout.reshape(-1, Cout)
    dw = (cols.reshape(-1, kkc).T @ dout2).reshape(w.shape)
    db = dout2.sum(axis=0)
    dcols = (dout2 @ w.reshape(kkc, Cout).T).reshape(B, Ho, Wo, k * k, Cin)
    if k == 1 and stride == 1:
        dxp = dcols[:, :, :, 0, :]
    else:
        dxp = np.zeros((B, H + 2 * pad, W + 2 * pad, Cin), dtype=dout.dtype)
        idx = 0
        for di in range(k):
            for dj in range(k):
                dxp[
                    :, di : di + Ho * stride : stride, dj : dj + Wo * stride : stride, :
                ] += dcols[:, :, :, idx, :]
                idx += 1
    if pad:
        dx = dxp[:, pad : pad + H, pad : pad + W, :]
    else:
        dx = dxp
    return np.ascontiguousarray(dx), dw, db


_GN_EPS = 1e-5


def groupnorm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, groups: int):
    B, H, W, C = x.shape
    g = x.reshape(B, H, W, groups, C // groups)
    mean = g.mean(axis=(1, 2, 4), keepdims=True)
    centered = g - mean
    var = np.mean(centered * centered, axis=(1, 2, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + _GN_EPS)
    xhat = (centered * inv).reshape(B, H, W, C)
    out = xhat * gamma + beta
    return out, (xhat, inv, gamma, groups)


def groupnorm_bwd(dout: np.ndarray, cache):
    xhat, inv, gamma, groups = cache
    B, H, W, C = dout.shape
    dgamma = (dout * xhat).sum(axis=(0, 1, 2))
    dbeta = dout.sum(axis=(0, 1, 2))
    dxhat = (dout * gamma).reshape(B, H, W, groups, C // groups)
    xh = xhat.reshape(B, H, W, groups, C // groups)
    n = H * W * (C // groups)
    # dx = inv/n * (n*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
    s1 = dxhat.sum(axis=(1, 2, 4), keepdims=True)
    s2 = (dxhat * xh).sum(axis=(1, 2, 4), keepdims=True)
    dx = (inv / n) * (n * dxhat - s1 - xh * s2)
    return dx.reshape(B, H, W, C), dgamma, dbeta


def upsample2_fwd(x: np.ndarray):
    """Nearest-neighbour x2 upsampling."""
    return x.repeat(2, axis=1).repeat(2, axis=2), x.shape


def upsample2_bwd(dout: np.ndarray, x_shape):
    B, H, W, C = x_shape
    return dout.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4))


def attention_fwd(x: np.ndarray, wq, wk, wv, wp, bp):
    """Single-head self-attention over the spatial grid (per image).

    The q/k/v projections are bias-free: a key bias shifts every softmax row
    by a constant and is a dead parameter, so none are allocated.
    """
    B, H, W, C = x.shape
    n = H * W
    f = x.reshape(B, n, C)
    q = f @ wq
    k = f @ wk
    v = f @ wv
    scale = 1.0 / np.sqrt(C)
    scores = (q @ k.transpose(0, 2, 1)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    o = attn @ v
    out = o @ wp + bp
    cache = (f, q, k, v, attn, o, wq, wk, wv, wp, scale, x.shape)
    return out.reshape(x.shape), cache


def attention_bwd(dout: np.ndarray, cache):
    f, q, k, v, attn, o, wq, wk, wv, wp, scale, x_shape = cache
    B, H, W, C = x_shape
    n = H * W
    d = dout.reshape(B, n, C)
    dwp = np.einsum("bnc,bnd->cd", o, d)
    dbp = d.sum(axis=(0, 1))
    do = d @ wp.T
    dattn = do @ v.transpose(0, 2, 1)
    dv = attn.transpose(0, 2, 1) @ do
    # softmax backward over the last axis
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores *= scale
    dq = dscores @ k
    dk = dscores.transpose(0, 2, 1) @ q
    dwq = np.einsum("bnc,bnd->cd", f, dq)
    dwk = np.einsum("bnc,bnd->cd", f, dk)
    dwv = np.einsum("bnc,bnd->cd", f, dv)
    df = dq @ wq.T + dk @ wk.T + dv @ wv.T
    return df.reshape(x_shape), dwq, dwk, dwv, dwp, dbp
