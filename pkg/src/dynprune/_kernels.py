"""Compiled loops for the memory-bound parts of pooling and convolution.

Loop orders are fixed, so results are bit-reproducible.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def maxpool_forward(x, kernel, stride, ho, wo):
    B, C = x.shape[0], x.shape[1]
    out = np.empty((B, C, ho, wo))
    arg = np.empty((B, C, ho, wo), dtype=np.int8)
    for b in range(B):
        for c in range(C):
            xc = x[b, c]
            oc = out[b, c]
            ac = arg[b, c]
            for i in range(ho):
                r0 = i * stride
                for j in range(wo):
                    c0 = j * stride
                    best = xc[r0, c0]
                    t = 0
                    for di in range(kernel):
                        for dj in range(kernel):
                            v = xc[r0 + di, c0 + dj]
                            if v > best:
                                best = v
                                t = di * kernel + dj
                    oc[i, j] = best
                    ac[i, j] = t
    return out, arg


@njit(cache=True)
def maxpool_backward(g, arg, kernel, stride, h, w):
    B, C, ho, wo = g.shape
    dx = np.zeros((B, C, h, w))
    for b in range(B):
        for c in range(C):
            for i in range(ho):
                for j in range(wo):
                    t = arg[b, c, i, j]
                    dx[b, c, i * stride + t // kernel, j * stride + t % kernel] += g[b, c, i, j]
    return dx


@njit(cache=True)
def col2im(dcols, h, w, stride, padding):
    """Scatter-add (C, kh, kw, B, Ho, Wo) column gradients into a (B, C, H, W) image."""
    C, kh, kw, B, ho, wo = dcols.shape
    dx = np.zeros((B, C, h, w))
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                for b in range(B):
                    for r in range(ho):
                        y = r * stride + i - padding
                        if y < 0 or y >= h:
                            continue
                        for s in range(wo):
                            xx = s * stride + j - padding
                            if 0 <= xx < w:
                                dx[b, c, y, xx] += dcols[c, i, j, b, r, s]
    return dx


@njit(cache=True)
def im2col(x, kh, kw, stride, padding, ho, wo):
    """(B, C, H, W) -> (C*kh*kw, B*Ho*Wo) with zero padding; rows ordered (c, i, j)."""
    B, C, H, W = x.shape
    cols = np.empty((C * kh * kw, B * ho * wo))
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                # output columns [s_lo, s_hi) read inside the image
                s_lo = 0
                while s_lo < wo and s_lo * stride + j - padding < 0:
                    s_lo += 1
                s_hi = wo
                while s_hi > s_lo and (s_hi - 1) * stride + j - padding >= W:
                    s_hi -= 1
                for b in range(B):
                    for r in range(ho):
                        y = r * stride + i - padding
                        off = b * ho * wo + r * wo
                        if y < 0 or y >= H:
                            for s in range(wo):
                                cols[row, off + s] = 0.0
                            continue
                        for s in range(s_lo):
                            cols[row, off + s] = 0.0
                        for s in range(s_lo, s_hi):
                            cols[row, off + s] = x[b, c, y, s * stride + j - padding]
                        for s in range(s_hi, wo):
                            cols[row, off + s] = 0.0
    return cols


@njit(cache=True)
def relu_forward(x):
    """max(x, 0) in one pass; NaN stays NaN."""
    out = np.empty_like(x)
    f = x.reshape(-1)
    o = out.reshape(-1)
    for n in range(f.size):
        v = f[n]
        o[n] = 0.0 if v <= 0.0 else v
    return out


@njit(cache=True)
def relu_backward(g, out):
    dx = np.empty_like(g)
    gf = g.reshape(-1)
    of = out.reshape(-1)
    d = dx.reshape(-1)
    for n in range(gf.size):
        d[n] = gf[n] if of[n] > 0.0 else 0.0
    return dx


@njit(cache=True)
def channel_moments(x):
    """Per-channel mean and biased variance over (B, H, W), two-pass."""
    B, C, N = x.shape
    mu = np.zeros(C)
    for b in range(B):
        for c in range(C):
            acc = 0.0
            for n in range(N):
                acc += x[b, c, n]
            mu[c] += acc
    mu /= B * N
    var = np.zeros(C)
    for b in range(B):
        for c in range(C):
            m = mu[c]
            acc = 0.0
            for n in range(N):
                d = x[b, c, n] - m
                acc += d * d
            var[c] += acc
    var /= B * N
    return mu, var


@njit(cache=True)
def bn_apply(x, mean, invstd, gamma, beta):
    B, C, N = x.shape
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    for b in range(B):
        for c in range(C):
            m = mean[c]
            k = invstd[c]
            g = gamma[c]
            be = beta[c]
            for n in range(N):
                v = (x[b, c, n] - m) * k
                xhat[b, c, n] = v
                out[b, c, n] = v * g + be
    return xhat, out


@njit(cache=True)
def bn_grad_sums(g, xhat):
    B, C, N = g.shape
    dbeta = np.zeros(C)
    dgamma = np.zeros(C)
    for b in range(B):
        for c in range(C):
            s0 = 0.0
            s1 = 0.0
            for n in range(N):
                s0 += g[b, c, n]
                s1 += g[b, c, n] * xhat[b, c, n]
            dbeta[c] += s0
            dgamma[c] += s1
    return dgamma, dbeta


@njit(cache=True)
def bn_input_grad(g, xhat, scale, mean_g, mean_gx):
    """scale * (g - mean_g - xhat * mean_gx) per channel."""
    B, C, N = g.shape
    dx = np.empty_like(g)
    for b in range(B):
        for c in range(C):
            k = scale[c]
            m0 = mean_g[c]
            m1 = mean_gx[c]
            for n in range(N):
                dx[b, c, n] = k * (g[b, c, n] - m0 - xhat[b, c, n] * m1)
    return dx
