"""Pure-numpy implementations of the hot kernels (fallback for ``_kernels``)."""
import numpy as np


def bilinear_sample(img, rows, cols, fill):
    img = np.ascontiguousarray(img, dtype=np.float64)
    H, W = img.shape
    inside = (rows >= 0.0) & (rows <= H - 1) & (cols >= 0.0) & (cols <= W - 1)
    r = np.where(inside, rows, 0.0)
    c = np.where(inside, cols, 0.0)
    r0 = np.floor(r).astype(np.intp)
    c0 = np.floor(c).astype(np.intp)
    fr = r - r0
    fc = c - c0
    r1 = np.minimum(r0 + 1, H - 1)
    c1 = np.minimum(c0 + 1, W - 1)
    top = (1.0 - fc) * img[r0, c0] + fc * img[r0, c1]
    bot = (1.0 - fc) * img[r1, c0] + fc * img[r1, c1]
    out = (1.0 - fr) * top + fr * bot
    out[~inside] = fill
    return out


def im2col(x, kh, kw, stride, pt, pb, pl, pr):
    N, C, H, W = x.shape
    Ho = (H + pt + pb - kh) // stride + 1
    Wo = (W + pl + pr - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = np.empty((N, C, kh, kw, Ho, Wo), dtype=x.dtype)
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, di, dj] = xp[:, :, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride]
    return cols.reshape(N, C * kh * kw, Ho * Wo)


def col2im(cols, C, H, W, kh, kw, stride, pt, pb, pl, pr):
    N = cols.shape[0]
    Ho = (H + pt + pb - kh) // stride + 1
    Wo = (W + pl + pr - kw) // stride + 1
    if cols.shape[1:] != (C * kh * kw, Ho * Wo):
        raise ValueError(f"col2im: cols shape {cols.shape} does not match ({N}, {C * kh * kw}, {Ho * Wo})")
    c6 = cols.reshape(N, C, kh, kw, Ho, Wo)
    xp = np.zeros((N, C, H + pt + pb, W + pl + pr), dtype=cols.dtype)
    for di in range(kh):
        for dj in range(kw):
            xp[:, :, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride] += c6[:, :, di, dj]
    return np.ascontiguousarray(xp[:, :, pt:pt + H, pl:pl + W])
