# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: bilinear polar resampling and im2col/col2im.

Every function here has a numpy twin in ``_kernels_py`` with identical
semantics; ``echoscape.kernels`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor
from libc.string cimport memcpy, memset

cnp.import_array()

ctypedef fused real:
    float
    double


def bilinear_sample(const double[:, ::1] img, const double[:, ::1] rows,
                    const double[:, ::1] cols, double fill):
    cdef Py_ssize_t H = img.shape[0], W = img.shape[1]
    cdef Py_ssize_t Ho = rows.shape[0], Wo = rows.shape[1]
    out_arr = np.empty((Ho, Wo), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, r0, c0, r1, c1
    cdef double r, c, fr, fc
    for i in range(Ho):
        for j in range(Wo):
            r = rows[i, j]
            c = cols[i, j]
            if not (r >= 0.0 and r <= H - 1 and c >= 0.0 and c <= W - 1):
                out[i, j] = fill
                continue
            r0 = <Py_ssize_t>floor(r)
            c0 = <Py_ssize_t>floor(c)
            fr = r - r0
            fc = c - c0
            r1 = r0 + 1 if r0 + 1 < H else r0
            c1 = c0 + 1 if c0 + 1 < W else c0
            out[i, j] = ((1.0 - fr) * ((1.0 - fc) * img[r0, c0] + fc * img[r0, c1])
                         + fr * ((1.0 - fc) * img[r1, c0] + fc * img[r1, c1]))
    return out_arr


cdef inline void _valid_range(Py_ssize_t d, Py_ssize_t pad, Py_ssize_t size,
                              Py_ssize_t stride, Py_ssize_t n_out,
                              Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output indices o with 0 <= o*stride + d - pad < size
    cdef Py_ssize_t a = pad - d
    cdef Py_ssize_t l = 0 if a <= 0 else (a + stride - 1) // stride
    cdef Py_ssize_t b = size - 1 + pad - d
    cdef Py_ssize_t h = -1 if b < 0 else b // stride
    h += 1
    if h > n_out:
        h = n_out
    lo[0] = l
    hi[0] = h if h > l else l


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride,
           int pt, int pb, int pl, int pr):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + pt + pb - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + pl + pr - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((N, C * kh * kw, Ho * Wo), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, di, dj, oi, oj, row, ii, i_lo, i_hi, j_lo, j_hi, base
    cdef real* dst
    cdef const real* src
    with nogil:
        for n in range(N):
            for c in range(C):
                for di in range(kh):
                    _valid_range(di, pt, H, stride, Ho, &i_lo, &i_hi)
                    for dj in range(kw):
                        _valid_range(dj, pl, W, stride, Wo, &j_lo, &j_hi)
                        row = (c * kh + di) * kw + dj
                        base = dj - pl
                        for oi in range(Ho):
                            dst = &out[n, row, oi * Wo]
                            if oi < i_lo or oi >= i_hi:
                                memset(dst, 0, Wo * sizeof(real))
                                continue
                            ii = oi * stride + di - pt
                            src = &x[n, c, ii, 0]
                            if j_lo > 0:
                                memset(dst, 0, j_lo * sizeof(real))
                            if stride == 1:
                                memcpy(dst + j_lo, src + j_lo + base, (j_hi - j_lo) * sizeof(real))
                            else:
                                for oj in range(j_lo, j_hi):
                                    dst[oj] = src[oj * stride + base]
                            if j_hi < Wo:
                                memset(dst + j_hi, 0, (Wo - j_hi) * sizeof(real))
    return out_arr


def col2im(real[:, :, ::1] cols, int C, int H, int W, int kh, int kw, int stride,
           int pt, int pb, int pl, int pr):
    cdef Py_ssize_t N = cols.shape[0]
    cdef Py_ssize_t Ho = (H + pt + pb - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + pl + pr - kw) // stride + 1
    if cols.shape[1] != C * kh * kw or cols.shape[2] != Ho * Wo:
        raise ValueError(f"col2im: cols shape {tuple(cols.shape)[:3]} does not match "
                         f"({N}, {C * kh * kw}, {Ho * Wo})")
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((N, C, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, di, dj, oi, oj, row, ii, i_lo, i_hi, j_lo, j_hi, base
    cdef real* dst
    cdef const real* src
    with nogil:
        for n in range(N):
            for c in range(C):
                for di in range(kh):
                    _valid_range(di, pt, H, stride, Ho, &i_lo, &i_hi)
                    for dj in range(kw):
                        _valid_range(dj, pl, W, stride, Wo, &j_lo, &j_hi)
                        row = (c * kh + di) * kw + dj
                        for oi in range(i_lo, i_hi):
                            ii = oi * stride + di - pt
                            src = &cols[n, row, oi * Wo]
                            dst = &out[n, c, ii, 0]
                            base = dj - pl
                            for oj in range(j_lo, j_hi):
                                dst[oj * stride + base] += src[oj]
    return out_arr
