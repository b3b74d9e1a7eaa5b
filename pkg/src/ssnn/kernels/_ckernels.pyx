# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled conv2d patch kernels: im2col gather and col2im scatter-add.

These are the only non-GEMM hot loops in training; everything else is
either a BLAS call or cheap elementwise numpy.
"""

import numpy as np

ctypedef fused real:
    float
    double


def im2col_into(real[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
                Py_ssize_t sh, Py_ssize_t sw, real[:, ::1] out):
    """Gather sliding patches of a padded (B, C, H, W) array into
    (B*OH*OW, C*kh*kw) rows. `out` must be preallocated."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = (H - kh) // sh + 1
    cdef Py_ssize_t OW = (W - kw) // sw + 1
    cdef Py_ssize_t b, oh, ow, c, ki, kj, r, q, ih, iw

    for b in range(B):
        for oh in range(OH):
            for ow in range(OW):
                r = (b * OH + oh) * OW + ow
                q = 0
                for c in range(C):
                    for ki in range(kh):
                        ih = oh * sh + ki
                        iw = ow * sw
                        for kj in range(kw):
                            out[r, q] = x[b, c, ih, iw + kj]
                            q += 1


def col2im_into(real[:, ::1] cols, Py_ssize_t kh, Py_ssize_t kw,
                Py_ssize_t sh, Py_ssize_t sw, real[:, :, :, ::1] gx):
    """Scatter-add (B*OH*OW, C*kh*kw) patch rows back onto the padded
    (B, C, H, W) gradient array. `gx` must be zero-initialized."""
    cdef Py_ssize_t B = gx.shape[0], C = gx.shape[1], H = gx.shape[2], W = gx.shape[3]
    cdef Py_ssize_t OH = (H - kh) // sh + 1
    cdef Py_ssize_t OW = (W - kw) // sw + 1
    cdef Py_ssize_t b, oh, ow, c, ki, kj, r, q, ih, iw

    for b in range(B):
        for oh in range(OH):
            for ow in range(OW):
                r = (b * OH + oh) * OW + ow
                q = 0
                for c in range(C):
                    for ki in range(kh):
                        ih = oh * sh + ki
                        iw = ow * sw
                        for kj in range(kw):
                            gx[b, c, ih, iw + kj] += cols[r, q]
                            q += 1
