"""Pure-numpy fallback for the conv2d patch kernels."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, sh, sw):
    B, C, H, W = x.shape
    oh = (H - kh) // sh + 1
    ow = (W - kw) // sw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    # (B, C, OH, OW, kh, kw) -> (B*OH*OW, C*kh*kw); reshape forces the copy
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * oh * ow, C * kh * kw)


def col2im(cols, shape, kh, kw, sh, sw):
    B, C, H, W = shape
    oh = (H - kh) // sh + 1
    ow = (W - kw) // sw + 1
    gx = np.zeros(shape, dtype=cols.dtype)
    c6 = cols.reshape(B, oh, ow, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for ki in range(kh):
        for kj in range(kw):
            # distinct (ki, kj) offsets never collide within one slice-add
            gx[:, :, ki:ki + sh * oh:sh, kj:kj + sw * ow:sw] += c6[:, :, ki, kj]
    return gx
