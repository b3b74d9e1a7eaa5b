"""conv2d patch kernels with a compiled core and a numpy fallback.

The compiled Cython extension is preferred when importable; set
``SSNN_KERNELS=numpy`` to force the fallback or ``SSNN_KERNELS=compiled``
to fail loudly when the extension is missing. ``BACKEND`` reports which
one was selected.
"""

import os

import numpy as np

from . import _pykernels

_choice = os.environ.get("SSNN_KERNELS", "auto")
if _choice not in ("auto", "compiled", "numpy"):
    raise ValueError(f"SSNN_KERNELS must be auto|compiled|numpy, got {_choice!r}")

_ck = None
if _choice in ("auto", "compiled"):
    try:
        from . import _ckernels as _ck
    except ImportError:
        if _choice == "compiled":
            raise ImportError(
                "SSNN_KERNELS=compiled but the extension is not built; "
                "run `python3 setup.py build_ext --inplace`"
            )

BACKEND = "compiled" if _ck is not None else "numpy"


if _ck is not None:

    def im2col(x, kh, kw, sh, sw):
        B, C, H, W = x.shape
        oh = (H - kh) // sh + 1
        ow = (W - kw) // sw + 1
        out = np.empty((B * oh * ow, C * kh * kw), dtype=x.dtype)
        _ck.im2col_into(np.ascontiguousarray(x), kh, kw, sh, sw, out)
        return out

    def col2im(cols, shape, kh, kw, sh, sw):
        gx = np.zeros(shape, dtype=cols.dtype)
        _ck.col2im_into(np.ascontiguousarray(cols), kh, kw, sh, sw, gx)
        return gx

else:
    im2col = _pykernels.im2col
    col2im = _pykernels.col2im
