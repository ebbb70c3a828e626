"""Optional numba-compiled kernels for memory-bound convolutions.

Dense (ungrouped) convolutions go through BLAS in ``tpnet.ops`` and do not
live here; only the grouped / depth-wise cases, which are traffic-bound
rather than FLOP-bound, benefit from a fused loop. Everything here has a
pure-numpy fallback in ``tpnet.ops`` selected when ``ENABLED`` is False
(set ``TPNET_DISABLE_NUMBA=1`` to force the fallback).
"""

from __future__ import annotations

import os

ENABLED = False
gconv_fwd = None
gconv_dw = None

if not os.environ.get("TPNET_DISABLE_NUMBA"):
    try:
        from numba import njit

        @njit(cache=True, fastmath=False)
        def _gconv_fwd(xp, w, b, y, groups):
            # xp: (N, Cin, Hp, Wp) padded input; w: (Cout, Cig, kh, kw)
            # y: (N, Cout, Ho, Wo) preallocated output
            n_img, cout = y.shape[0], y.shape[1]
            ho, wo = y.shape[2], y.shape[3]
            cig, kh, kw = w.shape[1], w.shape[2], w.shape[3]
            cog = cout // groups
            for n in range(n_img):
                for o in range(cout):
                    c0 = (o // cog) * cig
                    for i in range(ho):
                        for j in range(wo):
                            acc = b[o]
                            for ci in range(cig):
                                for a in range(kh):
                                    for t in range(kw):
                                        acc += xp[n, c0 + ci, i + a, j + t] * w[o, ci, a, t]
                            y[n, o, i, j] = acc

        @njit(cache=True, fastmath=False)
        def _gconv_dw(xp, dy, dw, groups):
            # dw: (Cout, Cig, kh, kw) preallocated zeros, accumulated in place
            n_img, cout = dy.shape[0], dy.shape[1]
            ho, wo = dy.shape[2], dy.shape[3]
            cig, kh, kw = dw.shape[1], dw.shape[2], dw.shape[3]
            cog = cout // groups
            for n in range(n_img):
                for o in range(cout):
                    c0 = (o // cog) * cig
                    for i in range(ho):
                        for j in range(wo):
                            d = dy[n, o, i, j]
                            for ci in range(cig):
                                for a in range(kh):
                                    for t in range(kw):
                                        dw[o, ci, a, t] += xp[n, c0 + ci, i + a, j + t] * d

        gconv_fwd = _gconv_fwd
        gconv_dw = _gconv_dw
        ENABLED = True
    except Exception:  # pragma: no cover - numba missing or broken
        ENABLED = False
