"""JIT-compiled inner loops for stride-1 3x3x3 convolution.

The generic numpy lowering in :mod:`pmrf.autodiff` is memory-bound; these
kernels keep the 27-tap accumulation in registers and parallelize over
(batch, channel) slices, so results are deterministic for a fixed input
regardless of thread count. Set ``PMRF_FORCE_NUMPY=1`` to disable them.
"""

import os

import numpy as np

HAVE_NUMBA = False
if not os.environ.get("PMRF_FORCE_NUMPY"):
    try:
        import warnings

        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", message=".*TBB.*")
            from numba import njit, prange

        HAVE_NUMBA = True
    except ImportError:
        pass


if HAVE_NUMBA:

    @njit(parallel=True, fastmath=True, cache=True)
    def fwd_s1_k3(xp, w, out):
        # xp: padded input [N,C,D+2,H+2,W+2]; w: [F,C,3,3,3]; out: [N,F,D,H,W]
        n, c = xp.shape[0], xp.shape[1]
        f = w.shape[0]
        do, ho, wo = out.shape[2], out.shape[3], out.shape[4]
        for nf in prange(n * f):
            ni = nf // f
            fi = nf % f
            row = np.empty(wo, dtype=xp.dtype)
            for z in range(do):
                for y in range(ho):
                    for xi in range(wo):
                        row[xi] = 0.0
                    for ci in range(c):
                        for dz in range(3):
                            for dy in range(3):
                                xr = xp[ni, ci, z + dz, y + dy]
                                w0 = w[fi, ci, dz, dy, 0]
                                w1 = w[fi, ci, dz, dy, 1]
                                w2 = w[fi, ci, dz, dy, 2]
                                for xi in range(wo):
                                    row[xi] += w0 * xr[xi] + w1 * xr[xi + 1] + w2 * xr[xi + 2]
                    for xi in range(wo):
                        out[ni, fi, z, y, xi] = row[xi]

    @njit(parallel=True, fastmath=True, cache=True)
    def dw_s1_k3(g, xp, dw):
        # g: [N,F,D,H,W]; xp: padded input; dw: [F,C,3,3,3]
        n, f = g.shape[0], g.shape[1]
        c = xp.shape[1]
        do, ho, wo = g.shape[2], g.shape[3], g.shape[4]
        for fc in prange(f * c):
            fi = fc // c
            ci = fc % c
            for dz in range(3):
                for dy in range(3):
                    for dx in range(3):
                        acc = 0.0
                        for ni in range(n):
                            for z in range(do):
                                for y in range(ho):
                                    gr = g[ni, fi, z, y]
                                    xr = xp[ni, ci, z + dz, y + dy]
                                    s = 0.0
                                    for xi in range(wo):
                                        s += gr[xi] * xr[xi + dx]
                                    acc += s
                        dw[fi, ci, dz, dy, dx] = acc
