"""Hot numeric kernels, JIT-compiled when numba is available.

Two kernels dominate runtime: the valid 3D cross-correlation that turns a
voxel slab into filter-response images, and the brute-force nearest-neighbor
search used by the event-removal perturbation.  Both exist in a numba
version and a pure-numpy version; set ``EVSFA_NUMBA=0`` in the environment
to force the numpy path (the default is numba when importable).

The two nearest-neighbor paths perform the identical sequence of IEEE
operations per candidate pair, so their results are bit-equal.  The two
correlation paths may differ in the last bit because BLAS reassociates sums.
"""

import os

import numpy as np

_WANT_NUMBA = os.environ.get("EVSFA_NUMBA", "1") != "0"

try:
    if not _WANT_NUMBA:
        raise ImportError("numba disabled via EVSFA_NUMBA=0")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def _correlate_slab_numpy(slab, filters):
    a = filters.shape[1]
    view = np.lib.stride_tricks.sliding_window_view(slab, (a, a), axis=(0, 1))
    # view: (oh, ow, k, a, a); filters: (n, a, a, k)
    return np.tensordot(view, filters, axes=([3, 4, 2], [1, 2, 3])).transpose(2, 0, 1)


def _nn_indices_numpy(xs, ys, ts, t_scale):
    n = xs.shape[0]
    dx = xs[:, None] - xs[None, :]
    dy = ys[:, None] - ys[None, :]
    dt = (ts[:, None] - ts[None, :]) / t_scale
    d2 = dx * dx + dy * dy + dt * dt
    np.fill_diagonal(d2, np.inf)
    return np.argmin(d2, axis=1).astype(np.int64)


if HAVE_NUMBA:

    @njit(cache=True)
    def _correlate_slab_numba(slab, filters):
        n, a, _, k = filters.shape
        oh = slab.shape[0] - a + 1
        ow = slab.shape[1] - a + 1
        out = np.empty((n, oh, ow), dtype=np.float64)
        for f in range(n):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for dy in range(a):
                        for dx in range(a):
                            for db in range(k):
                                acc += slab[i + dy, j + dx, db] * filters[f, dy, dx, db]
                    out[f, i, j] = acc
        return out

    @njit(cache=True)
    def _nn_indices_numba(xs, ys, ts, t_scale):
        n = xs.shape[0]
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            best = np.inf
            best_j = -1
            for j in range(n):
                if j == i:
                    continue
                dx = xs[i] - xs[j]
                dy = ys[i] - ys[j]
                dt = (ts[i] - ts[j]) / t_scale
                d2 = dx * dx + dy * dy + dt * dt
                if d2 < best:  # strict: ties keep the smallest j
                    best = d2
                    best_j = j
            out[i] = best_j
        return out

    correlate_slab = _correlate_slab_numba
    nn_indices = _nn_indices_numba
else:
    correlate_slab = _correlate_slab_numpy
    nn_indices = _nn_indices_numpy
