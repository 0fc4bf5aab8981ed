"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

All kernels take float32 operands and accumulate in float64. The module-level
names (``matmul``, ``conv2d_forward``, ...) resolve to the numba version
unless ``NCTJ_DISABLE_NUMBA`` is set; the ``*_numba`` / ``*_numpy`` names are
always importable for benchmarking and cross-checking.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import njit, pick

# ---------------------------------------------------------------------------
# matmul


def _matmul_loops(a, b):
    p, q = a.shape
    r = b.shape[1]
    out = np.empty((p, r), dtype=np.float32)
    acc = np.empty(r, dtype=np.float64)
    for i in range(p):
        acc[:] = 0.0
        for k in range(q):
            aik = np.float64(a[i, k])
            if aik != 0.0:
                for j in range(r):
                    acc[j] += aik * b[k, j]
        for j in range(r):
            out[i, j] = acc[j]
    return out


def matmul_numpy(a, b):
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


matmul_numba = njit(_matmul_loops)
matmul = pick(matmul_numba, matmul_numpy)

# ---------------------------------------------------------------------------
# 3x3 conv, stride 1, padding 1 (cross-correlation)


def _conv2d_forward_loops(x, k):
    n_, c_, h_, w_ = x.shape
    f_ = k.shape[0]
    out = np.empty((n_, f_, h_, w_), dtype=np.float32)
    for n in range(n_):
        for f in range(f_):
            for i in range(h_):
                for j in range(w_):
                    acc = 0.0
                    for c in range(c_):
                        for di in range(3):
                            ii = i + di - 1
                            if ii < 0 or ii >= h_:
                                continue
                            for dj in range(3):
                                jj = j + dj - 1
                                if jj < 0 or jj >= w_:
                                    continue
                                acc += np.float64(x[n, c, ii, jj]) * k[f, c, di, dj]
                    out[n, f, i, j] = acc
    return out


def _conv2d_backward_loops(x, k, gout):
    n_, c_, h_, w_ = x.shape
    f_ = k.shape[0]
    gx = np.zeros((n_, c_, h_, w_), dtype=np.float64)
    gk = np.zeros((f_, c_, 3, 3), dtype=np.float64)
    for n in range(n_):
        for f in range(f_):
            for i in range(h_):
                for j in range(w_):
                    g = np.float64(gout[n, f, i, j])
                    if g == 0.0:
                        continue
                    for c in range(c_):
                        for di in range(3):
                            ii = i + di - 1
                            if ii < 0 or ii >= h_:
                                continue
                            for dj in range(3):
                                jj = j + dj - 1
                                if jj < 0 or jj >= w_:
                                    continue
                                gx[n, c, ii, jj] += g * k[f, c, di, dj]
                                gk[f, c, di, dj] += g * x[n, c, ii, jj]
    return gx.astype(np.float32), gk.astype(np.float32)


def _im2col(x):
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
    # (N, C, H, W, 3, 3)
    return sliding_window_view(xp, (3, 3), axis=(2, 3))


def conv2d_forward_numpy(x, k):
    cols = _im2col(x)
    out = np.einsum("nchwij,fcij->nfhw", cols, k.astype(np.float64), optimize=True)
    return out.astype(np.float32)


def conv2d_backward_numpy(x, k, gout):
    cols = _im2col(x)
    g = gout.astype(np.float64)
    gk = np.einsum("nchwij,nfhw->fcij", cols, g, optimize=True)
    n_, c_, h_, w_ = x.shape
    gxp = np.zeros((n_, c_, h_ + 2, w_ + 2), dtype=np.float64)
    k64 = k.astype(np.float64)
    for di in range(3):
        for dj in range(3):
            gxp[:, :, di:di + h_, dj:dj + w_] += np.einsum(
                "nfhw,fc->nchw", g, k64[:, :, di, dj], optimize=True
            )
    gx = gxp[:, :, 1:h_ + 1, 1:w_ + 1]
    return gx.astype(np.float32), gk.astype(np.float32)


conv2d_forward_numba = njit(_conv2d_forward_loops)
conv2d_backward_numba = njit(_conv2d_backward_loops)
conv2d_forward = pick(conv2d_forward_numba, conv2d_forward_numpy)
conv2d_backward = pick(conv2d_backward_numba, conv2d_backward_numpy)

# ---------------------------------------------------------------------------
# xoshiro256** block generator

_MASK64 = (1 << 64) - 1


def _xoshiro_fill_loops(state, out):
    s0 = state[0]
    s1 = state[1]
    s2 = state[2]
    s3 = state[3]
    for i in range(out.shape[0]):
        x = s1 * np.uint64(5)
        x = (x << np.uint64(7)) | (x >> np.uint64(57))
        out[i] = x * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3


def xoshiro_fill_python(state, out):
    """Reference generator on Python ints; mutates ``state`` in place."""
    s0, s1, s2, s3 = (int(v) for v in state)
    for i in range(out.shape[0]):
        x = (s1 * 5) & _MASK64
        x = ((x << 7) | (x >> 57)) & _MASK64
        out[i] = (x * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
    state[:] = np.array([s0, s1, s2, s3], dtype=np.uint64)


xoshiro_fill_numba = njit(_xoshiro_fill_loops)
xoshiro_fill = pick(xoshiro_fill_numba, xoshiro_fill_python)

# ---------------------------------------------------------------------------
# Fisher-Yates driven by pre-drawn uniforms


def _fisher_yates_loops(perm, u):
    n = perm.shape[0]
    for i in range(n - 1, 0, -1):
        j = int(u[n - 1 - i] * (i + 1))
        if j > i:
            j = i
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp


def fisher_yates_python(perm, u):
    n = perm.shape[0]
    js = np.minimum((u[: max(n - 1, 0)] * np.arange(n, 1, -1)).astype(np.int64),
                    np.arange(n - 1, 0, -1))
    for step, i in enumerate(range(n - 1, 0, -1)):
        j = js[step]
        perm[i], perm[j] = perm[j], perm[i]


fisher_yates_numba = njit(_fisher_yates_loops)
fisher_yates = pick(fisher_yates_numba, fisher_yates_python)

# ---------------------------------------------------------------------------
# within-class scatter: (1/K) sum_k (1/n_k) sum_{x in k} (x - mu_k)(x - mu_k)^T


def _within_scatter_loops(feats, labels, means, counts):
    n, m = feats.shape
    k_ = means.shape[0]
    per_class = np.zeros((k_, m, m), dtype=np.float64)
    d = np.empty(m, dtype=np.float64)
    for s in range(n):
        c = labels[s]
        for a in range(m):
            d[a] = feats[s, a] - means[c, a]
        for a in range(m):
            da = d[a]
            for b in range(a, m):
                per_class[c, a, b] += da * d[b]
    out = np.zeros((m, m), dtype=np.float64)
    for c in range(k_):
        inv = 1.0 / counts[c]
        for a in range(m):
            for b in range(a, m):
                out[a, b] += per_class[c, a, b] * inv
    for a in range(m):
        for b in range(a, m):
            out[a, b] /= k_
            out[b, a] = out[a, b]
    return out


def within_scatter_numpy(feats, labels, means, counts):
    k_, m = means.shape
    out = np.zeros((m, m), dtype=np.float64)
    for c in range(k_):
        d = feats[labels == c] - means[c]
        out += (d.T @ d) / counts[c]
    out /= k_
    return (out + out.T) / 2.0


within_scatter_numba = njit(_within_scatter_loops)
within_scatter = pick(within_scatter_numba, within_scatter_numpy)
