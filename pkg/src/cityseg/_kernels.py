"""Hot spatial kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``CITYSEG_DISABLE_NUMBA`` is unset (or ``0``).  Both paths are
always importable as ``np_*`` / ``nb_*`` so tests and the benchmark can
compare them directly.
"""
from __future__ import annotations

import os

import numpy as np

CURVE_BITS = 21
_MASK21 = (1 << CURVE_BITS) - 1


def _numba_requested() -> bool:
    flag = os.environ.get("CITYSEG_DISABLE_NUMBA", "").strip().lower()
    return flag in ("", "0", "false", "no")


try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


# ---------------------------------------------------------------- numpy path

def _part1by2(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(_MASK21)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def np_morton_encode(q: np.ndarray) -> np.ndarray:
    """Interleave bits of non-negative int coords, x in the lowest bit."""
    q = np.asarray(q, dtype=np.int64).reshape(-1, 3)
    return _part1by2(q[:, 0]) | (_part1by2(q[:, 1]) << np.uint64(1)) | (
        _part1by2(q[:, 2]) << np.uint64(2)
    )


def np_hilbert_encode(q: np.ndarray, bits: int = CURVE_BITS) -> np.ndarray:
    # Skilling's axes->transpose, vectorised over points; axis 0 is the
    # most significant axis in the final interleave.
    x = [np.asarray(q, dtype=np.int64).reshape(-1, 3)[:, i].copy() for i in range(3)]
    top = 1 << (bits - 1)
    Q = top
    while Q > 1:
        P = Q - 1
        for i in range(3):
            hit = (x[i] & Q) != 0
            t = (x[0] ^ x[i]) & P
            x0_new = np.where(hit, x[0] ^ P, x[0] ^ t)
            if i != 0:
                x[i] = np.where(hit, x[i], x[i] ^ t)
            x[0] = x0_new
        Q >>= 1
    x[1] ^= x[0]
    x[2] ^= x[1]
    t = np.zeros_like(x[0])
    Q = top
    while Q > 1:
        t = np.where((x[2] & Q) != 0, t ^ (Q - 1), t)
        Q >>= 1
    for i in range(3):
        x[i] ^= t
    h = np.zeros(x[0].shape, dtype=np.uint64)
    for b in range(bits - 1, -1, -1):
        for i in range(3):
            h = (h << np.uint64(1)) | ((x[i] >> b) & 1).astype(np.uint64)
    return h


def np_sq_distances(pos: np.ndarray, center: np.ndarray) -> np.ndarray:
    d = pos.astype(np.float64) - np.asarray(center, dtype=np.float64)
    d = d * d
    return (d[:, 0] + d[:, 1]) + d[:, 2]


def np_voxel_reduce(keys_sorted, pos_sorted, feat_sorted, lab_sorted):
    """Reduce runs of equal keys: sum positions/features, majority label.

    Inputs are already sorted by key.  Returns (starts, pos_sum, feat_sum,
    counts, majority).  Majority ties go to the smallest label id.
    """
    n = keys_sorted.shape[0]
    if n == 0:
        F = feat_sorted.shape[1]
        return (np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, F)),
                np.zeros(0, np.int64), np.zeros(0, np.int64))
    brk = np.flatnonzero(keys_sorted[1:] != keys_sorted[:-1]) + 1
    starts = np.concatenate(([0], brk)).astype(np.int64)
    counts = np.diff(np.concatenate((starts, [n]))).astype(np.int64)
    pos_sum = np.add.reduceat(pos_sorted.astype(np.float64), starts, axis=0)
    if feat_sorted.shape[1]:
        feat_sum = np.add.reduceat(feat_sorted.astype(np.float64), starts, axis=0)
    else:
        feat_sum = np.zeros((starts.size, 0))
    if lab_sorted is None:
        return starts, pos_sum, feat_sum, counts, np.zeros(starts.size, np.int64)
    group = np.repeat(np.arange(starts.size), counts)
    lab = lab_sorted.astype(np.int64)
    pair = group * 65536 + lab
    uniq, cnt = np.unique(pair, return_counts=True)
    g = uniq // 65536
    l = uniq % 65536
    # within a group: highest count first, then smallest label
    order = np.lexsort((l, -cnt, g))
    g_sorted = g[order]
    first = np.concatenate(([True], g_sorted[1:] != g_sorted[:-1]))
    majority = l[order][first]
    return starts, pos_sum, feat_sum, counts, majority


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_spread(v):
        v = v & np.uint64(0x1FFFFF)
        v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
        v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
        v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
        v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
        v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
        return v

    @njit(cache=True)
    def _nb_morton(q):
        n = q.shape[0]
        out = np.empty(n, np.uint64)
        for i in range(n):
            out[i] = (_nb_spread(np.uint64(q[i, 0]))
                      | (_nb_spread(np.uint64(q[i, 1])) << np.uint64(1))
                      | (_nb_spread(np.uint64(q[i, 2])) << np.uint64(2)))
        return out

    @njit(cache=True)
    def _nb_hilbert(q, bits):
        n = q.shape[0]
        out = np.empty(n, np.uint64)
        x = np.empty(3, np.int64)
        top = np.int64(1) << (bits - 1)
        for k in range(n):
            for i in range(3):
                x[i] = q[k, i]
            Q = top
            while Q > 1:
                P = Q - 1
                for i in range(3):
                    if x[i] & Q:
                        x[0] ^= P
                    else:
                        t = (x[0] ^ x[i]) & P
                        x[0] ^= t
                        x[i] ^= t
                Q >>= 1
            x[1] ^= x[0]
            x[2] ^= x[1]
            t = np.int64(0)
            Q = top
            while Q > 1:
                if x[2] & Q:
                    t ^= Q - 1
                Q >>= 1
            for i in range(3):
                x[i] ^= t
            h = np.uint64(0)
            for b in range(bits - 1, -1, -1):
                for i in range(3):
                    h = (h << np.uint64(1)) | np.uint64((x[i] >> b) & 1)
            out[k] = h
        return out

    @njit(cache=True)
    def _nb_sq_dist(pos, center):
        n = pos.shape[0]
        out = np.empty(n, np.float64)
        cx, cy, cz = center[0], center[1], center[2]
        for i in range(n):
            dx = np.float64(pos[i, 0]) - cx
            dy = np.float64(pos[i, 1]) - cy
            dz = np.float64(pos[i, 2]) - cz
            out[i] = (dx * dx + dy * dy) + dz * dz
        return out

    @njit(cache=True)
    def _nb_voxel_reduce(keys, pos, feat, lab, has_lab):
        n = keys.shape[0]
        F = feat.shape[1]
        ng = 0
        for i in range(n):
            if i == 0 or keys[i] != keys[i - 1]:
                ng += 1
        starts = np.empty(ng, np.int64)
        counts = np.zeros(ng, np.int64)
        pos_sum = np.zeros((ng, 3))
        feat_sum = np.zeros((ng, F))
        majority = np.zeros(ng, np.int64)
        g = -1
        for i in range(n):
            if i == 0 or keys[i] != keys[i - 1]:
                g += 1
                starts[g] = i
            counts[g] += 1
            for a in range(3):
                pos_sum[g, a] += np.float64(pos[i, a])
            for c in range(F):
                feat_sum[g, c] += np.float64(feat[i, c])
        if has_lab:
            for g in range(ng):
                s = starts[g]
                e = s + counts[g]
                ls = np.sort(lab[s:e])
                best = ls[0]
                best_n = 0
                run = 0
                for j in range(ls.shape[0]):
                    if j > 0 and ls[j] == ls[j - 1]:
                        run += 1
                    else:
                        run = 1
                    if run > best_n:
                        best_n = run
                        best = ls[j]
                majority[g] = best
        return starts, pos_sum, feat_sum, counts, majority

    def nb_morton_encode(q):
        return _nb_morton(np.ascontiguousarray(np.asarray(q, dtype=np.int64).reshape(-1, 3)))

    def nb_hilbert_encode(q, bits=CURVE_BITS):
        q = np.ascontiguousarray(np.asarray(q, dtype=np.int64).reshape(-1, 3))
        return _nb_hilbert(q, bits)

    def nb_sq_distances(pos, center):
        return _nb_sq_dist(np.ascontiguousarray(pos), np.asarray(center, dtype=np.float64))

    def nb_voxel_reduce(keys_sorted, pos_sorted, feat_sorted, lab_sorted):
        has_lab = lab_sorted is not None
        lab = (np.ascontiguousarray(lab_sorted, dtype=np.int64) if has_lab
               else np.zeros(0, np.int64))
        return _nb_voxel_reduce(np.ascontiguousarray(keys_sorted),
                                np.ascontiguousarray(pos_sorted),
                                np.ascontiguousarray(feat_sorted), lab, has_lab)
else:  # pragma: no cover
    nb_morton_encode = np_morton_encode
    nb_hilbert_encode = np_hilbert_encode
    nb_sq_distances = np_sq_distances
    nb_voxel_reduce = np_voxel_reduce


USE_NUMBA = HAVE_NUMBA and _numba_requested()
BACKEND = "numba" if USE_NUMBA else "numpy"

if USE_NUMBA:
    morton_encode = nb_morton_encode
    hilbert_encode = nb_hilbert_encode
    sq_distances = nb_sq_distances
    voxel_reduce = nb_voxel_reduce
else:
    morton_encode = np_morton_encode
    hilbert_encode = np_hilbert_encode
    sq_distances = np_sq_distances
    voxel_reduce = np_voxel_reduce
