#!/usr/bin/env python

"""Exact, window-constrained and multiresolution (FastDTW) warping distances.

Sequences are (length, features) arrays; 1-D input is read as one feature.
Indices are 0-based: a path starts at (0, 0) and ends at (n - 1, m - 1).
The cost recursion is

    C(i, j) = |x_i - y_j| + min(C(i-1, j-1), C(i-1, j), C(i, j-1)),  C(0, 0) = |x_0 - y_0|

with the Euclidean point distance. Accumulated costs are kept only for the
cells of the warp window, so a band of width w costs O((n + m) w) memory.
"""

import dataclasses
import logging

import numba
import numpy as np

from csdpmamba.errors import ConfigError, DataError, ShapeError


log = logging.getLogger('csdpmamba')
log.addHandler(logging.NullHandler())


CANONICAL = 'canonical'
TRUNCATED = 'truncated'


@dataclasses.dataclass(frozen=True, eq=False)
class WarpWindow(object):
    """Inclusive column interval [lo[i], hi[i]] for each row i."""

    lo: np.ndarray
    hi: np.ndarray
    m: int

    @property
    def n(self):
        return self.lo.shape[0]

    @property
    def cells(self):
        return int((self.hi - self.lo + 1).sum())

    def __contains__(self, cell):
        i, j = cell
        return 0 <= i < self.n and self.lo[i] <= j <= self.hi[i]

    def validate(self):
        lo, hi = self.lo, self.hi
        if self.n < 1 or np.any(lo > hi):
            raise DataError('warp window rows must be nonempty')
        if np.any(np.diff(lo) < 0) or np.any(np.diff(hi) < 0):
            raise DataError('warp window bounds must be nondecreasing')
        if lo[0] != 0 or hi[-1] != self.m - 1 or np.any(lo < 0) or np.any(hi > self.m - 1):
            raise DataError('warp window must contain (0, 0) and (n - 1, m - 1)')
        if np.any(lo[1:] > hi[:-1] + 1):
            raise DataError('warp window rows must connect')
        return self


def full_window(n, m):
    return WarpWindow(np.zeros(n, dtype=np.int64), np.full(n, m - 1, dtype=np.int64), m)


def sakoe_chiba_window(n, m, band):
    """|i - j| <= band, widened where needed so the corners stay reachable."""
    rows = np.arange(n)
    lo = np.clip(rows - band, 0, m - 1)
    hi = np.clip(rows + band, 0, m - 1)
    hi[-1] = m - 1
    hi = np.maximum.accumulate(hi)
    return WarpWindow(lo.astype(np.int64), hi.astype(np.int64), m)


def as_sequence(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ShapeError('sequence', x.shape)
    if x.shape[0] < 1 or x.shape[1] < 1:
        raise DataError('empty sequence')
    return np.ascontiguousarray(x)


def point_dist(a, b):
    """Euclidean distance between two feature vectors."""
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ShapeError('point_dist', a.shape, b.shape)
    return float(np.sqrt(((a - b) ** 2).sum()))


@numba.njit(nogil=True)
def _accumulate(x, y, lo, hi):
    n = x.shape[0]
    f = x.shape[1]
    offset = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        offset[i + 1] = offset[i] + hi[i] - lo[i] + 1
    acc = np.empty(offset[n], dtype=np.float64)
    for i in range(n):
        for j in range(lo[i], hi[i] + 1):
            d = 0.0
            for k in range(f):
                diff = x[i, k] - y[j, k]
                d += diff * diff
            d = np.sqrt(d)
            if i == 0 and j == 0:
                best = 0.0
            else:
                best = np.inf
                if i > 0 and lo[i - 1] <= j - 1 and j - 1 <= hi[i - 1]:
                    best = acc[offset[i - 1] + j - 1 - lo[i - 1]]
                if i > 0 and lo[i - 1] <= j and j <= hi[i - 1]:
                    v = acc[offset[i - 1] + j - lo[i - 1]]
                    if v < best:
                        best = v
                if j - 1 >= lo[i]:
                    v = acc[offset[i] + j - 1 - lo[i]]
                    if v < best:
                        best = v
            acc[offset[i] + j - lo[i]] = d + best
    return acc, offset


@numba.njit(nogil=True)
def _backtrack(acc, offset, lo, hi):
    # ties prefer the diagonal, then the vertical (i - 1), then the horizontal (j - 1) move
    n = lo.shape[0]
    i = n - 1
    j = hi[n - 1]
    path_i = np.empty(n + hi[n - 1] + 1, dtype=np.int64)
    path_j = np.empty(n + hi[n - 1] + 1, dtype=np.int64)
    k = 0
    path_i[k] = i
    path_j[k] = j
    while i > 0 or j > 0:
        best = np.inf
        step = -1
        if i > 0 and j > 0 and lo[i - 1] <= j - 1 and j - 1 <= hi[i - 1]:
            best = acc[offset[i - 1] + j - 1 - lo[i - 1]]
            step = 0
        if i > 0 and lo[i - 1] <= j and j <= hi[i - 1]:
            v = acc[offset[i - 1] + j - lo[i - 1]]
            if v < best:
                best = v
                step = 1
        if j > 0 and j - 1 >= lo[i]:
            v = acc[offset[i] + j - 1 - lo[i]]
            if v < best:
                best = v
                step = 2
        if step == 0:
            i -= 1
            j -= 1
        elif step == 1:
            i -= 1
        else:
            j -= 1
        k += 1
        path_i[k] = i
        path_j[k] = j
    return path_i[:k + 1][::-1].copy(), path_j[:k + 1][::-1].copy()


@numba.njit(nogil=True)
def _expand(path_i, path_j, n, m, radius):
    lo = np.full(n, m, dtype=np.int64)
    hi = np.full(n, -1, dtype=np.int64)
    for k in range(path_i.shape[0]):
        r0 = max(0, 2 * path_i[k] - radius)
        r1 = min(n - 1, 2 * path_i[k] + 1 + radius)
        c0 = max(0, 2 * path_j[k] - radius)
        c1 = min(m - 1, 2 * path_j[k] + 1 + radius)
        for r in range(r0, r1 + 1):
            if c0 < lo[r]:
                lo[r] = c0
            if c1 > hi[r]:
                hi[r] = c1
    # closure: lo as a suffix minimum, hi as a prefix maximum
    for r in range(n - 2, -1, -1):
        if lo[r + 1] < lo[r]:
            lo[r] = lo[r + 1]
    for r in range(1, n):
        if hi[r - 1] > hi[r]:
            hi[r] = hi[r - 1]
    return lo, hi


def _check_pair(x, y):
    x, y = as_sequence(x), as_sequence(y)
    if x.shape[1] != y.shape[1]:
        raise ShapeError('dtw', x.shape, y.shape)
    return x, y


def _path_list(path_i, path_j):
    return list(zip(path_i.tolist(), path_j.tolist()))


def dtw_windowed(x, y, window):
    """Optimal warping cost and path among paths confined to `window`."""
    x, y = _check_pair(x, y)
    if window.n != x.shape[0] or window.m != y.shape[0]:
        raise ShapeError('dtw', (window.n, window.m), (x.shape[0], y.shape[0]))
    window.validate()
    lo = np.ascontiguousarray(window.lo, dtype=np.int64)
    hi = np.ascontiguousarray(window.hi, dtype=np.int64)
    acc, offset = _accumulate(x, y, lo, hi)
    path_i, path_j = _backtrack(acc, offset, lo, hi)
    return float(acc[-1]), _path_list(path_i, path_j)


def dtw(x, y):
    """Exact DTW cost and one optimal warp path.

    >>> dtw([1., 2., 3.], [1., 2., 2., 3.])[0]
    0.0
    """
    x, y = _check_pair(x, y)
    return dtw_windowed(x, y, full_window(x.shape[0], y.shape[0]))


def reduce_by_half(x):
    """Average consecutive pairs of points; an odd last point is copied.

    >>> reduce_by_half([1., 3., 5., 7.])[:, 0].tolist()
    [2.0, 6.0]
    """
    x = as_sequence(x)
    n = x.shape[0]
    even = n - n % 2
    out = 0.5 * (x[0:even:2] + x[1:even:2])
    if n % 2:
        out = np.concatenate([out, x[-1:]], axis=0)
    return out


def expand_window(low_res_path, n, m, radius):
    """Project a half-resolution path to an n x m grid and dilate it by `radius`."""
    if radius < 0:
        raise ConfigError('radius must be >= 0')
    cells = np.asarray(low_res_path, dtype=np.int64).reshape(-1, 2)
    lo, hi = _expand(np.ascontiguousarray(cells[:, 0]), np.ascontiguousarray(cells[:, 1]), n, m, radius)
    return WarpWindow(lo, hi, m)


def fastdtw(x, y, radius=1, variant=CANONICAL):
    """Multiresolution DTW approximation.

    Sequences no longer than radius + 2 are aligned exactly. Otherwise both are
    halved, aligned recursively, and the coarse path, projected and widened by
    `radius`, bounds a constrained alignment at full resolution. The
    `truncated` variant returns the coarse result without that refinement.
    """
    if radius < 0:
        raise ConfigError('radius must be >= 0')
    if variant not in (CANONICAL, TRUNCATED):
        raise ConfigError('unknown fastdtw variant {!r}'.format(variant))
    x, y = _check_pair(x, y)
    min_size = radius + 2
    if x.shape[0] <= min_size or y.shape[0] <= min_size:
        return dtw(x, y)
    cost, path = fastdtw(reduce_by_half(x), reduce_by_half(y), radius, variant)
    if variant == TRUNCATED:
        return cost, path
    window = expand_window(path, x.shape[0], y.shape[0], radius)
    return dtw_windowed(x, y, window)
