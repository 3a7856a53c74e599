#!/usr/bin/env python

"""Similarity graph over series.

Representations are clustered into as many groups as there are classes,
FastDTW distances are computed only inside a cluster (cross-cluster entries
hold the sentinel -1), and the distances are scaled to weights, sparsified to
the top K per row and row-normalized.
"""

import concurrent.futures
import dataclasses
import logging

import numpy as np
import pandas as pd
import scipy.sparse as sp
from sklearn.cluster import KMeans
from sklearn.preprocessing import normalize

from csdpmamba import dtw
from csdpmamba import storage
from csdpmamba.data import TimeSeries
from csdpmamba.errors import ConfigError, DataError, FormatError
from csdpmamba.temcl import Representation


log = logging.getLogger('csdpmamba')
log.addHandler(logging.NullHandler())


SENTINEL = -1.0
MASKED = 'masked'
RAW = 'raw'


@dataclasses.dataclass(frozen=True, eq=False)
class ClusterAssignment(object):
    labels: np.ndarray
    k: int

    def same(self, i, j):
        return self.labels[i] == self.labels[j]


@dataclasses.dataclass(frozen=True, eq=False)
class SimilarityGraph(object):
    """Row-normalized sparse adjacency plus the adjacency it was derived from."""

    adjacency: sp.csr_matrix
    normalized: sp.csr_matrix
    alpha: float = None
    topk: int = None

    @property
    def n(self):
        return self.normalized.shape[0]

    def neighbors(self, i):
        row = self.normalized.getrow(i)
        return sorted(row.indices.tolist())

    def dense(self):
        return self.normalized.toarray()


def _points(x):
    if isinstance(x, Representation):
        return x.sequence.T
    if isinstance(x, TimeSeries):
        return x.values.T
    return np.asarray(x, dtype=np.float64)


def _pooled(x):
    if isinstance(x, Representation):
        return x.pooled()
    if isinstance(x, TimeSeries):
        return x.values.mean(axis=1)
    return np.asarray(x, dtype=np.float64).reshape(-1)


def cluster_representations(reps, k, seed, restarts=10, iterations=100):
    """k-means over time-averaged representations.

    sklearn's Lloyd iterations relocate an emptied centroid to the point
    farthest from its center, so exhausted restarts never fail.
    """
    if k < 2:
        raise ConfigError('k must be >= 2, got {}'.format(k))
    if len(reps) < k:
        raise DataError('need at least k={} series, got {}'.format(k, len(reps)))
    vectors = np.stack([_pooled(r) for r in reps])
    model = KMeans(n_clusters=k, n_init=restarts, max_iter=iterations, random_state=seed, algorithm='lloyd')
    labels = model.fit_predict(vectors)
    log.info('Clustered %d representations into %d groups (inertia %.6g)', len(reps), k, model.inertia_)
    return ClusterAssignment(labels.astype(np.int64), k)


def single_cluster(n):
    return ClusterAssignment(np.zeros(n, dtype=np.int64), 1)


def contrast_fastdtw_matrix(reps, clusters, radius=1, variant=dtw.CANONICAL, workers=1):
    """N x N FastDTW distances within clusters, -1 across clusters, 0 on the diagonal.

    Each unordered pair is computed once and mirrored. `clusters=None` treats
    all series as one cluster.
    """
    n = len(reps)
    if clusters is None:
        clusters = single_cluster(n)
    points = [_points(r) for r in reps]
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if clusters.same(i, j)]

    def cost(pair):
        return dtw.fastdtw(points[pair[0]], points[pair[1]], radius, variant)[0]

    if workers > 1 and len(pairs) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            costs = list(pool.map(cost, pairs))
    else:
        costs = [cost(p) for p in pairs]
    matrix = np.full((n, n), SENTINEL)
    np.fill_diagonal(matrix, 0.0)
    for (i, j), c in zip(pairs, costs):
        matrix[i, j] = matrix[j, i] = c
    log.info('Computed %d FastDTW distances for %d series (radius %d)', len(pairs), n, radius)
    return matrix


def check_distance_matrix(matrix):
    """Raise ValueError unless `matrix` is a valid sentinel-carrying distance matrix."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DataError('distance matrix must be square, got {}'.format(matrix.shape))
    if not np.array_equal(matrix, matrix.T):
        raise DataError('distance matrix must be symmetric')
    if np.any(np.diag(matrix) != 0):
        raise DataError('distance matrix diagonal must be 0')
    if np.any((matrix < 0) & (matrix != SENTINEL)) or not np.all(np.isfinite(matrix)):
        raise DataError('distance matrix entries must be >= 0 or exactly -1')
    return matrix


def scale_adjacency(matrix, alpha, order=MASKED, inverse_weights=False):
    """Dense weights exp(-alpha * D / median) with a zero diagonal.

    The median is taken over positive off-diagonal distances; sentinels get
    weight 0 in `masked` order and exp(alpha) in `raw` order. With
    `inverse_weights`, positive weights are then mapped through 1 / (1 + w).

    >>> scale_adjacency(np.array([[0., 2.], [2., 0.]]), 0.0).tolist()
    [[0.0, 1.0], [1.0, 0.0]]
    """
    if alpha < 0:
        raise ConfigError('alpha must be >= 0')
    if order not in (MASKED, RAW):
        raise ConfigError('unknown graph order {!r}'.format(order))
    matrix = np.asarray(matrix, dtype=np.float64)
    sentinel = matrix == SENTINEL
    off_diagonal = ~np.eye(matrix.shape[0], dtype=bool)
    positive = matrix[(matrix > 0) & off_diagonal & np.isfinite(matrix)]
    scale = float(np.median(positive)) if positive.size else 0.0
    scaled = matrix / scale if scale > 0 else matrix.copy()
    scaled[sentinel] = SENTINEL
    weights = np.exp(-alpha * scaled)
    if order == MASKED:
        weights[sentinel] = 0.0
    if inverse_weights:
        weights = np.where(weights > 0, 1.0 / (1.0 + np.abs(weights)), weights)
    weights[~off_diagonal] = 0.0
    return weights


def topk_sparsify(weights, topk):
    """Keep the `topk` largest off-diagonal weights per row; ties go to the lower column."""
    if topk < 1:
        raise ConfigError('topk must be >= 1')
    weights = np.asarray(weights, dtype=np.float64)
    n = weights.shape[0]
    rows, cols, vals = [], [], []
    columns = np.arange(n)
    for i in range(n):
        candidates = columns[(columns != i) & (weights[i] > 0)]
        if not candidates.size:
            continue
        order = np.lexsort((candidates, -weights[i, candidates]))
        keep = candidates[order[:topk]]
        rows.extend([i] * keep.size)
        cols.extend(keep.tolist())
        vals.extend(weights[i, keep].tolist())
    out = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    out.sort_indices()
    return out


def row_normalize(adjacency, alpha=None, topk=None):
    adjacency = sp.csr_matrix(adjacency, dtype=np.float64)
    if adjacency.nnz and adjacency.data.min() < 0:
        raise DataError('adjacency weights must be nonnegative')
    return SimilarityGraph(adjacency, sp.csr_matrix(normalize(adjacency, norm='l1', axis=1)), alpha, topk)


def build_graph(matrix, alpha=1.0, topk=5, order=MASKED, inverse_weights=False):
    """scale_adjacency -> topk_sparsify -> row_normalize."""
    weights = scale_adjacency(matrix, alpha, order, inverse_weights)
    return row_normalize(topk_sparsify(weights, topk), alpha, topk)


def batch_subgraph(g, indices):
    """Graph over `indices` (in that order) from the pre-normalization adjacency."""
    indices = np.asarray(indices, dtype=np.intp)
    if np.unique(indices).size != indices.size:
        raise DataError('batch indices must be distinct')
    if indices.size and (indices.min() < 0 or indices.max() >= g.n):
        raise DataError('batch index out of range for a graph of {} nodes'.format(g.n))
    return row_normalize(g.adjacency[indices][:, indices], g.alpha, g.topk)


def save_matrix(obj, path, **meta):
    """Persist a distance matrix or a SimilarityGraph.

    A graph is stored as its dense pre-normalization adjacency with
    kind "graph"; a distance matrix with kind "distance".
    """
    if isinstance(obj, SimilarityGraph):
        meta.update({'kind': 'graph', 'alpha': obj.alpha, 'topk': obj.topk})
        storage.save_matrix_file(path, obj.adjacency.toarray(), meta)
    else:
        meta.setdefault('kind', 'distance')
        storage.save_matrix_file(path, obj, meta)
    log.info('Saved %s matrix to %s', meta['kind'], path)


def load_matrix(path):
    """Inverse of save_matrix: returns (matrix or SimilarityGraph, sidecar)."""
    matrix, meta = storage.load_matrix_file(path)
    kind = meta.get('kind', 'distance')
    if kind == 'graph':
        return row_normalize(matrix, meta.get('alpha'), meta.get('topk')), meta
    if kind != 'distance':
        raise FormatError('{}: unknown matrix kind {!r}'.format(path, kind))
    return matrix, meta


def export_heatmap(matrix, path):
    """N x N CSV of distances with cross-cluster cells written as `NA`."""
    matrix = np.asarray(matrix, dtype=np.float64)
    frame = pd.DataFrame(np.where(matrix == SENTINEL, np.nan, matrix))
    frame.to_csv(path, header=False, index=False, na_rep='NA', float_format='%.17g', lineterminator='\n')


def read_heatmap(path):
    frame = pd.read_csv(path, header=None, na_values=['NA'], keep_default_na=False, dtype=np.float64)
    return frame.fillna(SENTINEL).to_numpy()
