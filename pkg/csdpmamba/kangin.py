#!/usr/bin/env python

"""KAN-enhanced GIN layers and the classification head.

A KAN layer replaces each weight of a linear map by a learned univariate
function phi_ij(x) = w_ij * silu(x) + sum_k c_ijk * B_k(clamp(x, -g, g)),
with cubic B-splines on a uniform grid of G intervals over [-g, g]. The
knot vector extends three intervals past each end of the grid, so every
function has G + 3 basis splines, the full cubic basis on [-g, g], rather
than one per interval. A GIN layer feeds (1 + eps) * h(v) + sum_u A[v, u] * h(u)
through one such layer.
"""

import logging

import numpy as np

from csdpmamba import numerics as nx
from csdpmamba.errors import ShapeError
from csdpmamba.utils import rng


log = logging.getLogger('csdpmamba')
log.addHandler(logging.NullHandler())


SPLINE_ORDER = 3


class KanFunctionBank(nx.ParamSet):
    """d_in x d_out univariate functions: residual weights `w` and spline coefficients `c`."""

    def __init__(self, d_in, d_out, grid=8, grid_range=3.0, prefix='kangin.kan'):
        super(KanFunctionBank, self).__init__(prefix)
        self.d_in = d_in
        self.d_out = d_out
        self.grid = grid
        self.grid_range = grid_range
        self.add('w', np.ones((d_out, d_in)))
        self.add('c', np.zeros((d_out, d_in, self.bases)))

    @property
    def bases(self):
        return self.grid + SPLINE_ORDER

    def initialize(self, seed, *salt):
        scale = 0.1 / np.sqrt(self.grid)
        self['c'].data[...] = rng(seed, 303, *salt).normal(0.0, scale, size=self['c'].shape)
        return self


def kan_apply(bank, v):
    """Apply the bank to the last axis of `v`: (..., d_in) -> (..., d_out)."""
    v = nx.as_tensor(v)
    if v.shape[-1] != bank.d_in:
        raise ShapeError('kan_apply', v.shape, (bank.d_in,))
    squeeze = v.ndim == 1
    if squeeze:
        v = nx.reshape(v, (1, bank.d_in))
    lead = v.shape[:-1]
    residual = nx.matmul(nx.silu(v), nx.transpose(bank['w']))
    g = bank.grid_range
    basis = nx.bspline_basis(nx.clamp(v, -g, g), -g, g, bank.grid, SPLINE_ORDER)
    flat = nx.reshape(basis, lead + (bank.d_in * bank.bases,))
    coeffs = nx.reshape(bank['c'], (bank.d_out, bank.d_in * bank.bases))
    out = nx.add(residual, nx.matmul(flat, nx.transpose(coeffs)))
    if squeeze:
        out = nx.reshape(out, (bank.d_out,))
    return out


class GinLayerParams(nx.ParamSet):
    """Learnable eps plus a d -> d function bank."""

    def __init__(self, d, grid=8, grid_range=3.0, prefix='kangin.layer1'):
        super(GinLayerParams, self).__init__(prefix)
        self.d = d
        self.add('eps', np.array(0.0))
        self.bank = KanFunctionBank(d, d, grid, grid_range, prefix + '.kan')
        self.update(self.bank)


def aggregation_matrix(g, n, unweighted=False):
    """Dense (n, n) neighbor weights of `g`; None or an empty graph means no edges."""
    if g is None:
        return np.zeros((n, n))
    if hasattr(g, 'normalized'):
        if g.n != n:
            raise ShapeError('gin_layer', (g.n, g.n), (n,))
        if unweighted:
            return (g.adjacency.toarray() > 0).astype(np.float64)
        return g.dense()
    a = np.asarray(g, dtype=np.float64)
    if a.shape != (n, n):
        raise ShapeError('gin_layer', a.shape, (n,))
    return (a > 0).astype(np.float64) if unweighted else a


def gin_layer(p, h, g, unweighted=False):
    """KAN((1 + eps) h(v) + sum_u A[v, u] h(u)) for every node v.

    `g` is a SimilarityGraph, a dense (N, N) weight array or None. With
    `unweighted`, every nonzero neighbor contributes with weight 1.
    """
    h = nx.as_tensor(h)
    if h.ndim != 2 or h.shape[1] != p.d:
        raise ShapeError('gin_layer', h.shape, (p.d,))
    a = aggregation_matrix(g, h.shape[0], unweighted)
    z = nx.add(nx.add(h, nx.mul(p['eps'], h)), nx.matmul(a, h))
    return kan_apply(p.bank, z)


class ClassifierHead(nx.ParamSet):

    def __init__(self, d, classes, prefix='kangin.head'):
        super(ClassifierHead, self).__init__(prefix)
        self.d = d
        self.classes = classes
        self.add('W', np.zeros((classes, d)))
        self.add('b', np.zeros(classes))

    def initialize(self, seed):
        bound = 1.0 / np.sqrt(self.d)
        self['W'].data[...] = rng(seed, 404).uniform(-bound, bound, size=(self.classes, self.d))
        return self


def classify(head, h):
    """Row-wise log-probabilities of the linear map, shape (N, classes).

    >>> head = ClassifierHead(2, 4)
    >>> np.round(np.exp(classify(head, np.ones((1, 2))).data), 2).tolist()
    [[0.25, 0.25, 0.25, 0.25]]
    """
    h = nx.as_tensor(h)
    if h.ndim != 2 or h.shape[1] != head.d:
        raise ShapeError('classify', h.shape, (head.d,))
    logits = nx.add(nx.matmul(h, nx.transpose(head['W'])), head['b'])
    return nx.log_softmax(logits, axis=-1)
