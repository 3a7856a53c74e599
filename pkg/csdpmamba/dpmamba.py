#!/usr/bin/env python

"""Dual-pathway discrete linear state-space encoder.

Both paths run h_t = A h_{t-1} + B x_t, y_t = C h_t from a zero state; the
reverse path does so on the time-reversed input and reverses the result back.
The outputs are mixed as alpha * y + beta * y_rev, averaged over time, then
projected and passed through silu to give one feature vector per series.
"""

import logging

import numpy as np
from scipy import special

from csdpmamba import numerics as nx
from csdpmamba.errors import ShapeError
from csdpmamba.temcl import Representation
from csdpmamba.utils import rng


log = logging.getLogger('csdpmamba')
log.addHandler(logging.NullHandler())


class SSMParams(nx.ParamSet):
    """Transition, input and readout maps, mixing coefficients and projection.

    The transition is diag(logistic(a_raw)) unless `dense_a` is set, in which
    case an unconstrained S x S matrix `a` is learned. With `split_paths` the
    reverse path has its own transition, B and C under the `reverse.` prefix.
    """

    def __init__(self, d_model, state=16, dense_a=False, split_paths=False):
        super(SSMParams, self).__init__('dpmamba')
        self.d_model = d_model
        self.state = state
        self.dense_a = dense_a
        self.split_paths = split_paths
        for path in self.paths():
            if dense_a:
                self.add(path + 'a', np.zeros((state, state)))
            else:
                self.add(path + 'a_raw', np.zeros(state))
            self.add(path + 'B', np.zeros((state, d_model)))
            self.add(path + 'C', np.zeros((d_model, state)))
        self.add('alpha_mix', np.array(0.5))
        self.add('beta_mix', np.array(0.5))
        self.add('W_out', np.zeros((d_model, d_model)))
        self.add('b_out', np.zeros(d_model))

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.d_target, cfg.ssm_state, cfg.ssm_dense_a, cfg.split_paths)

    def paths(self):
        return ('', 'reverse.') if self.split_paths else ('',)

    def initialize(self, seed):
        generator = rng(seed, 202)
        for path in self.paths():
            a_raw = generator.uniform(0.5, 2.0, size=self.state)
            if self.dense_a:
                self[path + 'a'].data[...] = np.diag(special.expit(a_raw))
            else:
                self[path + 'a_raw'].data[...] = a_raw
            bound = 1.0 / np.sqrt(self.d_model)
            self[path + 'B'].data[...] = generator.uniform(-bound, bound, size=(self.state, self.d_model))
            bound = 1.0 / np.sqrt(self.state)
            self[path + 'C'].data[...] = generator.uniform(-bound, bound, size=(self.d_model, self.state))
        bound = 1.0 / np.sqrt(self.d_model)
        self['W_out'].data[...] = generator.uniform(-bound, bound, size=(self.d_model, self.d_model))
        return self


def transition(p, path=''):
    """The transition operand of linear_scan: the diagonal of A, or A itself."""
    if p.dense_a:
        return p[path + 'a']
    return nx.logistic(p[path + 'a_raw'])


def _as_input(x):
    if isinstance(x, Representation):
        return nx.Tensor(x.sequence.T)
    return nx.as_tensor(x)


def ssm_forward(p, x, path=''):
    """Forward recurrence over axis -2 of x, shape (..., T', d_model)."""
    x = _as_input(x)
    if x.ndim < 2 or x.shape[-1] != p.d_model:
        raise ShapeError('ssm_forward', x.shape, (p.d_model,))
    u = nx.matmul(x, nx.transpose(p[path + 'B']))
    h = nx.linear_scan(transition(p, path), u)
    return nx.matmul(h, nx.transpose(p[path + 'C']))


def ssm_reverse(p, x):
    """ssm_forward on the time-reversed input, reversed back."""
    x = _as_input(x)
    path = 'reverse.' if p.split_paths else ''
    return nx.flip(ssm_forward(p, nx.flip(x, axis=-2), path), axis=-2)


def combine(y, y_rev, p):
    y, y_rev = nx.as_tensor(y), nx.as_tensor(y_rev)
    if y.shape != y_rev.shape:
        raise ShapeError('combine', y.shape, y_rev.shape)
    return nx.add(nx.mul(p['alpha_mix'], y), nx.mul(p['beta_mix'], y_rev))


def stack_representations(reps):
    """Right-pad (d, T'_i) representations into an (N, T'max, d) batch.

    Trailing zeros come after the valid steps on the forward path and before
    them on the reverse one, where a zero-initialized recurrence stays at zero.
    """
    lengths = np.array([r.length for r in reps], dtype=np.int64)
    out = np.zeros((len(reps), lengths.max(), reps[0].channels))
    for i, r in enumerate(reps):
        out[i, :r.length] = r.sequence.T
    return out, lengths


def project(p, pooled):
    """silu(pooled @ W_out^T + b_out) over (N, d) rows."""
    return nx.silu(nx.add(nx.matmul(pooled, nx.transpose(p['W_out'])), p['b_out']))


def encode_nodes(p, x, lengths=None):
    """Node features (N, d_model) from a padded batch (N, T', d_model)."""
    x = nx.as_tensor(x)
    y = combine(ssm_forward(p, x), ssm_reverse(p, x), p)
    if lengths is None:
        pooled = nx.mean(y, axis=-2)
    else:
        lengths = np.asarray(lengths, dtype=np.float64)
        mask = (np.arange(x.shape[-2])[None, :] < lengths[:, None]).astype(np.float64)
        pooled = nx.mul(nx.sum_(nx.mul(y, mask[:, :, None]), axis=-2), (1.0 / lengths)[:, None])
    return project(p, pooled)


def dpmamba_encode(p, rep):
    """Feature vector (d_model,) of one representation."""
    x = _as_input(rep)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError('dpmamba_encode', x.shape)
    y = combine(ssm_forward(p, x), ssm_reverse(p, x), p)
    pooled = nx.mean(y, axis=0, keepdims=True)
    return nx.reshape(project(p, pooled), (p.d_model,))
