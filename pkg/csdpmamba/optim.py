#!/usr/bin/env python

import logging

import numpy as np

from csdpmamba.errors import ConfigError, ShapeError


log = logging.getLogger('csdpmamba')
log.addHandler(logging.NullHandler())


BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class OptimState(object):
    """Adam moments plus reduce-on-plateau bookkeeping."""

    def __init__(self, params, lr=1e-3, lr_floor=1e-6):
        """Constructor.

        Args:
            params: mapping of name -> Tensor; moments are shaped like these.
            lr: float, initial learning rate.
            lr_floor: float, plateau reductions never go below this.
        """
        if lr < 0:
            raise ConfigError('learning rate must be non-negative')
        self.m = dict((name, np.zeros(t.shape)) for name, t in params.items())
        self.v = dict((name, np.zeros(t.shape)) for name, t in params.items())
        self.step = 0
        self.lr = lr
        self.lr_floor = lr_floor
        self.best = None
        self.bad_epochs = 0


def adam_step(params, grads, state, lr=None):
    """Apply one bias-corrected Adam update in place and return `params`."""
    lr = state.lr if lr is None else lr
    state.step += 1
    c1 = 1.0 - BETA1 ** state.step
    c2 = 1.0 - BETA2 ** state.step
    for name, t in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != t.shape:
            raise ShapeError('adam_step ' + name, g.shape, t.shape)
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + EPS)
    return params


def plateau_update(state, metric, factor=0.5, patience=50, threshold=1e-6):
    """Reduce the learning rate after `patience` calls without improvement.

    Improvement means the metric dropped below the best seen by at least
    `threshold`. Returns the (possibly reduced) learning rate.
    """
    if not 0.0 < factor < 1.0:
        raise ConfigError('plateau factor must lie in (0, 1)')
    if patience < 1:
        raise ConfigError('plateau patience must be >= 1')
    if state.best is None or metric < state.best - threshold:
        state.best = metric
        state.bad_epochs = 0
        return state.lr
    state.bad_epochs += 1
    if state.bad_epochs >= patience:
        new_lr = max(state.lr * factor, min(state.lr_floor, state.lr))
        if new_lr < state.lr:
            log.info('Reducing learning rate from %g to %g', state.lr, new_lr)
        state.lr = new_lr
        state.bad_epochs = 0
    return state.lr
