#!/usr/bin/env python

"""Dense 64-bit arrays with tape-based reverse-mode differentiation.

Every primitive computes its value with numpy and, when a Tape is active and
at least one operand requires a gradient, records an adjoint closure on it.
`backward` replays the closures in reverse order, once each, and accumulates
gradients into the `grad` slot of the leaf tensors.

    >>> p = Tensor([1.0, -2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (p * p).sum()
    >>> backward(tape, loss)[p].tolist()
    [2.0, -4.0]
"""

import collections
import logging
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from csdpmamba.errors import CsdpError, ConfigError, NumericError, ShapeError


log = logging.getLogger('csdpmamba')
log.addHandler(logging.NullHandler())


_state = threading.local()


def _tape_stack():
    stack = getattr(_state, 'tapes', None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


_Record = collections.namedtuple('_Record', ['primitive', 'output', 'inputs', 'adjoint'])


class Tape(object):
    """Ordered record of executed primitives for one backward pass."""

    def __init__(self, check_finite=False):
        """Constructor.

        Args:
            check_finite: boolean, raise NumericError as soon as a recorded
                primitive produces NaN or Inf.
        """
        self.records = []
        self.check_finite = check_finite
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, primitive, output, inputs, adjoint):
        if self.consumed:
            raise CsdpError('tape already consumed by backward()')
        self.records.append(_Record(primitive, output, inputs, adjoint))


class Tensor(object):
    """A real array, optionally a differentiation leaf."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, copy=True):
        if copy:
            self.data = np.array(data, dtype=np.float64)
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self):
        if self.data.size != 1:
            raise ShapeError('item', self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        label = ' {}'.format(self.name) if self.name else ''
        return 'Tensor{}{}'.format(label, list(self.shape))

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError('division by a tensor is not a primitive')
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, copy=False)


def _emit(primitive, value, inputs, adjoint):
    """Wrap a primitive result and record its adjoint on the active tape."""
    out = Tensor(value, copy=False)
    tape = active_tape()
    if tape is None:
        return out
    if not any(t.requires_grad for t in inputs):
        return out
    if tape.check_finite and not np.all(np.isfinite(out.data)):
        raise NumericError('{} produced non-finite values'.format(primitive))
    out.requires_grad = True
    tape.record(primitive, out, inputs, adjoint)
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back to `shape`."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(primitive, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(primitive, a.shape, b.shape)


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('add', a, b)
    return _emit('add', a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('sub', a, b)
    return _emit('sub', a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('mul', a, b)
    return _emit('mul', a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _emit('relu', np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def logistic(a):
    a = as_tensor(a)
    s = special.expit(a.data)
    return _emit('logistic', s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a):
    a = as_tensor(a)
    s = special.expit(a.data)
    return _emit('silu', a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _emit('tanh', t, (a,), lambda g: (g * (1.0 - t * t),))


def sqrt(a):
    a = as_tensor(a)
    r = np.sqrt(np.maximum(a.data, 0.0))
    # the derivative at 0 is taken as 0 so distances between equal points stay differentiable
    inv = np.divide(0.5, r, out=np.zeros_like(r), where=r > 0)
    return _emit('sqrt', r, (a,), lambda g: (g * inv,))


def clamp(a, lo, hi):
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _emit('clamp', np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# -- linear algebra and reductions ---------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError('matmul', a.shape, b.shape)
    return _emit('matmul', np.matmul(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape),
                            _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)))


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    value = a.data.sum(axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _emit('sum', value, (a,), adjoint)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    value = a.data.mean(axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)
    return _emit('mean', value, (a,), adjoint)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        value = a.data.reshape(shape)
    except ValueError:
        raise ShapeError('reshape', a.shape, shape)
    return _emit('reshape', value, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    inverse = None if axes is None else np.argsort(axes)
    return _emit('transpose', np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def flip(a, axis):
    a = as_tensor(a)
    return _emit('flip', np.flip(a.data, axis=axis), (a,), lambda g: (np.flip(g, axis=axis),))


def take(a, indices, axis=0):
    """Select entries along `axis`; repeated indices accumulate gradient."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)

    def adjoint(g):
        ga = np.zeros_like(a.data)
        np.add.at(np.moveaxis(ga, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (ga,)
    return _emit('take', np.take(a.data, indices, axis=axis), (a,), adjoint)


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError('concatenate', *[t.shape for t in tensors])
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit('concatenate', value, tuple(tensors),
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


# -- sequence primitives -------------------------------------------------------

def conv1d(x, w, b=None):
    """Valid cross-correlation, stride 1.

    x: (N, C_in, T), w: (C_out, C_in, k), b: (C_out,) -> (N, C_out, T - k + 1).
    1-D `x` and `w` are treated as one sample with one channel.

    >>> conv1d([1., 2., 3., 4.], [1., 1.]).data.tolist()
    [3.0, 5.0, 7.0]
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim == 1 and w.ndim == 1:
        out = conv1d(reshape(x, (1, 1, -1)), reshape(w, (1, 1, -1)), b)
        return reshape(out, (-1,))
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1] or w.shape[2] > x.shape[2]:
        raise ShapeError('conv1d', x.shape, w.shape)
    n, c_in, length = x.shape
    c_out, _, k = w.shape
    t_out = length - k + 1
    cols = sliding_window_view(x.data, k, axis=2).transpose(0, 2, 1, 3).reshape(n, t_out, c_in * k)
    w2 = w.data.reshape(c_out, c_in * k)
    value = np.matmul(cols, w2.T)
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (c_out,):
            raise ShapeError('conv1d', x.shape, w.shape, b.shape)
        value = value + b.data
        inputs = (x, w, b)

    def adjoint(g):
        gt = g.transpose(0, 2, 1)
        gw = np.matmul(gt.reshape(-1, c_out).T, cols.reshape(-1, c_in * k)).reshape(w.shape)
        gcols = np.matmul(gt, w2).reshape(n, t_out, c_in, k)
        gx = np.zeros_like(x.data)
        for j in range(k):
            gx[:, :, j:j + t_out] += gcols[:, :, :, j].transpose(0, 2, 1)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))
    return _emit('conv1d', value.transpose(0, 2, 1), inputs, adjoint)


def maxpool1d(x, window=2, stride=2):
    """Max over sliding windows of the last axis; ties go to the lowest index.

    >>> maxpool1d([1., 3., 2., 5.]).data.tolist()
    [3.0, 5.0]
    """
    x = as_tensor(x)
    length = x.shape[-1]
    if window < 1 or stride < 1 or length < window:
        raise ShapeError('maxpool1d', x.shape, (window, stride))
    t_out = (length - window) // stride + 1
    windows = sliding_window_view(x.data, window, axis=-1)[..., ::stride, :][..., :t_out, :]
    idx = np.argmax(windows, axis=-1)
    value = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def adjoint(g):
        gx = np.zeros_like(x.data)
        stop = stride * (t_out - 1) + 1
        for j in range(window):
            gx[..., j:j + stop:stride] += g * (idx == j)
        return (gx,)
    return _emit('maxpool1d', value, (x,), adjoint)


def linear_scan(a, u):
    """h_t = A h_{t-1} + u_t with h_0 = 0, scanned over axis -2 of u.

    `a` is either the diagonal of A, shape (S,), or a dense (S, S) matrix.
    u: (..., T, S) -> h: (..., T, S).
    """
    a, u = as_tensor(a), as_tensor(u)
    dense = a.ndim == 2
    s = u.shape[-1]
    if u.ndim < 2 or a.shape != ((s, s) if dense else (s,)):
        raise ShapeError('linear_scan', a.shape, u.shape)
    steps = u.shape[-2]
    h = np.empty_like(u.data)
    prev = np.zeros(u.shape[:-2] + (s,))
    for t in range(steps):
        if dense:
            prev = np.matmul(prev, a.data.T) + u.data[..., t, :]
        else:
            prev = a.data * prev + u.data[..., t, :]
        h[..., t, :] = prev

    def adjoint(g):
        gu = np.empty_like(g)
        ga = np.zeros_like(a.data)
        carry = np.zeros(g.shape[:-2] + (s,))
        for t in reversed(range(steps)):
            r = g[..., t, :] + carry
            gu[..., t, :] = r
            if t > 0:
                hprev = h[..., t - 1, :]
                if dense:
                    ga += np.einsum('ni,nj->ij', r.reshape(-1, s), hprev.reshape(-1, s))
                else:
                    ga += (r * hprev).reshape(-1, s).sum(axis=0)
            carry = np.matmul(r, a.data) if dense else a.data * r
        return ga, gu
    return _emit('linear_scan', h, (a, u), adjoint)


def bspline_basis(x, lo, hi, intervals, order=3):
    """Uniform-grid B-spline basis values, appended as a trailing axis.

    The knot vector extends `order` intervals beyond [lo, hi] on each side, so
    every point of [lo, hi] is covered by exactly `order + 1` nonzero bases and
    the basis count is `intervals + order`.
    """
    x = as_tensor(x)
    step = (hi - lo) / float(intervals)
    knots = lo + step * np.arange(-order, intervals + order + 1)
    v = x.data[..., None]
    bases = ((v >= knots[:-1]) & (v < knots[1:])).astype(np.float64)
    lower = bases
    for k in range(1, order + 1):
        lower = bases
        bases = ((v - knots[:-k - 1]) / (knots[k:-1] - knots[:-k - 1]) * lower[..., :-1]
                 + (knots[k + 1:] - v) / (knots[k + 1:] - knots[1:-k]) * lower[..., 1:])
    # derivative of a uniform order-p basis is a difference of order-(p-1) bases
    deriv = (lower[..., :-1] - lower[..., 1:]) / step

    return _emit('bspline_basis', bases, (x,), lambda g: ((g * deriv).sum(axis=-1),))


# -- classification ------------------------------------------------------------

def log_softmax(a, axis=-1):
    a = as_tensor(a)
    value = a.data - special.logsumexp(a.data, axis=axis, keepdims=True)
    probs = np.exp(value)
    return _emit('log_softmax', value, (a,),
                 lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def nll_gather(logp, rows, targets):
    """Mean negative log-likelihood of `targets` at `rows` of an (N, K) matrix."""
    logp = as_tensor(logp)
    rows = np.asarray(rows, dtype=np.intp)
    targets = np.asarray(targets, dtype=np.intp)
    if logp.ndim != 2 or rows.shape != targets.shape or rows.size == 0:
        raise ShapeError('nll_gather', logp.shape, rows.shape, targets.shape)
    count = float(rows.size)
    value = -logp.data[rows, targets].sum() / count

    def adjoint(g):
        gl = np.zeros_like(logp.data)
        np.add.at(gl, (rows, targets), -g / count)
        return (gl,)
    return _emit('nll_gather', np.asarray(value), (logp,), adjoint)


# -- differentiation -----------------------------------------------------------

def backward(tape, loss):
    """Propagate d(loss)/d(leaf) through `tape`.

    Gradients are accumulated into `leaf.grad` and also returned as a dict
    keyed by leaf tensor. The tape is consumed.
    """
    if loss.size != 1:
        raise ShapeError('backward', loss.shape)
    if tape.consumed:
        raise CsdpError('tape already consumed by backward()')
    produced = set(id(r.output) for r in tape.records)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.adjoint(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key not in produced:
                leaves[key] = t
            grads[key] = grads[key] + gi if key in grads else gi
    tape.records = []
    tape.consumed = True
    result = {}
    for key, t in leaves.items():
        g = grads[key].reshape(t.shape)
        t.grad = g if t.grad is None else t.grad + g
        result[t] = g
    return result


def grad_check(f, params, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    Args:
        f: callable taking `params` and returning a scalar Tensor; must be
            deterministic.
        params: dict of name -> Tensor, or a ParamSet, or a list of Tensors.
        step: finite-difference step in [1e-7, 1e-3].

    Returns:
        max over entries of |analytic - numeric| / max(1, |numeric|).
    """
    if not 1e-7 <= step <= 1e-3:
        raise ConfigError('grad_check step must lie in [1e-7, 1e-3], got {}'.format(step))
    tensors = list(params.values()) if hasattr(params, 'values') else list(params)
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f(params)
    analytic = backward(tape, loss)

    def evaluate():
        value = as_tensor(f(params)).item()
        if not np.isfinite(value):
            raise NumericError('grad_check: function returned {}'.format(value))
        return value

    worst = 0.0
    for t in tensors:
        expected = analytic.get(t, np.zeros(t.shape))
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            fp = evaluate()
            flat[i] = saved - step
            fm = evaluate()
            flat[i] = saved
            numeric = (fp - fm) / (2.0 * step)
            err = abs(expected.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


class ParamSet(object):
    """Named parameter tensors with paired gradient storage."""

    def __init__(self, prefix=''):
        self.prefix = prefix
        self._params = collections.OrderedDict()

    def add(self, name, data):
        full = '{}.{}'.format(self.prefix, name) if self.prefix else name
        t = Tensor(data, requires_grad=True, name=full)
        self._params[full] = t
        return t

    def __getitem__(self, name):
        if name in self._params:
            return self._params[name]
        return self._params['{}.{}'.format(self.prefix, name)]

    def __contains__(self, name):
        return name in self._params or '{}.{}'.format(self.prefix, name) in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def keys(self):
        return self._params.keys()

    def values(self):
        return self._params.values()

    def items(self):
        return self._params.items()

    def update(self, other):
        for name, t in other.items():
            self._params[name] = t

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self):
        return collections.OrderedDict(
            (name, t.grad if t.grad is not None else np.zeros(t.shape)) for name, t in self._params.items())

    def arrays(self):
        return collections.OrderedDict((name, t.data.copy()) for name, t in self._params.items())

    def load_arrays(self, arrays):
        for name, t in self._params.items():
            if name not in arrays:
                raise KeyError(name)
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != t.shape:
                raise ShapeError('load {}'.format(name), t.shape, value.shape)
            t.data[...] = value

    def set_trainable(self, flag):
        for t in self._params.values():
            t.requires_grad = flag
