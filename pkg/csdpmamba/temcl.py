#!/usr/bin/env python

"""Temporal contrastive pretraining.

A three-block encoder (valid conv1d -> relu -> maxpool) maps each series to a
representation sequence of `d_target` channels. It is trained with a pairwise
margin loss over one positive pair (overlapping crops) and two negative pairs
(Gaussian-noise copy, non-overlapping crops) per anchor.
"""

import concurrent.futures
import dataclasses
import logging
import os

import numpy as np

from csdpmamba import numerics as nx
from csdpmamba import storage
from csdpmamba.data import TimeSeries
from csdpmamba.errors import ConfigError, DataError, NumericError, ShapeError
from csdpmamba.optim import OptimState, adam_step
from csdpmamba.utils import rng


log = logging.getLogger('csdpmamba')
log.addHandler(logging.NullHandler())


SIMILAR = 1
DISSIMILAR = 0
CHECKPOINT_NAME = 'temcl.ckpt'


@dataclasses.dataclass(frozen=True, eq=False)
class ContrastPair(object):
    left: TimeSeries
    right: TimeSeries
    y: int


@dataclasses.dataclass(frozen=True, eq=False)
class Representation(object):
    """Encoded series, shaped (d_target, reduced length)."""

    sequence: np.ndarray

    @property
    def channels(self):
        return self.sequence.shape[0]

    @property
    def length(self):
        return self.sequence.shape[1]

    def pooled(self):
        return self.sequence.mean(axis=1)


class EncoderParams(nx.ParamSet):
    """Weights of the three conv blocks plus the block geometry."""

    def __init__(self, in_channels, d_target=64, widths=(32, 64), kernels=(8, 5, 3), pool_window=2, pool_stride=2):
        super(EncoderParams, self).__init__('temcl')
        self.in_channels = in_channels
        self.d_target = d_target
        self.widths = tuple(widths) + (d_target,)
        self.kernels = tuple(kernels)
        self.pool_window = pool_window
        self.pool_stride = pool_stride
        c_in = in_channels
        for b, (c_out, k) in enumerate(zip(self.widths, self.kernels), start=1):
            self.add('conv{}.weight'.format(b), np.zeros((c_out, c_in, k)))
            self.add('conv{}.bias'.format(b), np.zeros(c_out))
            c_in = c_out

    @classmethod
    def from_config(cls, in_channels, cfg):
        return cls(in_channels, cfg.d_target, cfg.encoder_channels, cfg.encoder_kernels,
                   cfg.pool_window, cfg.pool_stride)

    def initialize(self, seed):
        generator = rng(seed, 101)
        for b, k in enumerate(self.kernels, start=1):
            w = self['conv{}.weight'.format(b)]
            bound = 1.0 / np.sqrt(w.shape[1] * k)
            w.data[...] = generator.uniform(-bound, bound, size=w.shape)
            self['conv{}.bias'.format(b)].data[...] = generator.uniform(-bound, bound, size=w.shape[0])
        return self

    def output_length(self, length):
        """Reduced length after the three blocks, or a value < 1 when too short."""
        for k in self.kernels:
            length = length - k + 1
            if length < self.pool_window:
                return 0
            length = (length - self.pool_window) // self.pool_stride + 1
        return length

    def min_length(self):
        length = 1
        while self.output_length(length) < 1:
            length += 1
        return length


def encoder_forward(p, x, lengths=None):
    """Batched encoder: (N, C, T) -> (N, d_target, T').

    With `lengths` given, outputs past each series' own reduced length are
    zeroed so right-padding never leaks into a representation.
    """
    h = nx.as_tensor(x)
    if h.ndim != 3 or h.shape[1] != p.in_channels:
        raise ShapeError('encode', h.shape, (p.in_channels,))
    for b in range(1, len(p.kernels) + 1):
        h = nx.conv1d(h, p['conv{}.weight'.format(b)], p['conv{}.bias'.format(b)])
        h = nx.relu(h)
        h = nx.maxpool1d(h, p.pool_window, p.pool_stride)
    if lengths is not None:
        valid = np.array([max(1, p.output_length(n)) for n in lengths])
        mask = (np.arange(h.shape[2])[None, :] < valid[:, None]).astype(np.float64)
        h = nx.mul(h, mask[:, None, :])
    return h


def pad_batch(arrays, min_length):
    """Right-pad (C, T_i) arrays with zeros to a common length >= min_length."""
    lengths = [a.shape[1] for a in arrays]
    width = max(max(lengths), min_length)
    out = np.zeros((len(arrays), arrays[0].shape[0], width))
    for i, a in enumerate(arrays):
        out[i, :, :a.shape[1]] = a
    return out, lengths


def _values(x):
    return x.values if isinstance(x, TimeSeries) else np.asarray(x, dtype=np.float64)


def encode(p, x):
    """Representation of one series; the series must reach the encoder's minimum length."""
    values = _values(x)
    if values.ndim != 2 or values.shape[0] != p.in_channels:
        raise ShapeError('encode', values.shape, (p.in_channels,))
    if p.output_length(values.shape[1]) < 1:
        raise DataError('series of length {} is shorter than the encoder minimum {}'.format(
            values.shape[1], p.min_length()))
    return Representation(encoder_forward(p, values[None]).data[0].copy())


def represent(p, series, workers=1):
    """Encode every series; short series are right-padded to the encoder minimum.

    Series of equal length are encoded together; the result is in input order.
    """
    groups = {}
    for i, s in enumerate(series):
        groups.setdefault(_values(s).shape[1], []).append(i)
    min_length = p.min_length()

    def run(indices):
        arrays = [_values(series[i]) for i in indices]
        batch, lengths = pad_batch(arrays, min_length)
        out = encoder_forward(p, batch, lengths).data
        valid = max(1, p.output_length(lengths[0]))
        return [(i, Representation(out[k, :, :valid].copy())) for k, i in enumerate(indices)]

    reps = [None] * len(series)
    keys = sorted(groups)
    if workers > 1 and len(keys) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda k: run(groups[k]), keys))
    else:
        results = [run(groups[k]) for k in keys]
    for chunk in results:
        for i, r in chunk:
            reps[i] = r
    return reps


def _crop_length(length, crop_length):
    return length // 2 if crop_length is None else crop_length


def gen_negative_noise(x, sigma, seed):
    """x + Normal(0, sigma^2) noise; sigma may be a scalar or per-channel."""
    values = _values(x)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ConfigError('sigma must be positive')
    if sigma.ndim == 1:
        sigma = sigma[:, None]
    noise = rng(seed).standard_normal(values.shape) * sigma
    return TimeSeries(values + noise, getattr(x, 'series_id', -1))


def gen_negative_crop(x, seed, crop_length=None):
    """Two non-overlapping windows of length L, a dissimilar pair."""
    values = _values(x)
    length = values.shape[1]
    size = _crop_length(length, crop_length)
    if size < 1 or length < 2 * size:
        raise DataError('series of length {} can not hold two disjoint crops of {}'.format(length, size))
    generator = rng(seed)
    first = int(generator.integers(0, length - 2 * size + 1))
    second = int(generator.integers(first + size, length - size + 1))
    if generator.random() < 0.5:
        first, second = second, first
    sid = getattr(x, 'series_id', -1)
    return (TimeSeries(values[:, first:first + size].copy(), sid),
            TimeSeries(values[:, second:second + size].copy(), sid))


def crop_offsets(length, seed, crop_length=None):
    """Start offsets of a positive pair: windows overlapping by at least half."""
    size = _crop_length(length, crop_length)
    if size < 1 or length < size:
        raise DataError('series of length {} is shorter than the crop {}'.format(length, size))
    generator = rng(seed)
    first = int(generator.integers(0, length - size + 1))
    shift = size // 2
    second = int(generator.integers(max(0, first - shift), min(length - size, first + shift) + 1))
    return first, second


def gen_positive_pair(x, seed, crop_length=None):
    values = _values(x)
    size = _crop_length(values.shape[1], crop_length)
    first, second = crop_offsets(values.shape[1], seed, crop_length)
    sid = getattr(x, 'series_id', -1)
    return ContrastPair(TimeSeries(values[:, first:first + size].copy(), sid),
                        TimeSeries(values[:, second:second + size].copy(), sid), SIMILAR)


def pair_losses(z_i, z_j, y, margin, convention='standard'):
    """Per-pair margin loss over flattened representations, shape (P,).

    standard: y * d^2 + (1 - y) * max(0, margin - d)^2; swapped exchanges the roles of y.
    """
    z_i, z_j = nx.as_tensor(z_i), nx.as_tensor(z_j)
    if z_i.shape != z_j.shape:
        raise ShapeError('contrastive_loss', z_i.shape, z_j.shape)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    diff = nx.reshape(nx.sub(z_i, z_j), (z_i.shape[0], -1))
    d2 = nx.sum_(nx.mul(diff, diff), axis=1)
    d = nx.sqrt(d2)
    gap = nx.relu(nx.sub(float(margin), d))
    push = nx.mul(gap, gap)
    pull_weight, push_weight = (y, 1.0 - y) if convention == 'standard' else (1.0 - y, y)
    return nx.add(nx.mul(d2, pull_weight), nx.mul(push, push_weight))


def contrastive_loss(z_i, z_j, y, margin=1.0, convention='standard'):
    """Loss of a single pair of representations as a scalar Tensor."""
    if margin <= 0:
        raise ConfigError('margin must be positive')
    a = z_i.sequence if isinstance(z_i, Representation) else z_i
    b = z_j.sequence if isinstance(z_j, Representation) else z_j
    a, b = nx.as_tensor(a), nx.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError('contrastive_loss', a.shape, b.shape)
    a = nx.reshape(a, (1,) + a.shape)
    b = nx.reshape(b, (1,) + b.shape)
    return nx.reshape(pair_losses(a, b, [y], margin, convention), ())


def _view_seed(seed, epoch, index, kind):
    return int(np.random.SeedSequence([int(seed), epoch, index, kind]).generate_state(1)[0])


def build_views(d, indices, cfg, seed, epoch):
    """Left views, right views and labels for the three pair kinds of each anchor.

    A series of length 1 has no two disjoint windows and contributes no crop negative.
    """
    kinds = {'positive': ([], [], SIMILAR), 'noise': ([], [], DISSIMILAR), 'crop': ([], [], DISSIMILAR)}
    for i in indices:
        s = d.series[i]
        size = max(1, int(s.length * cfg.crop_fraction))
        pair = gen_positive_pair(s, _view_seed(seed, epoch, i, 0), size)
        kinds['positive'][0].append(pair.left.values)
        kinds['positive'][1].append(pair.right.values)
        sigma = cfg.sigma_scale * np.maximum(s.values.std(axis=1), 1e-3)
        noisy = gen_negative_noise(s, sigma, _view_seed(seed, epoch, i, 1))
        kinds['noise'][0].append(s.values)
        kinds['noise'][1].append(noisy.values)
        if s.length < 2:
            continue
        left, right = gen_negative_crop(s, _view_seed(seed, epoch, i, 2), min(size, s.length // 2))
        kinds['crop'][0].append(left.values)
        kinds['crop'][1].append(right.values)
    return kinds


def batch_loss(p, d, indices, cfg, seed, epoch):
    """Mean contrastive loss over all pairs generated for `indices`."""
    losses = []
    min_length = p.min_length()
    for lefts, rights, y in build_views(d, indices, cfg, seed, epoch).values():
        if not lefts:
            continue
        left, lengths = pad_batch(lefts + rights, min_length)
        z = encoder_forward(p, left, lengths)
        half = len(lefts)
        z_i = nx.take(z, np.arange(half), axis=0)
        z_j = nx.take(z, np.arange(half, 2 * half), axis=0)
        losses.append(pair_losses(z_i, z_j, np.full(half, y), cfg.margin, cfg.loss_convention))
    return nx.mean(nx.concatenate(losses, axis=0))


def load_encoder(path, in_channels, cfg):
    p = EncoderParams.from_config(in_channels, cfg)
    arrays, manifest = storage.load_checkpoint(path, dict((name, t.shape) for name, t in p.items()))
    p.load_arrays(arrays)
    return p, manifest.get('extra', {}).get('loss_trace', [])


def save_encoder(path, p, seed, loss_trace):
    storage.save_checkpoint(path, p.arrays(), seed=seed, extra={'kind': 'temcl', 'loss_trace': list(loss_trace)})


def pretrain(d, cfg, seed, checkpoint_path=None):
    """Train the encoder on the train split; returns (params, per-epoch mean loss).

    An existing checkpoint at `checkpoint_path` is loaded instead of training.
    """
    if checkpoint_path is not None and os.path.isfile(checkpoint_path):
        log.info('Pre-trained encoder found at %s, skipping contrastive training', checkpoint_path)
        return load_encoder(checkpoint_path, d.channels, cfg)
    train = d.train_indices()
    if not train:
        raise DataError('pretraining needs a nonempty train split')
    p = EncoderParams.from_config(d.channels, cfg).initialize(seed)
    state = OptimState(p, lr=cfg.lr)
    batch_size = cfg.resolved_batch_size(len(train))
    trace = []
    for epoch in range(cfg.pretrain_epochs):
        order = rng(seed, 3, epoch).permutation(train)
        total = 0.0
        batches = 0
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            p.zero_grad()
            with nx.Tape(check_finite=cfg.debug) as tape:
                loss = batch_loss(p, d, chunk, cfg, seed, epoch)
            if not np.isfinite(loss.item()):
                raise NumericError('contrastive loss is {}'.format(loss.item()), epoch=epoch)
            nx.backward(tape, loss)
            adam_step(p, p.grads(), state)
            total += loss.item()
            batches += 1
        trace.append(total / batches)
        log.debug('pretrain epoch %d loss %.6f', epoch, trace[-1])
    if cfg.pretrain_epochs:
        log.info('Contrastive pretraining finished: loss %.6f -> %.6f', trace[0], trace[-1])
    if checkpoint_path is not None:
        save_encoder(checkpoint_path, p, seed, trace)
    return p, trace
