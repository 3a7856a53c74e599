#!/usr/bin/env python

"""Batch training over the similarity graph, evaluation and comparison harnesses.

Node inputs are computed once from the frozen encoder. Every iteration draws
a batch of labeled train nodes (half labeled, half unlabeled when only part
of the labels is visible), restricts the graph to the batch, and minimizes
the mean negative log-likelihood over the labeled batch nodes.
"""

import collections
import dataclasses
import json
import logging
import time
from typing import List, Optional

import numpy as np
import pandas as pd

from csdpmamba import dpmamba
from csdpmamba import kangin
from csdpmamba import numerics as nx
from csdpmamba import simgraph
from csdpmamba import storage
from csdpmamba import synthetic
from csdpmamba import temcl
from csdpmamba.config import TrainConfig
from csdpmamba.data import TRAIN, apply_split, split_semisupervised
from csdpmamba.errors import ConfigError, GradCheckError, LabelError, NumericError, ShapeError
from csdpmamba.optim import OptimState, adam_step, plateau_update
from csdpmamba.utils import content_hash, rng


log = logging.getLogger('csdpmamba')
log.addHandler(logging.NullHandler())


FULL = 'full'
ONLY_DPMAMBA = 'only_dpmamba'
ONLY_KANGIN = 'only_kangin'
ONLY_CONTRASTFASTDTW = 'only_contrastfastdtw'
GRADCHECK_TOLERANCE = 1e-4

Similarity = collections.namedtuple('Similarity', ['reps', 'clusters', 'matrix', 'graph'])


@dataclasses.dataclass(frozen=True, eq=False)
class NodeInputs(object):
    """Per-node model inputs: padded sequences (N, T', d) with lengths, or vectors (N, F)."""

    values: np.ndarray
    lengths: Optional[np.ndarray] = None

    def take(self, indices):
        indices = np.asarray(indices, dtype=np.intp)
        return NodeInputs(self.values[indices], None if self.lengths is None else self.lengths[indices])


@dataclasses.dataclass
class Metrics(object):
    mode: str
    seed: int
    label_fraction: float = 1.0
    labeled: Optional[int] = None
    epoch_losses: List[float] = dataclasses.field(default_factory=list)
    epoch_lrs: List[float] = dataclasses.field(default_factory=list)
    train_accuracy: Optional[float] = None
    test_accuracy: Optional[float] = None
    per_class_accuracy: List[Optional[float]] = dataclasses.field(default_factory=list)
    confusion: List[List[int]] = dataclasses.field(default_factory=list)
    wall_time: float = 0.0

    def summary(self, timing=False):
        """Final numbers only; wall time is left out unless `timing` is set."""
        out = {
            'mode': self.mode,
            'seed': self.seed,
            'label_fraction': self.label_fraction,
            'labeled': self.labeled,
            'epochs': len(self.epoch_losses),
            'final_loss': self.epoch_losses[-1] if self.epoch_losses else None,
            'train_accuracy': self.train_accuracy,
            'test_accuracy': self.test_accuracy,
            'per_class_accuracy': self.per_class_accuracy,
            'confusion': self.confusion,
        }
        if timing:
            out['wall_time'] = self.wall_time
        return out


def summary_features(d):
    """Per-channel mean and std of every series, shape (N, 2C)."""
    return np.stack([np.concatenate([s.values.mean(axis=1), s.values.std(axis=1)]) for s in d.series])


class ModelParams(object):
    """Trainable parts of one ablation mode plus the frozen encoder.

    `trainable` gathers every learned tensor under its checkpoint name
    (`dpmamba.*`, `kangin.*`); the encoder is never part of it.
    """

    def __init__(self, cfg, channels, classes, encoder=None):
        """Constructor.

        Args:
            cfg: TrainConfig, read for the mode and the layer sizes.
            channels: int, channel count of the dataset.
            classes: int, number of output classes.
            encoder: EncoderParams producing the node representations.
        """
        if cfg.mode == ONLY_CONTRASTFASTDTW:
            raise ConfigError('mode {} has no trainable model'.format(cfg.mode))
        self.mode = cfg.mode
        self.seed = cfg.seed
        self.encoder = encoder
        self.gin_unweighted = cfg.gin_unweighted
        self.workers = cfg.workers
        self.channels = channels
        self.classes = classes
        d = cfg.d_target
        self.ssm = None
        self.embed = None
        self.layers = []
        if self.mode in (FULL, ONLY_DPMAMBA):
            self.ssm = dpmamba.SSMParams.from_config(cfg)
        if self.mode == ONLY_KANGIN:
            self.embed = nx.ParamSet('kangin.embed')
            self.embed.add('W', np.zeros((d, 2 * channels)))
            self.embed.add('b', np.zeros(d))
        if self.mode != ONLY_DPMAMBA:
            self.layers = [kangin.GinLayerParams(d, cfg.kan_grid, cfg.kan_range, 'kangin.layer{}'.format(k))
                           for k in range(1, cfg.gin_layers + 1)]
        self.head = kangin.ClassifierHead(d, classes)
        self.trainable = nx.ParamSet()
        for part in [self.ssm, self.embed] + self.layers + [self.head]:
            if part is not None:
                self.trainable.update(part)

    def initialize(self, seed):
        if self.ssm is not None:
            self.ssm.initialize(seed)
        if self.embed is not None:
            bound = 1.0 / np.sqrt(2 * self.channels)
            self.embed['W'].data[...] = rng(seed, 505).uniform(-bound, bound, size=self.embed['W'].shape)
        for k, layer in enumerate(self.layers):
            layer.bank.initialize(seed, k)
        self.head.initialize(seed)
        return self

    def node_inputs(self, d):
        if self.mode == ONLY_KANGIN:
            return NodeInputs(summary_features(d))
        if self.encoder is None:
            raise ConfigError('mode {} needs a pretrained encoder'.format(self.mode))
        values, lengths = dpmamba.stack_representations(temcl.represent(self.encoder, d.series, self.workers))
        return NodeInputs(values, lengths)

    def uses_graph(self):
        return bool(self.layers)


def forward(m, inputs, graph):
    """Log-probabilities (n, classes) for the nodes of `inputs` over `graph`."""
    if m.mode == ONLY_KANGIN:
        h = nx.add(nx.matmul(inputs.values, nx.transpose(m.embed['W'])), m.embed['b'])
    else:
        h = dpmamba.encode_nodes(m.ssm, inputs.values, inputs.lengths)
    for layer in m.layers:
        h = kangin.gin_layer(layer, h, graph, m.gin_unweighted)
    return kangin.classify(m.head, h)


def canonical_order(d):
    """Node order by series content, so batching does not depend on dataset order."""
    keys = [content_hash(s.values) for s in d.series]
    return sorted(range(len(d)), key=lambda i: (keys[i], i))


def _sample(generator, pool, k):
    # a pool smaller than k is drawn with replacement; repeated draws collapse
    if len(pool) >= k:
        picks = generator.choice(len(pool), size=k, replace=False)
    else:
        picks = generator.choice(len(pool), size=k, replace=True)
    seen = []
    for p in picks.tolist():
        if pool[p] not in seen:
            seen.append(pool[p])
    return seen


def _check_graph(m, g, n):
    if not m.uses_graph():
        return
    if g is None:
        raise ConfigError('mode {} needs a similarity graph'.format(m.mode))
    if g.n != n:
        raise ShapeError('train', (g.n, g.n), (n,))


def batch_loss(m, inputs, g, batch, targets, labeled):
    """Mean NLL over the labeled nodes of `batch` on the batch subgraph."""
    sub = simgraph.batch_subgraph(g, batch) if m.uses_graph() else None
    logp = forward(m, inputs.take(batch), sub)
    rows = [k for k, i in enumerate(batch) if i in labeled]
    if not rows:
        raise LabelError('batch has no labeled nodes')
    return nx.nll_gather(logp, rows, targets[np.asarray(batch)[rows]])


def train(d, g, enc, cfg, inputs=None):
    """Fit the mode's model; returns (ModelParams, Metrics).

    Labels are read only where `d.label_mask` is set on a train node.
    """
    cfg.validate()
    m = ModelParams(cfg, d.channels, d.classes, enc).initialize(cfg.seed)
    _check_graph(m, g, len(d))
    order = canonical_order(d)
    labeled = [i for i in order if d.split[i] == TRAIN and d.label_mask[i] and d.labels[i] is not None]
    if not labeled:
        raise LabelError('no labeled train nodes to train on')
    labeled_set = set(labeled)
    unlabeled = [i for i in order if d.split[i] == TRAIN and i not in labeled_set]
    semi = cfg.label_fraction < 1.0
    batch_size = cfg.resolved_batch_size(len(d))
    per_pool = batch_size // 2 if semi else batch_size
    if inputs is None:
        inputs = m.node_inputs(d)
    targets = d.labels_array()
    state = OptimState(m.trainable, lr=cfg.lr, lr_floor=cfg.lr_floor)
    metrics = Metrics(cfg.mode, cfg.seed, cfg.label_fraction, len(labeled))
    start = time.perf_counter()
    log.info('Training mode %s on %d labeled and %d unlabeled nodes, batch %d, %d epochs',
             cfg.mode, len(labeled), len(unlabeled) if semi else 0, batch_size, cfg.epochs)
    for epoch in range(cfg.epochs):
        generator = rng(cfg.seed, 5, epoch)
        shuffled = [labeled[k] for k in generator.permutation(len(labeled))]
        total = 0.0
        steps = 0
        for s in range(0, len(shuffled), per_pool):
            batch = shuffled[s:s + per_pool]
            if semi and unlabeled:
                batch = batch + _sample(generator, unlabeled, per_pool)
            m.trainable.zero_grad()
            with nx.Tape(check_finite=cfg.debug) as tape:
                loss = batch_loss(m, inputs, g, batch, targets, labeled_set)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError('training loss is {}'.format(value), epoch=epoch)
            nx.backward(tape, loss)
            adam_step(m.trainable, m.trainable.grads(), state)
            total += value
            steps += 1
        mean_loss = total / steps
        metrics.epoch_losses.append(mean_loss)
        metrics.epoch_lrs.append(plateau_update(state, mean_loss, cfg.plateau_factor, cfg.plateau_patience))
        log.debug('epoch %d loss %.6f lr %g', epoch, mean_loss, state.lr)
    metrics.wall_time = time.perf_counter() - start
    pred, _ = predict(m, d, g, inputs)
    metrics.train_accuracy = _accuracy(pred, targets, _labeled_of(d, TRAIN))
    log.info('Training finished in %.1fs, train accuracy %s', metrics.wall_time, metrics.train_accuracy)
    return m, metrics


def predict(m, d, g, inputs=None):
    """Full-graph pass over all N nodes; returns (argmax classes, log-probabilities)."""
    _check_graph(m, g, len(d))
    if inputs is None:
        inputs = m.node_inputs(d)
    order = canonical_order(d)
    graph = simgraph.batch_subgraph(g, order) if m.uses_graph() else None
    logp = forward(m, inputs.take(order), graph).data
    out = np.empty_like(logp)
    out[order] = logp
    return np.argmax(out, axis=1), out


def visible_train_indices(d):
    """Train nodes whose label the loss may read."""
    return [i for i in d.train_indices() if d.label_mask[i] and d.labels[i] is not None]


def _labeled_of(d, tag):
    return [i for i in d.indices(tag) if d.labels[i] is not None]


def _accuracy(pred, targets, indices):
    if not indices:
        return None
    return float(np.mean(pred[indices] == targets[indices]))


def _fill_test_metrics(metrics, d, pred):
    test = d.test_indices()
    if not test:
        raise LabelError('dataset has no test nodes to evaluate')
    if any(d.labels[i] is None for i in test):
        raise LabelError('evaluation needs a label for every test node')
    targets = d.labels_array()
    metrics.test_accuracy = _accuracy(pred, targets, test)
    confusion = np.zeros((d.classes, d.classes), dtype=np.int64)
    np.add.at(confusion, (targets[test], pred[test]), 1)
    metrics.confusion = confusion.tolist()
    per_class = []
    for c in range(d.classes):
        total = confusion[c].sum()
        per_class.append(float(confusion[c, c] / total) if total else None)
    metrics.per_class_accuracy = per_class
    return metrics


def evaluate(m, d, g, inputs=None, metrics=None):
    """Train and test accuracy of a fitted model from one full-graph pass.

    `metrics`, when given, is completed in place and returned.
    """
    pred, _ = predict(m, d, g, inputs)
    if metrics is None:
        metrics = Metrics(m.mode, m.seed)
    metrics.train_accuracy = _accuracy(pred, d.labels_array(), _labeled_of(d, TRAIN))
    return _fill_test_metrics(metrics, d, pred)


def nearest_neighbor_predict(matrix, labels, train_mask):
    """1-NN over a distance matrix; sentinel entries are never neighbors.

    A node is never its own neighbor, ties go to the lower index, and a node
    without any eligible neighbor gets the most frequent training class.

    >>> nearest_neighbor_predict(np.array([[0., 1., 4.], [1., 0., 2.], [4., 2., 0.]]),
    ...                          np.array([0, 1, 1]), np.array([True, True, False])).tolist()
    [1, 0, 1]
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    train_mask = np.asarray(train_mask, dtype=bool)
    if not train_mask.any():
        raise LabelError('nearest-neighbor classification needs labeled nodes')
    majority = int(np.argmax(np.bincount(labels[train_mask])))
    pred = np.empty(matrix.shape[0], dtype=np.int64)
    for i in range(matrix.shape[0]):
        eligible = train_mask & (matrix[i] != simgraph.SENTINEL)
        eligible[i] = False
        columns = np.flatnonzero(eligible)
        if not columns.size:
            pred[i] = majority
            continue
        pred[i] = labels[columns[np.argmin(matrix[i, columns])]]
    return pred


def nearest_neighbor_metrics(matrix, d, seed, mode=ONLY_CONTRASTFASTDTW, label_fraction=1.0):
    start = time.perf_counter()
    mask = np.array([d.split[i] == TRAIN and d.label_mask[i] and d.labels[i] is not None for i in range(len(d))])
    pred = nearest_neighbor_predict(matrix, np.maximum(d.labels_array(), 0), mask)
    metrics = Metrics(mode, seed, label_fraction, int(mask.sum()))
    metrics.train_accuracy = _accuracy(pred, d.labels_array(), _labeled_of(d, TRAIN))
    _fill_test_metrics(metrics, d, pred)
    metrics.wall_time = time.perf_counter() - start
    return metrics


def build_similarity(d, enc, cfg, raw=False):
    """Representations, clusters, distance matrix and graph for `d`.

    With `raw`, distances are taken between the input series over all pairs.
    """
    if raw:
        reps, clusters, points = None, None, list(d.series)
    else:
        reps = temcl.represent(enc, d.series, cfg.workers)
        clusters = simgraph.cluster_representations(reps, d.classes, cfg.seed, cfg.kmeans_restarts,
                                                    cfg.kmeans_iterations)
        points = reps
    matrix = simgraph.contrast_fastdtw_matrix(points, clusters, cfg.radius, cfg.fastdtw_variant, cfg.workers)
    graph = simgraph.build_graph(matrix, cfg.alpha, cfg.topk, cfg.graph_order, cfg.inverse_weights)
    return Similarity(reps, clusters, matrix, graph)


def run_mode(d, similarity, enc, cfg):
    """Train then evaluate one mode; returns (ModelParams or None, Metrics)."""
    if cfg.mode == ONLY_CONTRASTFASTDTW:
        return None, nearest_neighbor_metrics(similarity.matrix, d, cfg.seed, cfg.mode, cfg.label_fraction)
    m, metrics = train(d, similarity.graph, enc, cfg)
    return m, evaluate(m, d, similarity.graph, metrics=metrics)


def _prepare(d, cfg, enc, similarity):
    if enc is None:
        enc, _ = temcl.pretrain(d, cfg, cfg.seed)
    if similarity is None:
        similarity = build_similarity(d, enc, cfg)
    return enc, similarity


def visible_labels(d, cfg):
    """`d` with train labels cut down to `cfg.label_fraction`, stratified by class.

    The labeled subset is drawn with `cfg.seed`; at fraction 1 `d` is returned as is.
    """
    if cfg.label_fraction >= 1.0:
        return d
    split = split_semisupervised(d, cfg.label_fraction, cfg.seed)
    log.info('Label fraction %g: %d of %d train labels visible', cfg.label_fraction,
             len(split.labeled_indices), len(split.labeled_indices) + len(split.unlabeled_indices))
    return apply_split(d, split)


def ablate(d, cfg, enc=None, similarity=None):
    """One row per component mode: full, only_dpmamba, only_kangin, only_contrastfastdtw."""
    enc, similarity = _prepare(d, cfg, enc, similarity)
    d = visible_labels(d, cfg)
    rows = []
    for mode in (FULL, ONLY_DPMAMBA, ONLY_KANGIN, ONLY_CONTRASTFASTDTW):
        _, metrics = run_mode(d, similarity, enc, cfg.replace(mode=mode))
        log.info('Ablation %s: test accuracy %s', mode, metrics.test_accuracy)
        rows.append(metrics.summary())
    return table(rows)


def label_fraction_sweep(d, fractions, cfg, enc=None, similarity=None):
    """One train/evaluate cycle per labeled fraction of the train split."""
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ConfigError('label fractions must lie in (0, 1], got {}'.format(f))
    enc, similarity = _prepare(d, cfg, enc, similarity)
    rows = []
    for f in fractions:
        split = split_semisupervised(d, f, cfg.seed)
        _, metrics = run_mode(apply_split(d, split), similarity, enc, cfg.replace(label_fraction=f))
        log.info('Label fraction %g (%d labeled): test accuracy %s', f, metrics.labeled, metrics.test_accuracy)
        rows.append(metrics.summary())
    return table(rows)


def representation_ablation(d, cfg, enc=None):
    """1-NN accuracy on raw-series FastDTW versus representation ContrastFastDTW."""
    if enc is None:
        enc, _ = temcl.pretrain(d, cfg, cfg.seed)
    rows = []
    for name, raw in (('fastdtw', True), ('contrast_fastdtw', False)):
        similarity = build_similarity(d, enc, cfg, raw=raw)
        row = nearest_neighbor_metrics(similarity.matrix, d, cfg.seed, name).summary()
        row['representation'] = name
        rows.append(row)
    return table(rows)


def table(rows):
    frame = pd.DataFrame(rows)
    for column in ('per_class_accuracy', 'confusion'):
        if column in frame:
            frame[column] = frame[column].map(json.dumps)
    return frame


def write_table(frame, path):
    frame.to_csv(path, index=False, float_format='%.17g', lineterminator='\n')


def write_metrics(metrics, lines_path, summary_path):
    """One JSON object per epoch, then the final summary as a separate JSON file."""
    with open(lines_path, 'w', encoding='utf-8', newline='\n') as f:
        for epoch, (loss, lr) in enumerate(zip(metrics.epoch_losses, metrics.epoch_lrs)):
            f.write(json.dumps({'epoch': epoch, 'loss': loss, 'lr': lr}, sort_keys=True) + '\n')
    with open(summary_path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(metrics.summary(), f, indent=1, sort_keys=True)
        f.write('\n')


def save_model(path, m, seed):
    extra = {'kind': 'model', 'mode': m.mode, 'channels': m.channels, 'classes': m.classes}
    storage.save_checkpoint(path, m.trainable.arrays(), seed=seed, extra=extra)


def load_model(path, cfg, channels, classes, enc=None):
    m = ModelParams(cfg, channels, classes, enc)
    shapes = dict((name, t.shape) for name, t in m.trainable.items())
    arrays, manifest = storage.load_checkpoint(path, shapes)
    if manifest.get('extra', {}).get('mode', m.mode) != m.mode:
        raise ConfigError('{} holds a {} model, expected {}'.format(path, manifest['extra']['mode'], m.mode))
    m.trainable.load_arrays(arrays)
    return m


def gradcheck_battery(seed=0, step=1e-5):
    """Finite-difference checks of every differentiable stage, name -> max relative error."""
    generator = rng(seed, 606)
    results = collections.OrderedDict()

    cfg = TrainConfig(d_target=4, encoder_channels=(3, 4), margin=1.0)
    toy = synthetic.make_toy(n=2, length=64, seed=seed)
    enc = temcl.EncoderParams.from_config(toy.channels, cfg).initialize(seed)
    results['contrastive_loss'] = nx.grad_check(lambda ps: temcl.batch_loss(enc, toy, [0, 1], cfg, seed, 0),
                                                enc, step)

    ssm = dpmamba.SSMParams(3, 4).initialize(seed)
    x = nx.Tensor(generator.normal(size=(12, 3)), requires_grad=True, name='x')
    w = generator.normal(size=(12, 3))
    params = dict(ssm.items())
    params['x'] = x
    results['scan'] = nx.grad_check(
        lambda ps: nx.sum_(nx.mul(dpmamba.combine(dpmamba.ssm_forward(ssm, x), dpmamba.ssm_reverse(ssm, x), ssm),
                                  w)), params, step)

    bank = kangin.KanFunctionBank(3, 2).initialize(seed)
    v = nx.Tensor(generator.uniform(-2.5, 2.5, size=(4, 3)), requires_grad=True, name='v')
    r = generator.normal(size=(4, 2))
    params = dict(bank.items())
    params['v'] = v
    results['kan_apply'] = nx.grad_check(lambda ps: nx.sum_(nx.mul(kangin.kan_apply(bank, v), r)), params, step)

    def stack(n, d, classes, salt):
        layers = [kangin.GinLayerParams(d, prefix='kangin.layer{}'.format(k)) for k in (1, 2)]
        for k, layer in enumerate(layers):
            layer.bank.initialize(seed, salt, k)
            layer['eps'].data[...] = 0.1 * (k + 1)
        head = kangin.ClassifierHead(d, classes).initialize(seed)
        points = generator.normal(size=(n, 6))
        matrix = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1))
        graph = simgraph.build_graph(matrix, alpha=1.0, topk=2)
        return layers, head, graph

    def nll(h, layers, head, graph, targets):
        for layer in layers:
            h = kangin.gin_layer(layer, h, graph)
        return nx.nll_gather(kangin.classify(head, h), np.arange(len(targets)), targets)

    layers, head, graph = stack(5, 4, 3, 1)
    h = nx.Tensor(generator.normal(size=(5, 4)), requires_grad=True, name='h')
    params = dict(head.items())
    for layer in layers:
        params.update(layer.items())
    params['h'] = h
    results['kangin_nll'] = nx.grad_check(lambda ps: nll(h, layers, head, graph, np.array([0, 1, 2, 0])),
                                          params, step)

    layers, head, graph = stack(4, 4, 2, 2)
    ssm = dpmamba.SSMParams(4, 3).initialize(seed)
    seqs = generator.normal(size=(4, 6, 4))
    params = dict(head.items())
    params.update(ssm.items())
    for layer in layers:
        params.update(layer.items())
    results['dpmamba_kangin_nll'] = nx.grad_check(
        lambda ps: nll(dpmamba.encode_nodes(ssm, seqs), layers, head, graph, np.array([0, 1, 1])), params, step)
    for name, error in results.items():
        log.info('grad_check %s: %.3g', name, error)
    return results


def check_gradients(results, tolerance=GRADCHECK_TOLERANCE):
    failed = [name for name, error in results.items() if not error <= tolerance]
    if failed:
        raise GradCheckError('gradient check failed for {}'.format(', '.join(failed)))
    return results
