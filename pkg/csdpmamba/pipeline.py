#!/usr/bin/env python

import dataclasses
import datetime
import json
import logging
import os
from typing import Dict, List

import pandas as pd

from csdpmamba import simgraph
from csdpmamba import temcl
from csdpmamba import trainer
from csdpmamba._version import get_versions
from csdpmamba.config import MATRIX_KEYS, PRETRAIN_KEYS
from csdpmamba.data import TEST, TRAIN, merge, parse_long_csv, parse_ts, zscore_normalize
from csdpmamba.errors import LabelError, ParseError
from csdpmamba.storage import StageRegistry
from csdpmamba.utils import content_hash, file_hash


log = logging.getLogger('csdpmamba')
log.addHandler(logging.NullHandler())


MANIFEST_NAME = 'manifest.json'


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


@dataclasses.dataclass
class RunManifest(object):
    """What a run was asked to do, written before any stage runs."""

    command: str
    config: Dict
    inputs: List[str]
    out_dir: str
    seed: int
    version: str = dataclasses.field(default_factory=lambda: get_versions()['version'])
    stages: Dict[str, str] = dataclasses.field(default_factory=dict)

    def write(self, path):
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(dataclasses.asdict(self), f, indent=1, sort_keys=True)
            f.write('\n')

    @classmethod
    def read(cls, path):
        with open(path, 'r', encoding='utf-8') as f:
            return cls(**json.load(f))


def load_dataset(path, test_path=None):
    """Dataset from a `.ts` train file (plus optional test file) or a long CSV."""
    if not os.path.isfile(path):
        raise ParseError('no such file', None, path)
    if path.lower().endswith('.ts'):
        d = parse_ts(path, TRAIN)
        if test_path is not None:
            if not os.path.isfile(test_path):
                raise ParseError('no such file', None, test_path)
            d = merge(d, parse_ts(test_path, TEST))
        return d
    if test_path is not None:
        raise ParseError('a long CSV carries its own split column; --test-data applies to .ts files', None, path)
    return parse_long_csv(path)


class Pipeline(object):
    """Runs the stages for one dataset and configuration.

    Artifacts live in `out_dir`; completed stages are recorded in a SQLite
    registry keyed by a hash of their inputs and configuration subset, so a
    rerun reuses them unless `force` is set.
    """

    def __init__(self, cfg, force=False, timeout=10):
        """Constructor.

        Args:
            cfg: TrainConfig, validated configuration of the run.
            force: boolean, recompute stages even when their artifacts are registered.
            timeout: seconds to wait for the stage registry to become unlocked.
        """
        self.cfg = cfg.validate()
        self.out_dir = cfg.out_dir
        self.force = force
        self.timeout = timeout
        self.registry = None
        self.manifest = None
        self.dataset = None
        self.data_digest = None

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def write_manifest(self, command, inputs=()):
        os.makedirs(self.out_dir, exist_ok=True)
        self.manifest = RunManifest(command, self.cfg.to_dict(), list(inputs), self.out_dir, self.cfg.seed)
        self.manifest.write(self.path(MANIFEST_NAME))
        return self.manifest

    def start(self, command, data_path, test_path=None):
        """Write the RunManifest, then load and normalize the dataset."""
        inputs = [p for p in (data_path, test_path) if p is not None]
        self.write_manifest(command, inputs)
        self.registry = StageRegistry(self.path('stages.db'), timeout=self.timeout)
        d = load_dataset(data_path, test_path)
        if self.cfg.normalize:
            d = zscore_normalize(d)
        self.dataset = d
        self.data_digest = content_hash(*[file_hash(p) for p in inputs])
        log.info('Loaded %s: %d series, %d channels, %d classes (%d train, %d test)', d.name or data_path,
                 len(d), d.channels, d.classes, len(d.train_indices()), len(d.test_indices()))
        return d

    def _mark(self, stage):
        if self.manifest is not None:
            self.manifest.stages[stage] = _now()
            self.manifest.write(self.path(MANIFEST_NAME))

    def _cached(self, stage, digest):
        if self.force:
            return None
        artifact = self.registry.lookup(stage, digest)
        if artifact is not None:
            log.info('Stage %s is up to date (%s), skipping', stage, artifact)
        return artifact

    def _register(self, stage, digest, artifact):
        try:
            self.registry.forget(stage)
            self.registry.register(stage, digest, artifact)
            self.registry.commit()
        except Exception:
            self.registry.rollback()
            raise
        self._mark(stage)

    def pretrain(self):
        """Encoder parameters and loss trace; reuses a registered checkpoint."""
        d = self.dataset
        ckpt = self.path(temcl.CHECKPOINT_NAME)
        digest = self.cfg.digest(PRETRAIN_KEYS, self.data_digest)
        if self._cached('pretrain', digest):
            return temcl.load_encoder(ckpt, d.channels, self.cfg)
        if os.path.exists(ckpt):
            if not self.force:
                log.warning('Checkpoint %s was written for other data or settings, retraining', ckpt)
            os.unlink(ckpt)
        enc, trace = temcl.pretrain(d, self.cfg, self.cfg.seed, ckpt)
        frame = pd.DataFrame({'epoch': range(len(trace)), 'loss': trace}, columns=['epoch', 'loss'])
        frame.to_csv(self.path('temcl_loss.csv'), index=False, float_format='%.17g', lineterminator='\n')
        self._register('pretrain', digest, ckpt)
        return enc, trace

    def similarity(self, enc, raw=None):
        """Distance matrix and graph over all nodes; the matrix is cached, the graph rebuilt."""
        raw = self.cfg.raw_matrix if raw is None else raw
        name = 'matrix_raw.bin' if raw else 'matrix.bin'
        stage = 'simmatrix_raw' if raw else 'simmatrix'
        encoder_digest = '' if raw else file_hash(self.path(temcl.CHECKPOINT_NAME))
        digest = self.cfg.digest(MATRIX_KEYS, self.data_digest, encoder_digest, raw)
        matrix_path = self.path(name)
        if self._cached(stage, digest):
            matrix, _ = simgraph.load_matrix(matrix_path)
            graph = simgraph.build_graph(matrix, self.cfg.alpha, self.cfg.topk, self.cfg.graph_order,
                                         self.cfg.inverse_weights)
            similarity = trainer.Similarity(None, None, matrix, graph)
        else:
            similarity = trainer.build_similarity(self.dataset, enc, self.cfg, raw=raw)
            simgraph.save_matrix(similarity.matrix, matrix_path, alpha=self.cfg.alpha, topk=self.cfg.topk,
                                 radius=self.cfg.radius, raw=raw)
            self._register(stage, digest, matrix_path)
        simgraph.save_matrix(similarity.graph, self.path('graph.bin'), radius=self.cfg.radius, raw=raw)
        simgraph.export_heatmap(similarity.matrix, self.path('heatmap_raw.csv' if raw else 'heatmap.csv'))
        return similarity

    def prepare(self, need_graph=True):
        enc, _ = self.pretrain()
        similarity = self.similarity(enc) if need_graph else None
        return enc, similarity

    def train(self):
        """Train the configured mode, evaluate when test labels exist, write model and metrics.

        With a label fraction below 1 only a stratified share of the train labels is visible.
        """
        d = trainer.visible_labels(self.dataset, self.cfg)
        need_graph = self.cfg.mode != trainer.ONLY_DPMAMBA
        enc, similarity = self.prepare(need_graph)
        if self.cfg.mode == trainer.ONLY_CONTRASTFASTDTW:
            metrics = trainer.nearest_neighbor_metrics(similarity.matrix, d, self.cfg.seed,
                                                       label_fraction=self.cfg.label_fraction)
        else:
            graph = similarity.graph if similarity is not None else None
            m, metrics = trainer.train(d, graph, enc, self.cfg)
            trainer.save_model(self.path('model.ckpt'), m, self.cfg.seed)
            if d.test_indices() and all(d.labels[i] is not None for i in d.test_indices()):
                trainer.evaluate(m, d, graph, metrics=metrics)
        trainer.write_metrics(metrics, self.path('metrics.jsonl'), self.path('metrics_summary.json'))
        self._mark('train')
        return metrics

    def evaluate(self):
        d = trainer.visible_labels(self.dataset, self.cfg)
        test = d.test_indices()
        if not test or any(d.labels[i] is None for i in test):
            raise LabelError('evaluation needs a labeled test split')
        need_graph = self.cfg.mode != trainer.ONLY_DPMAMBA
        enc, similarity = self.prepare(need_graph)
        if self.cfg.mode == trainer.ONLY_CONTRASTFASTDTW:
            metrics = trainer.nearest_neighbor_metrics(similarity.matrix, d, self.cfg.seed,
                                                       label_fraction=self.cfg.label_fraction)
        else:
            m = trainer.load_model(self.path('model.ckpt'), self.cfg, d.channels, d.classes, enc)
            metrics = trainer.Metrics(self.cfg.mode, self.cfg.seed, self.cfg.label_fraction,
                                      len(trainer.visible_train_indices(d)))
            trainer.evaluate(m, d, similarity.graph if similarity is not None else None, metrics=metrics)
        self._mark('eval')
        return metrics.summary()

    def ablate(self, representations=False):
        enc, similarity = self.prepare()
        frame = trainer.ablate(self.dataset, self.cfg, enc, similarity)
        trainer.write_table(frame, self.path('ablation.csv'))
        if representations:
            trainer.write_table(trainer.representation_ablation(self.dataset, self.cfg, enc),
                                self.path('representations.csv'))
        self._mark('ablate')
        return frame

    def sweep(self, fractions):
        enc, similarity = self.prepare()
        frame = trainer.label_fraction_sweep(self.dataset, fractions, self.cfg, enc, similarity)
        trainer.write_table(frame, self.path('sweep.csv'))
        self._mark('sweep')
        return frame

    def close(self):
        if self.registry is not None:
            self.registry.close()
            self.registry = None
