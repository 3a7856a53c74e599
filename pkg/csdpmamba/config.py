#!/usr/bin/env python

"""Run configuration.

Precedence is dataclass defaults < JSON config file < explicit overrides
(command-line flags). `CSDP_OUT_DIR` provides the default output directory.
Each field records where its default comes from in `metadata['source']`.
"""

import dataclasses
import json
import logging
import os
from typing import Optional, Tuple

from csdpmamba.errors import ConfigError
from csdpmamba.utils import content_hash


log = logging.getLogger('csdpmamba')
log.addHandler(logging.NullHandler())


OUT_DIR_ENV = 'CSDP_OUT_DIR'
MODES = ('full', 'only_dpmamba', 'only_kangin', 'only_contrastfastdtw')

STATED = 'stated'
CHOSEN = 'chosen'


def _field(default, source, note=''):
    return dataclasses.field(default=default, metadata={'source': source, 'note': note})


def _default_out_dir():
    return os.environ.get(OUT_DIR_ENV, 'csdp_out')


@dataclasses.dataclass
class TrainConfig(object):
    epochs: int = _field(1000, STATED, 'training lasts 1000 epochs')
    batch_size: Optional[int] = _field(None, CHOSEN, 'None means min(N, 64)')
    lr: float = _field(1e-3, STATED, 'initial learning rate 1e-3')
    pretrain_epochs: int = _field(500, STATED, 'contrastive pretraining for 500 epochs')
    margin: float = _field(1.0, CHOSEN, 'contrastive margin m')
    sigma_scale: float = _field(0.2, CHOSEN, 'noise std as a fraction of the per-channel std of the anchor')
    crop_fraction: float = _field(0.5, CHOSEN, 'crop length as a fraction of the series length')
    alpha: float = _field(1.0, CHOSEN, 'adjacency scaling exp(-alpha * D)')
    topk: int = _field(5, CHOSEN, 'neighbors kept per row')
    radius: int = _field(1, STATED, 'FastDTW radius 1')
    d_target: int = _field(64, CHOSEN, 'representation channels, also the SSM model width')
    encoder_channels: Tuple[int, int] = _field((32, 64), CHOSEN, 'widths of the first two conv blocks')
    encoder_kernels: Tuple[int, int, int] = _field((8, 5, 3), CHOSEN, 'conv kernel sizes')
    pool_window: int = _field(2, CHOSEN)
    pool_stride: int = _field(2, CHOSEN)
    ssm_state: int = _field(16, CHOSEN, 'SSM state dimension S')
    ssm_dense_a: bool = _field(False, CHOSEN, 'dense transition matrix instead of a stable diagonal')
    split_paths: bool = _field(False, CHOSEN, 'separate A, B, C for the reverse path')
    gin_layers: int = _field(2, STATED, 'single and multi-layer KAN-GIN were used')
    gin_unweighted: bool = _field(False, CHOSEN, 'plain neighbor sum instead of similarity-weighted')
    kan_grid: int = _field(8, CHOSEN, 'spline intervals G')
    kan_range: float = _field(3.0, CHOSEN, 'spline grid covers [-g, g]')
    seed: int = _field(0, CHOSEN)
    label_fraction: float = _field(1.0, STATED, '5%, 10% and 100% labels were evaluated')
    mode: str = _field('full', STATED, 'component ablation modes')
    normalize: bool = _field(True, CHOSEN, 'z-normalize series on ingestion')
    fastdtw_variant: str = _field('canonical', CHOSEN, 'canonical refinement or the truncated recursion')
    loss_convention: str = _field('standard', CHOSEN, 'standard: y=1 pulls together; swapped: roles exchanged')
    graph_order: str = _field('masked', CHOSEN, 'masked: sentinels become 0 before exp; raw: exp applied literally')
    inverse_weights: bool = _field(False, CHOSEN, 'apply 1/(1+|A|) on top of the exponential scaling')
    kmeans_restarts: int = _field(10, CHOSEN)
    kmeans_iterations: int = _field(100, CHOSEN)
    plateau_factor: float = _field(0.5, CHOSEN, 'ReduceLROnPlateau factor')
    plateau_patience: int = _field(50, CHOSEN, 'ReduceLROnPlateau patience')
    lr_floor: float = _field(1e-6, CHOSEN)
    raw_matrix: bool = _field(False, CHOSEN, 'FastDTW over raw series instead of representations')
    workers: int = _field(1, CHOSEN, 'thread pool size for matrix construction and encoding')
    debug: bool = _field(False, CHOSEN, 'check every recorded autodiff value for NaN/Inf')
    out_dir: str = dataclasses.field(default_factory=_default_out_dir, metadata={'source': CHOSEN, 'note': ''})

    def validate(self):
        positive = ['epochs', 'lr', 'margin', 'sigma_scale', 'topk', 'd_target', 'ssm_state', 'gin_layers',
                    'kan_grid', 'kan_range', 'kmeans_restarts', 'kmeans_iterations', 'plateau_patience',
                    'lr_floor', 'workers', 'pool_window', 'pool_stride']
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError('{} must be positive, got {}'.format(name, getattr(self, name)))
        for name in ('pretrain_epochs', 'radius', 'alpha'):
            if getattr(self, name) < 0:
                raise ConfigError('{} must be >= 0'.format(name))
        if self.epochs < 0:
            raise ConfigError('epochs must be >= 0')
        if self.d_target < 2:
            raise ConfigError('d_target must be >= 2')
        if self.gin_layers not in (1, 2, 3):
            raise ConfigError('gin_layers must be 1, 2 or 3')
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError('label_fraction must lie in (0, 1]')
        if not 0.0 < self.crop_fraction <= 0.5:
            raise ConfigError('crop_fraction must lie in (0, 0.5]')
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError('plateau_factor must lie in (0, 1)')
        if self.batch_size is not None:
            if self.batch_size < 1:
                raise ConfigError('batch_size must be positive')
            if self.label_fraction < 1.0 and self.batch_size % 2:
                raise ConfigError('batch_size must be even for semi-supervised training')
        if len(self.encoder_channels) != 2 or len(self.encoder_kernels) != 3:
            raise ConfigError('encoder needs 2 hidden widths and 3 kernel sizes')
        choices = {
            'mode': MODES,
            'fastdtw_variant': ('canonical', 'truncated'),
            'loss_convention': ('standard', 'swapped'),
            'graph_order': ('masked', 'raw'),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError('{} must be one of {}, got {!r}'.format(name, ', '.join(allowed), getattr(self, name)))
        return self

    def resolved_batch_size(self, n):
        b = self.batch_size if self.batch_size is not None else min(n, 64)
        if self.label_fraction < 1.0 and b % 2:
            b += 1
        return max(b, 1)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d['encoder_channels'] = list(self.encoder_channels)
        d['encoder_kernels'] = list(self.encoder_kernels)
        return d

    @classmethod
    def from_dict(cls, values):
        names = set(f.name for f in dataclasses.fields(cls))
        unknown = sorted(set(values) - names)
        if unknown:
            raise ConfigError('unknown configuration keys: {}'.format(', '.join(unknown)))
        values = dict(values)
        for key in ('encoder_channels', 'encoder_kernels'):
            if key in values:
                values[key] = tuple(values[key])
        return cls(**values).validate()

    @classmethod
    def load(cls, path=None, overrides=None):
        """Defaults, then the JSON file at `path`, then non-None `overrides`."""
        values = {}
        if path is not None:
            try:
                with open(path, 'r', encoding='utf-8') as f:
                    values = json.load(f)
            except (OSError, ValueError) as e:
                raise ConfigError('Can not read config {}: {}'.format(path, e))
            if not isinstance(values, dict):
                raise ConfigError('config file must hold a JSON object')
            log.info('Loaded configuration from %s', path)
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        return cls.from_dict(values)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes).validate()

    def subset(self, names):
        d = self.to_dict()
        return dict((name, d[name]) for name in names)

    def digest(self, names, *inputs):
        return content_hash(self.subset(names), *inputs)

    @classmethod
    def provenance(cls):
        return dict((f.name, dict(f.metadata)) for f in dataclasses.fields(cls))


PRETRAIN_KEYS = ('pretrain_epochs', 'margin', 'sigma_scale', 'crop_fraction', 'd_target', 'encoder_channels',
                 'encoder_kernels', 'pool_window', 'pool_stride', 'batch_size', 'lr', 'seed', 'loss_convention',
                 'normalize')
MATRIX_KEYS = PRETRAIN_KEYS + ('radius', 'fastdtw_variant', 'kmeans_restarts', 'kmeans_iterations', 'raw_matrix')
