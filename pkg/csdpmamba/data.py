#!/usr/bin/env python

"""Dataset model, `.ts` / long-CSV ingestion, normalization and label splits."""

import dataclasses
import json
import logging
import math
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from csdpmamba.errors import ConfigError, LabelError, ParseError
from csdpmamba.utils import rng


log = logging.getLogger('csdpmamba')
log.addHandler(logging.NullHandler())


TRAIN = 'train'
TEST = 'test'
LONG_CSV_COLUMNS = ['series_id', 'channel', 'time_index', 'value', 'label', 'split']
LONG_CSV_METADATA = ('name', 'classes', 'class_names', 'label_mask')


@dataclasses.dataclass(frozen=True, eq=False)
class TimeSeries(object):
    """One multivariate sample, values shaped (channels, length)."""

    values: np.ndarray
    series_id: int

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def length(self):
        return self.values.shape[1]


@dataclasses.dataclass(frozen=True)
class SemiSplit(object):
    labeled_indices: Tuple[int, ...]
    unlabeled_indices: Tuple[int, ...]
    fraction: float


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset(object):
    """N series sharing a channel count, with optional labels and split tags.

    `label_mask[i]` is true when the label of series i may be used for training.
    """

    series: Tuple[TimeSeries, ...]
    labels: Tuple[Optional[int], ...]
    classes: int
    split: Tuple[str, ...]
    label_mask: Tuple[bool, ...]
    class_names: Tuple[str, ...] = ()
    name: str = ''

    def __post_init__(self):
        n = len(self.series)
        if n < 2:
            raise ParseError('a dataset needs at least 2 series, got {}'.format(n))
        if self.classes < 2:
            raise ParseError('a dataset needs at least 2 classes, got {}'.format(self.classes))
        if not (len(self.labels) == len(self.split) == len(self.label_mask) == n):
            raise ParseError('labels, split and label_mask must have one entry per series')
        channels = self.series[0].channels
        for s in self.series:
            if s.values.ndim != 2 or s.channels != channels or s.length < 1:
                raise ParseError('series {} has shape {}, expected ({}, T>=1)'.format(
                    s.series_id, s.values.shape, channels))
            if not np.all(np.isfinite(s.values)):
                raise ParseError('series {} contains non-finite values'.format(s.series_id))
        for label in self.labels:
            if label is not None and not 0 <= label < self.classes:
                raise ParseError('label {} outside [0, {})'.format(label, self.classes))
        for tag in self.split:
            if tag not in (TRAIN, TEST):
                raise ParseError('unknown split tag {!r}'.format(tag))

    def __len__(self):
        return len(self.series)

    @property
    def channels(self):
        return self.series[0].channels

    @property
    def lengths(self):
        return [s.length for s in self.series]

    def indices(self, tag):
        return [i for i, t in enumerate(self.split) if t == tag]

    def train_indices(self):
        return self.indices(TRAIN)

    def test_indices(self):
        return self.indices(TEST)

    def labels_array(self):
        """Labels as an int array with -1 for missing labels."""
        return np.array([-1 if label is None else label for label in self.labels], dtype=np.int64)

    def with_label_mask(self, mask):
        return dataclasses.replace(self, label_mask=tuple(bool(m) for m in mask))

    def with_series(self, series):
        return dataclasses.replace(self, series=tuple(series))

    def subset(self, indices):
        """Dataset restricted to (and ordered by) `indices`."""
        indices = list(indices)
        return dataclasses.replace(
            self,
            series=tuple(self.series[i] for i in indices),
            labels=tuple(self.labels[i] for i in indices),
            split=tuple(self.split[i] for i in indices),
            label_mask=tuple(self.label_mask[i] for i in indices),
        )


def default_label_mask(labels, split):
    return tuple(label is not None and tag == TRAIN for label, tag in zip(labels, split))


def merge(train, test):
    """Concatenate a train and a test dataset into one transductive dataset."""
    if train.channels != test.channels:
        raise ParseError('train has {} channels but test has {}'.format(train.channels, test.channels))
    if train.class_names and test.class_names and train.class_names != test.class_names:
        raise ParseError('train and test declare different class labels')
    series = list(train.series) + list(test.series)
    series = [TimeSeries(s.values, i) for i, s in enumerate(series)]
    labels = train.labels + test.labels
    split = tuple([TRAIN] * len(train)) + tuple([TEST] * len(test))
    return Dataset(
        series=tuple(series),
        labels=labels,
        classes=max(train.classes, test.classes),
        split=split,
        label_mask=default_label_mask(labels, split),
        class_names=train.class_names or test.class_names,
        name=train.name or test.name,
    )


def _parse_float(token, line_number, path):
    token = token.strip()
    if token == '?' or token.lower() == 'nan':
        raise ParseError('missing values are not supported', line_number, path)
    try:
        value = float(token)
    except ValueError:
        raise ParseError('invalid number {!r}'.format(token), line_number, path)
    if not math.isfinite(value):
        raise ParseError('non-finite value {!r}'.format(token), line_number, path)
    return value


def parse_ts(path, split=TRAIN):
    """Load a `.ts` file of the time-series classification archive.

    Supports `@problemName`, `@dimensions`, `@seriesLength`, `@classLabel` and
    `@data`; other directives are ignored with a warning. Class labels are
    numbered in the order `@classLabel` declares them.
    """
    name = ''
    dimensions = None
    series_length = None
    class_names = None
    in_data = False
    series, labels = [], []
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith('#'):
                continue
            if not in_data:
                if not line.startswith('@'):
                    raise ParseError('expected a directive before @data', line_number, path)
                parts = line.split()
                directive = parts[0].lower()
                if directive == '@problemname':
                    if len(parts) < 2:
                        raise ParseError('@problemName requires a value', line_number, path)
                    name = parts[1]
                elif directive == '@dimensions':
                    try:
                        dimensions = int(parts[1])
                    except (IndexError, ValueError):
                        raise ParseError('@dimensions requires an integer', line_number, path)
                    if dimensions < 1:
                        raise ParseError('@dimensions must be >= 1', line_number, path)
                elif directive == '@serieslength':
                    try:
                        series_length = int(parts[1])
                    except (IndexError, ValueError):
                        raise ParseError('@seriesLength requires an integer', line_number, path)
                elif directive == '@classlabel':
                    if len(parts) < 2 or parts[1].lower() not in ('true', 'false'):
                        raise ParseError('@classLabel requires true/false', line_number, path)
                    if parts[1].lower() == 'false':
                        raise ParseError('unlabeled .ts files are not supported', line_number, path)
                    if len(parts) < 3:
                        raise ParseError('@classLabel true requires class values', line_number, path)
                    class_names = tuple(parts[2:])
                elif directive == '@data':
                    if len(parts) != 1:
                        raise ParseError('@data takes no value', line_number, path)
                    if class_names is None:
                        raise ParseError('@classLabel missing before @data', line_number, path)
                    in_data = True
                else:
                    log.warning('%s:%d: ignoring unsupported directive %s', path, line_number, parts[0])
                continue
            tokens = line.split(':')
            label_token = tokens[-1].strip()
            channels = tokens[:-1]
            if dimensions is None:
                dimensions = len(channels)
            if len(channels) != dimensions:
                raise ParseError('found {} channels, @dimensions declares {}'.format(len(channels), dimensions),
                                 line_number, path)
            rows = [[_parse_float(v, line_number, path) for v in c.split(',')] for c in channels]
            if len(set(len(r) for r in rows)) != 1:
                raise ParseError('channels of one series differ in length', line_number, path)
            if series_length is not None and len(rows[0]) != series_length:
                log.warning('%s:%d: series length %d differs from @seriesLength %d',
                            path, line_number, len(rows[0]), series_length)
            if label_token not in class_names:
                raise ParseError('unknown class label {!r}'.format(label_token), line_number, path)
            series.append(TimeSeries(np.array(rows, dtype=np.float64), len(series)))
            labels.append(class_names.index(label_token))
    if not in_data:
        raise ParseError('no @data section', None, path)
    splits = tuple([split] * len(series))
    labels = tuple(labels)
    return Dataset(
        series=tuple(series),
        labels=labels,
        classes=len(class_names),
        split=splits,
        label_mask=default_label_mask(labels, splits),
        class_names=class_names,
        name=name,
    )


def write_ts(d, path):
    """Write a dataset in the `.ts` format understood by parse_ts."""
    names = d.class_names or tuple(str(c) for c in range(d.classes))
    lengths = set(d.lengths)
    lines = ['@problemName {}'.format(d.name or 'dataset'),
             '@timeStamps false',
             '@missing false',
             '@univariate {}'.format('true' if d.channels == 1 else 'false'),
             '@dimensions {}'.format(d.channels),
             '@equalLength {}'.format('true' if len(lengths) == 1 else 'false')]
    if len(lengths) == 1:
        lines.append('@seriesLength {}'.format(lengths.pop()))
    lines.append('@classLabel true {}'.format(' '.join(names)))
    lines.append('@data')
    for s, label in zip(d.series, d.labels):
        if label is None:
            raise ParseError('the .ts format needs a label for every series')
        channels = [','.join(repr(float(v)) for v in row) for row in s.values]
        lines.append('{}:{}'.format(':'.join(channels), names[label]))
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write('\n'.join(lines) + '\n')


def _read_metadata(path):
    """Leading `# key: JSON value` lines of a long CSV, and how many there are."""
    metadata = {}
    count = 0
    try:
        with open(path, 'r', encoding='utf-8') as f:
            for line in f:
                if not line.startswith('#'):
                    break
                count += 1
                key, sep, value = line[1:].partition(':')
                if not sep or key.strip() not in LONG_CSV_METADATA:
                    raise ParseError('bad metadata line {!r}'.format(line.rstrip('\n')), count, path)
                try:
                    metadata[key.strip()] = json.loads(value)
                except ValueError as e:
                    raise ParseError('bad metadata value: {}'.format(e), count, path)
    except (OSError, UnicodeDecodeError) as e:
        raise ParseError('can not read CSV: {}'.format(e), None, path)
    return metadata, count


def parse_long_csv(path):
    """Load `series_id,channel,time_index,value,label,split` rows.

    Every series must fill a dense (channel, time_index) grid. Labels that are
    all integers are used as class indices directly; otherwise distinct label
    strings are numbered in sorted order. Optional `# key: value` lines before
    the header carry the dataset name, the class count and names, and a
    label mask that differs from the default one.
    """
    metadata, skip = _read_metadata(path)
    try:
        frame = pd.read_csv(path, skiprows=skip, dtype={'label': str, 'split': str}, keep_default_na=False)
    except (OSError, ValueError) as e:
        raise ParseError('can not read CSV: {}'.format(e), None, path)
    if list(frame.columns) != LONG_CSV_COLUMNS:
        raise ParseError('header must be {}'.format(','.join(LONG_CSV_COLUMNS)), skip + 1, path)
    try:
        frame['series_id'] = frame['series_id'].astype(np.int64)
        frame['channel'] = frame['channel'].astype(np.int64)
        frame['time_index'] = frame['time_index'].astype(np.int64)
        frame['value'] = frame['value'].astype(np.float64)
    except (ValueError, TypeError) as e:
        raise ParseError('bad column type: {}'.format(e), None, path)
    dup = frame.duplicated(['series_id', 'channel', 'time_index'])
    if dup.any():
        row = frame[dup].iloc[0]
        raise ParseError('duplicate cell (series_id={}, channel={}, time_index={})'.format(
            row.series_id, row.channel, row.time_index), int(frame[dup].index[0]) + skip + 2, path)
    raw_labels = sorted(set(v for v in frame['label'] if v != ''))
    class_names = tuple(metadata.get('class_names', ()))
    if all(v.lstrip('-').isdigit() for v in raw_labels):
        label_of = dict((v, int(v)) for v in raw_labels)
        classes = max([label_of[v] + 1 for v in raw_labels] + [2])
    elif class_names:
        unknown = [v for v in raw_labels if v not in class_names]
        if unknown:
            raise ParseError('label {!r} is not among the declared class names'.format(unknown[0]), None, path)
        label_of = dict((v, class_names.index(v)) for v in raw_labels)
        classes = len(class_names)
    else:
        label_of = dict((v, i) for i, v in enumerate(raw_labels))
        classes = max(len(raw_labels), 2)
        class_names = tuple(raw_labels)
    if 'classes' in metadata:
        declared = metadata['classes']
        if not isinstance(declared, int) or declared < classes:
            raise ParseError('declared class count {!r} does not cover the labels'.format(declared), None, path)
        classes = declared
    if class_names and len(class_names) != classes:
        raise ParseError('{} class names for {} classes'.format(len(class_names), classes), None, path)

    series, labels, splits = [], [], []
    for sid, group in frame.groupby('series_id', sort=False):
        if group['channel'].min() < 0 or group['time_index'].min() < 0:
            raise ParseError('negative index in series_id={}'.format(sid), None, path)
        if not np.all(np.isfinite(group['value'].to_numpy())):
            raise ParseError('non-finite value in series_id={}'.format(sid), None, path)
        channels = int(group['channel'].max()) + 1
        length = int(group['time_index'].max()) + 1
        filled = np.zeros((channels, length), dtype=bool)
        filled[group['channel'].to_numpy(), group['time_index'].to_numpy()] = True
        if not filled.all():
            c, t = np.argwhere(~filled)[0]
            raise ParseError('missing cell (series_id={}, channel={}, time_index={})'.format(sid, c, t),
                             None, path)
        grid = np.empty((channels, length))
        grid[group['channel'].to_numpy(), group['time_index'].to_numpy()] = group['value'].to_numpy()
        label_values = set(group['label'])
        split_values = set(group['split'])
        if len(label_values) != 1 or len(split_values) != 1:
            raise ParseError('series_id={} mixes labels or splits'.format(sid), None, path)
        label = label_values.pop()
        series.append(TimeSeries(grid, int(sid)))
        labels.append(label_of[label] if label != '' else None)
        splits.append(split_values.pop())
    labels = tuple(labels)
    splits = tuple(splits)
    mask = default_label_mask(labels, splits)
    if 'label_mask' in metadata:
        bits = metadata['label_mask']
        if not isinstance(bits, str) or len(bits) != len(series) or set(bits) - set('01'):
            raise ParseError('label_mask must hold one 0/1 digit per series', None, path)
        mask = tuple(b == '1' for b in bits)
    return Dataset(
        series=tuple(series),
        labels=labels,
        classes=classes,
        split=splits,
        label_mask=mask,
        class_names=class_names,
        name=str(metadata.get('name', '')),
    )


def serialize_long_csv(d, path):
    """Write `d` in the long CSV layout; values, class count, names and label mask round-trip exactly."""
    frames = []
    for s, label, tag in zip(d.series, d.labels, d.split):
        channel, time_index = np.meshgrid(np.arange(s.channels), np.arange(s.length), indexing='ij')
        frames.append(pd.DataFrame({
            'series_id': s.series_id,
            'channel': channel.reshape(-1),
            'time_index': time_index.reshape(-1),
            'value': s.values.reshape(-1),
            'label': '' if label is None else str(label),
            'split': tag,
        }, columns=LONG_CSV_COLUMNS))
    metadata = {'classes': d.classes}
    if d.name:
        metadata['name'] = d.name
    if d.class_names:
        metadata['class_names'] = list(d.class_names)
    if d.label_mask != default_label_mask(d.labels, d.split):
        metadata['label_mask'] = ''.join('1' if m else '0' for m in d.label_mask)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for key in LONG_CSV_METADATA:
            if key in metadata:
                f.write('# {}: {}\n'.format(key, json.dumps(metadata[key])))
        pd.concat(frames, ignore_index=True).to_csv(f, index=False, float_format='%.17g', lineterminator='\n')


def zscore_normalize(d):
    """Per series and channel: subtract the mean, divide by the population std.

    Channels with std below 1e-8 become all zeros.
    """
    out = []
    for s in d.series:
        mu = s.values.mean(axis=1, keepdims=True)
        sd = s.values.std(axis=1, keepdims=True)
        centered = s.values - mu
        scaled = np.divide(centered, sd, out=np.zeros_like(centered), where=sd >= 1e-8)
        out.append(TimeSeries(scaled, s.series_id))
    return d.with_series(out)


def split_semisupervised(d, fraction, seed):
    """Stratified labeled/unlabeled split of the train series.

    Per class, max(1, round(fraction * class_count)) train series keep their
    label (rounding half up). Train series without a label are always in the
    unlabeled set.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError('fraction must lie in (0, 1], got {}'.format(fraction))
    train = d.train_indices()
    by_class = dict((c, []) for c in range(d.classes))
    unlabeled = []
    for i in train:
        if d.labels[i] is None:
            unlabeled.append(i)
        else:
            by_class[d.labels[i]].append(i)
    generator = rng(seed, 17)
    labeled = []
    for c in range(d.classes):
        members = by_class[c]
        if not members:
            raise LabelError('class {} has no labeled series in the train split'.format(c))
        k = max(1, int(math.floor(fraction * len(members) + 0.5)))
        k = min(k, len(members))
        chosen = generator.permutation(len(members))[:k]
        picked = set(members[j] for j in chosen)
        labeled.extend(picked)
        unlabeled.extend(i for i in members if i not in picked)
    return SemiSplit(tuple(sorted(labeled)), tuple(sorted(unlabeled)), fraction)


def apply_split(d, split):
    """Dataset whose label_mask exposes only the labeled indices of `split`."""
    labeled = set(split.labeled_indices)
    return d.with_label_mask([i in labeled for i in range(len(d))])
