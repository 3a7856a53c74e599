import os
import shutil
import tempfile
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from csdpmamba import synthetic
from csdpmamba.data import (Dataset, TEST, TRAIN, TimeSeries, apply_split, default_label_mask, merge,
                            parse_long_csv, parse_ts, serialize_long_csv, split_semisupervised, write_ts,
                            zscore_normalize)
from csdpmamba.errors import ConfigError, LabelError, ParseError


TWO_LINE_TS = """# comment
@problemName Tiny
@timeStamps false
@dimensions 2
@seriesLength 3
@classLabel true a b
@data
1,2,3:4,5,6:a
7,8,9:1,1,1:b
"""


def _dataset(rows, labels=None, split=None):
    labels = tuple(labels or [0, 1] + [None] * (len(rows) - 2))
    split = tuple(split or [TRAIN] * len(rows))
    series = tuple(TimeSeries(np.asarray(r, dtype=np.float64), i) for i, r in enumerate(rows))
    return Dataset(series=series, labels=labels, classes=2, split=split,
                   label_mask=default_label_mask(labels, split))


class DataFilesTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def write(self, name, text):
        path = os.path.join(self.tmp, name)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text)
        return path


class ParseTsTestCase(DataFilesTestCase):
    def test_minimal(self):
        with self.assertLogs('csdpmamba', 'WARNING') as logs:
            d = parse_ts(self.write('tiny.ts', TWO_LINE_TS), TEST)
        self.assertTrue(any('@timeStamps' in line for line in logs.output))
        self.assertEqual((len(d), d.channels, d.classes), (2, 2, 2))
        self.assertEqual(d.labels, (0, 1))
        self.assertEqual(d.split, (TEST, TEST))
        self.assertEqual(d.class_names, ('a', 'b'))
        self.assertEqual(d.name, 'Tiny')
        assert_array_equal(d.series[0].values, [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])

    def test_channel_count_mismatch(self):
        text = TWO_LINE_TS.replace('7,8,9:1,1,1:b', '7,8,9:1,1,1:2,2,2:b')
        with self.assertRaises(ParseError) as ctx:
            parse_ts(self.write('bad.ts', text))
        self.assertEqual(ctx.exception.line_number, 9)

    def test_unknown_label(self):
        with self.assertRaises(ParseError):
            parse_ts(self.write('bad.ts', TWO_LINE_TS.replace(':b\n', ':c\n')))

    def test_malformed_header(self):
        with self.assertRaises(ParseError) as ctx:
            parse_ts(self.write('bad.ts', TWO_LINE_TS.replace('@dimensions 2', '@dimensions two')))
        self.assertEqual(ctx.exception.line_number, 4)

    def test_write_round_trip(self):
        d = synthetic.make_sinusoids(n_train=3, n_test=0, length=16)
        path = os.path.join(self.tmp, 'out.ts')
        write_ts(d, path)
        back = parse_ts(path)
        self.assertEqual(back.labels, d.labels)
        for a, b in zip(d.series, back.series):
            assert_array_equal(a.values, b.values)

    def test_merge(self):
        path = self.write('tiny.ts', TWO_LINE_TS)
        d = merge(parse_ts(path, TRAIN), parse_ts(path, TEST))
        self.assertEqual(d.split, (TRAIN, TRAIN, TEST, TEST))
        self.assertEqual(d.label_mask, (True, True, False, False))
        self.assertEqual([s.series_id for s in d.series], [0, 1, 2, 3])


class LongCsvTestCase(DataFilesTestCase):
    HEADER = 'series_id,channel,time_index,value,label,split\n'

    def test_minimal(self):
        rows = ['0,0,0,1,0,train', '0,0,1,2,0,train', '0,0,2,3,0,train', '1,0,0,5,,train']
        d = parse_long_csv(self.write('d.csv', self.HEADER + '\n'.join(rows) + '\n'))
        self.assertEqual((d.series[0].channels, d.series[0].length), (1, 3))
        self.assertEqual(d.series[0].values.tolist(), [[1.0, 2.0, 3.0]])
        self.assertEqual(d.labels, (0, None))

    def test_variable_lengths(self):
        rows = ['0,0,{},{},0,train'.format(t, t) for t in range(3)] + \
               ['1,0,{},{},1,test'.format(t, t) for t in range(5)]
        d = parse_long_csv(self.write('d.csv', self.HEADER + '\n'.join(rows) + '\n'))
        self.assertEqual(d.lengths, [3, 5])
        self.assertEqual(d.split, (TRAIN, TEST))

    def test_gap(self):
        rows = ['0,0,0,1,0,train', '0,0,2,3,0,train', '1,0,0,5,1,train']
        with self.assertRaises(ParseError) as ctx:
            parse_long_csv(self.write('d.csv', self.HEADER + '\n'.join(rows) + '\n'))
        self.assertIn('series_id=0, channel=0, time_index=1', str(ctx.exception))

    def test_duplicate(self):
        rows = ['0,0,0,1,0,train', '0,0,0,2,0,train', '1,0,0,5,1,train']
        with self.assertRaises(ParseError) as ctx:
            parse_long_csv(self.write('d.csv', self.HEADER + '\n'.join(rows) + '\n'))
        self.assertIn('duplicate', str(ctx.exception))

    def test_header(self):
        with self.assertRaises(ParseError):
            parse_long_csv(self.write('d.csv', 'a,b\n1,2\n'))

    def test_round_trip(self):
        d = synthetic.make_sinusoids(n_train=6, n_test=3, length=16, seed=4)
        d = d.with_label_mask([True] * len(d))
        path = os.path.join(self.tmp, 'd.csv')
        serialize_long_csv(d, path)
        back = parse_long_csv(path)
        self.assertEqual(back.labels, d.labels)
        self.assertEqual(back.split, d.split)
        self.assertEqual(back.classes, d.classes)
        self.assertEqual(back.label_mask, d.label_mask)
        self.assertEqual(back.class_names, d.class_names)
        self.assertEqual(back.name, d.name)
        for a, b in zip(d.series, back.series):
            self.assertEqual(a.series_id, b.series_id)
            assert_array_equal(a.values, b.values)

    def test_round_trip_absent_class(self):
        labels = (0, 1, None, 1, 0)
        split = (TRAIN, TRAIN, TRAIN, TEST, TEST)
        series = tuple(TimeSeries(np.arange(4.0)[None] * (i + 1), 10 + i) for i in range(5))
        d = Dataset(series=series, labels=labels, classes=3, split=split,
                    label_mask=(True, False, False, False, False), class_names=('low', 'mid', 'high'), name='toy')
        path = os.path.join(self.tmp, 'd.csv')
        serialize_long_csv(d, path)
        back = parse_long_csv(path)
        self.assertEqual(back.classes, 3)
        self.assertEqual(back.labels, labels)
        self.assertEqual(back.split, split)
        self.assertEqual(back.label_mask, d.label_mask)
        self.assertEqual(back.class_names, ('low', 'mid', 'high'))
        self.assertEqual(back.name, 'toy')
        self.assertEqual([s.series_id for s in back.series], [10, 11, 12, 13, 14])

    def test_metadata_lines(self):
        rows = ['0,0,0,1,b,train', '1,0,0,2,,train', '1,0,1,3,,train']
        d = parse_long_csv(self.write('d.csv', '# classes: 3\n# class_names: ["a", "b", "c"]\n' +
                                      self.HEADER + '\n'.join(rows) + '\n'))
        self.assertEqual((d.classes, d.labels, d.class_names), (3, (1, None), ('a', 'b', 'c')))
        self.assertEqual(d.lengths, [1, 2])
        with self.assertRaises(ParseError) as ctx:
            parse_long_csv(self.write('e.csv', '# colour: 1\n' + self.HEADER + '\n'.join(rows) + '\n'))
        self.assertEqual(ctx.exception.line_number, 1)
        with self.assertRaises(ParseError) as ctx:
            parse_long_csv(self.write('f.csv', '# classes: 3\na,b\n1,2\n'))
        self.assertEqual(ctx.exception.line_number, 2)
        with self.assertRaises(ParseError):
            parse_long_csv(self.write('g.csv', '# classes: 1\n' + self.HEADER + '\n'.join(rows) + '\n'))


class NormalizeTestCase(unittest.TestCase):
    def test_values(self):
        d = zscore_normalize(_dataset([[[1.0, 2.0, 3.0]], [[5.0, 5.0, 5.0]]]))
        assert_allclose(d.series[0].values[0], [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-12)
        self.assertEqual(d.series[1].values.tolist(), [[0.0, 0.0, 0.0]])

    def test_idempotent(self):
        d = zscore_normalize(synthetic.make_sinusoids(n_train=4, n_test=2, length=32))
        again = zscore_normalize(d)
        for a, b in zip(d.series, again.series):
            assert_allclose(a.values, b.values, atol=1e-10)


class SplitTestCase(unittest.TestCase):
    def setUp(self):
        self.d = synthetic.make_sinusoids(n_train=60, n_test=6, length=16)

    def test_full(self):
        split = split_semisupervised(self.d, 1.0, 0)
        self.assertEqual(list(split.labeled_indices), self.d.train_indices())
        self.assertEqual(split.unlabeled_indices, ())

    def test_ten_percent(self):
        split = split_semisupervised(self.d, 0.1, 0)
        counts = np.bincount([self.d.labels[i] for i in split.labeled_indices], minlength=3)
        self.assertEqual(counts.tolist(), [2, 2, 2])

    def test_floor_of_one(self):
        d = synthetic.make_sinusoids(n_train=15, n_test=3, length=16)
        split = split_semisupervised(d, 0.05, 1)
        self.assertEqual(np.bincount([d.labels[i] for i in split.labeled_indices]).tolist(), [1, 1, 1])

    def test_properties(self):
        a = split_semisupervised(self.d, 0.1, 5)
        b = split_semisupervised(self.d, 0.1, 5)
        self.assertEqual(a, b)
        labeled, unlabeled = set(a.labeled_indices), set(a.unlabeled_indices)
        self.assertFalse(labeled & unlabeled)
        self.assertEqual(labeled | unlabeled, set(self.d.train_indices()))

    def test_apply(self):
        split = split_semisupervised(self.d, 0.1, 0)
        d = apply_split(self.d, split)
        self.assertEqual([i for i, m in enumerate(d.label_mask) if m], list(split.labeled_indices))
        self.assertEqual(d.labels, self.d.labels)

    def test_absent_class(self):
        d = _dataset([[[1.0]], [[2.0]], [[3.0]]], labels=[0, 0, 1], split=[TRAIN, TRAIN, TEST])
        with self.assertRaises(LabelError):
            split_semisupervised(d, 0.5, 0)

    def test_fraction_range(self):
        with self.assertRaises(ConfigError):
            split_semisupervised(self.d, 0.0, 0)


class DatasetTestCase(unittest.TestCase):
    def test_invariants(self):
        with self.assertRaises(ParseError):
            _dataset([[[1.0]]], labels=[0])
        with self.assertRaises(ParseError):
            _dataset([[[1.0]], [[1.0, 2.0], [3.0, 4.0]]])
        with self.assertRaises(ParseError):
            _dataset([[[1.0]], [[np.nan]]])
        with self.assertRaises(ParseError):
            _dataset([[[1.0]], [[2.0]]], labels=[0, 2])

    def test_subset(self):
        d = synthetic.make_sinusoids(n_train=3, n_test=3, length=16)
        sub = d.subset([5, 0])
        self.assertEqual(sub.split, (TEST, TRAIN))
        self.assertIs(sub.series[0], d.series[5])
