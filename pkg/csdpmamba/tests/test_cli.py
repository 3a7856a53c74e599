import json
import os
import shutil
import tempfile
import unittest

import numpy as np

from csdpmamba import cli
from csdpmamba import simgraph
from csdpmamba import synthetic
from csdpmamba.config import TrainConfig
from csdpmamba.data import write_ts
from csdpmamba.errors import ConfigError, ParseError
from csdpmamba.pipeline import RunManifest, load_dataset


SMALL = {
    'd_target': 8,
    'encoder_channels': [4, 8],
    'ssm_state': 4,
    'kan_grid': 4,
    'pretrain_epochs': 1,
    'epochs': 2,
    'topk': 3,
    'kmeans_restarts': 2,
}


class ArgumentsTestCase(unittest.TestCase):
    def parse(self, *argv):
        return cli.setupArgsParser().parse_args(list(argv))

    def test_epochs_follow_the_command(self):
        self.assertEqual(cli.overrides_from_args(self.parse('pretrain', '--epochs', '3'))['pretrain_epochs'], 3)
        overrides = cli.overrides_from_args(self.parse('train', '--epochs', '3'))
        self.assertEqual(overrides['epochs'], 3)
        self.assertIsNone(overrides['pretrain_epochs'])

    def test_switches(self):
        overrides = cli.overrides_from_args(self.parse('simmatrix', '--raw', '--no-normalize', '--inverse-weights'))
        self.assertEqual((overrides['raw_matrix'], overrides['normalize'], overrides['inverse_weights']),
                         (True, False, True))
        overrides = cli.overrides_from_args(self.parse('simmatrix'))
        self.assertIsNone(overrides['raw_matrix'])
        self.assertIsNone(overrides['normalize'])
        self.assertIsNone(overrides['debug'])

    def test_debug_reaches_the_config(self):
        overrides = cli.overrides_from_args(self.parse('train', '--debug'))
        self.assertTrue(TrainConfig.load(None, overrides).debug)
        self.assertFalse(TrainConfig.load(None, cli.overrides_from_args(self.parse('train'))).debug)

    def test_fractions(self):
        self.assertEqual(cli.parse_fractions(cli.DEFAULT_FRACTIONS), [0.05, 0.1, 1.0])
        with self.assertRaises(ConfigError):
            cli.parse_fractions('0.1,half')

    def test_unknown_command(self):
        with self.assertRaises(SystemExit):
            self.parse('fit')


class MainTestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.data_dir = tempfile.mkdtemp()
        d = synthetic.make_sinusoids(n_train=9, n_test=9, length=32)
        cls.train_path = os.path.join(cls.data_dir, 'Sines_TRAIN.ts')
        cls.test_path = os.path.join(cls.data_dir, 'Sines_TEST.ts')
        write_ts(d.subset(d.train_indices()), cls.train_path)
        write_ts(d.subset(d.test_indices()), cls.test_path)
        cls.config_path = os.path.join(cls.data_dir, 'config.json')
        with open(cls.config_path, 'w') as f:
            json.dump(SMALL, f)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.data_dir)

    def setUp(self):
        self.out_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.out_dir)

    def run_main(self, command, *extra, out_dir=None, test_data=True):
        argv = [command, '--data', self.train_path, '--config', self.config_path,
                '--out-dir', out_dir or self.out_dir]
        if test_data:
            argv += ['--test-data', self.test_path]
        return cli.main(argv + list(extra))

    def out(self, name):
        return os.path.join(self.out_dir, name)

    def test_gradcheck(self):
        self.assertEqual(cli.main(['gradcheck', '--out-dir', self.out_dir]), 0)
        manifest = RunManifest.read(self.out('manifest.json'))
        self.assertEqual((manifest.command, manifest.inputs, manifest.seed), ('gradcheck', [], 0))

    def test_label_fraction_hides_train_labels(self):
        self.assertEqual(self.run_main('train', '--mode', 'only_dpmamba', '--label-fraction', '0.5'), 0)
        with open(self.out('metrics_summary.json')) as f:
            summary = json.load(f)
        self.assertEqual((summary['label_fraction'], summary['labeled']), (0.5, 6))
        self.assertEqual(self.run_main('train', '--mode', 'only_dpmamba', '--label-fraction', '0.1'), 0)
        with open(self.out('metrics_summary.json')) as f:
            self.assertEqual(json.load(f)['labeled'], 3)
        self.assertEqual(self.run_main('train', '--mode', 'only_dpmamba'), 0)
        with open(self.out('metrics_summary.json')) as f:
            self.assertEqual(json.load(f)['labeled'], 9)

    def test_length_one_series(self):
        path = os.path.join(self.out_dir, 'points.csv')
        with open(path, 'w') as f:
            f.write('series_id,channel,time_index,value,label,split\n0,0,0,0.5,0,train\n1,0,0,-0.5,1,train\n')
        self.assertEqual(cli.main(['pretrain', '--data', path, '--config', self.config_path,
                                   '--out-dir', self.out_dir]), 0)
        self.assertTrue(os.path.isfile(self.out('temcl.ckpt')))

    def test_bad_input(self):
        self.assertEqual(cli.main(['train', '--data', os.path.join(self.data_dir, 'absent.ts'),
                                   '--out-dir', self.out_dir]), 2)
        self.assertEqual(cli.main(['train', '--out-dir', self.out_dir]), 2)
        self.assertEqual(self.run_main('sweep', '--fractions', '0.1,half'), 2)
        self.assertEqual(self.run_main('train', '--label-fraction', '0'), 2)

    def test_pretrain(self):
        self.assertEqual(self.run_main('pretrain', '--epochs', '0'), 0)
        for name in ('temcl.ckpt', 'temcl_loss.csv', 'manifest.json', 'stages.db'):
            self.assertTrue(os.path.isfile(self.out(name)), name)
        with open(self.out('manifest.json')) as f:
            manifest = json.load(f)
        self.assertEqual(manifest['command'], 'pretrain')
        self.assertEqual(manifest['config']['pretrain_epochs'], 0)
        self.assertIn('pretrain', manifest['stages'])
        with self.assertLogs('csdpmamba', level='INFO') as logs:
            self.assertEqual(self.run_main('pretrain', '--epochs', '0'), 0)
        self.assertTrue(any('up to date' in line for line in logs.output))

    def test_simmatrix(self):
        self.assertEqual(self.run_main('simmatrix'), 0)
        self.assertEqual(self.run_main('simmatrix', '--raw'), 0)
        learned, meta = simgraph.load_matrix(self.out('matrix.bin'))
        raw, raw_meta = simgraph.load_matrix(self.out('matrix_raw.bin'))
        self.assertEqual(learned.shape, (18, 18))
        self.assertFalse(np.array_equal(learned, raw))
        self.assertEqual((meta['alpha'], meta['topk'], meta['radius'], meta['raw']), (1.0, 3, 1, False))
        self.assertTrue(raw_meta['raw'])
        with open(self.out('heatmap.csv')) as f:
            rows = [line.rstrip('\n').split(',') for line in f]
        self.assertEqual([rows[i][i] for i in range(18)], ['0'] * 18)

    def test_train_without_graph(self):
        self.assertEqual(self.run_main('train', '--mode', 'only_dpmamba'), 0)
        self.assertFalse(os.path.exists(self.out('matrix.bin')))
        for name in ('model.ckpt', 'metrics.jsonl', 'metrics_summary.json'):
            self.assertTrue(os.path.isfile(self.out(name)), name)
        with open(self.out('metrics_summary.json')) as f:
            summary = json.load(f)
        self.assertEqual(summary['mode'], 'only_dpmamba')
        self.assertIsNotNone(summary['test_accuracy'])

    def test_train_then_eval(self):
        self.assertEqual(self.run_main('train'), 0)
        self.assertEqual(self.run_main('eval'), 0)
        self.assertEqual(self.run_main('eval', test_data=False), 2)

    def test_reproducible(self):
        other = tempfile.mkdtemp()
        try:
            self.assertEqual(self.run_main('train'), 0)
            self.assertEqual(self.run_main('train', out_dir=other), 0)
            with open(self.out('metrics_summary.json'), 'rb') as f, \
                    open(os.path.join(other, 'metrics_summary.json'), 'rb') as g:
                self.assertEqual(f.read(), g.read())
        finally:
            shutil.rmtree(other)


class PipelineInputsTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_load_dataset_errors(self):
        with self.assertRaises(ParseError):
            load_dataset(os.path.join(self.tmp, 'absent.ts'))
        path = os.path.join(self.tmp, 'long.csv')
        with open(path, 'w') as f:
            f.write('series_id,channel,time_index,value,label,split\n')
        with self.assertRaises(ParseError):
            load_dataset(path, os.path.join(self.tmp, 'test.ts'))

    def test_manifest_round_trip(self):
        path = os.path.join(self.tmp, 'manifest.json')
        manifest = RunManifest('train', {'epochs': 3}, ['a.ts'], self.tmp, 4)
        manifest.stages['pretrain'] = '2026-01-01T00:00:00+00:00'
        manifest.write(path)
        self.assertEqual(RunManifest.read(path), manifest)
