import dataclasses
import os
import shutil
import tempfile
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from csdpmamba import simgraph
from csdpmamba import synthetic
from csdpmamba import temcl
from csdpmamba import trainer
from csdpmamba.config import TrainConfig
from csdpmamba.data import TRAIN, apply_split, split_semisupervised
from csdpmamba.errors import ConfigError, GradCheckError, LabelError, NumericError


SLOW = os.environ.get('CSDP_SLOW_TESTS') == '1'


def small_config(**changes):
    values = dict(d_target=8, encoder_channels=(4, 8), ssm_state=4, kan_grid=4, pretrain_epochs=2, epochs=3,
                  topk=3, seed=0)
    values.update(changes)
    return TrainConfig(**values).validate()


class GradientBatteryTestCase(unittest.TestCase):
    def test_battery(self):
        results = trainer.gradcheck_battery(0)
        self.assertEqual(list(results), ['contrastive_loss', 'scan', 'kan_apply', 'kangin_nll',
                                         'dpmamba_kangin_nll'])
        for name, error in results.items():
            self.assertLessEqual(error, trainer.GRADCHECK_TOLERANCE, name)
        self.assertIs(trainer.check_gradients(results), results)

    def test_failure(self):
        with self.assertRaises(GradCheckError):
            trainer.check_gradients({'scan': 1e-6, 'kan_apply': 1e-3})
        with self.assertRaises(GradCheckError):
            trainer.check_gradients({'scan': float('nan')})


class NearestNeighborTestCase(unittest.TestCase):
    def test_duplicates(self):
        matrix = np.ones((4, 4))
        np.fill_diagonal(matrix, 0.0)
        matrix[0, 2] = matrix[2, 0] = 0.0
        matrix[1, 3] = matrix[3, 1] = 0.0
        pred = trainer.nearest_neighbor_predict(matrix, [0, 1, 0, 1], [True, True, False, False])
        self.assertEqual(pred[2:].tolist(), [0, 1])

    def test_sentinels(self):
        matrix = np.array([[0.0, -1.0, 5.0], [-1.0, 0.0, -1.0], [5.0, -1.0, 0.0]])
        pred = trainer.nearest_neighbor_predict(matrix, [1, 0, 1], [True, True, False])
        # nodes 0 and 1 have no eligible neighbor and fall back to the most frequent train class
        self.assertEqual(pred.tolist(), [0, 0, 1])

    def test_no_labels(self):
        with self.assertRaises(LabelError):
            trainer.nearest_neighbor_predict(np.zeros((2, 2)), [0, 1], [False, False])


class TrainTestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.d = synthetic.make_sinusoids(n_train=9, n_test=9, length=32)
        cls.cfg = small_config()
        cls.enc, _ = temcl.pretrain(cls.d, cls.cfg, 0)
        cls.similarity = trainer.build_similarity(cls.d, cls.enc, cls.cfg)

    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def train(self, d=None, graph=None, **changes):
        cfg = self.cfg.replace(**changes) if changes else self.cfg
        return trainer.train(d or self.d, graph or self.similarity.graph, self.enc, cfg)

    def test_similarity(self):
        self.assertEqual(self.similarity.matrix.shape, (18, 18))
        self.assertEqual(len(self.similarity.reps), 18)
        self.assertEqual(self.similarity.graph.n, 18)
        simgraph.check_distance_matrix(self.similarity.matrix)

    def test_deterministic(self):
        m1, metrics1 = self.train()
        m2, metrics2 = self.train()
        self.assertEqual(metrics1.epoch_losses, metrics2.epoch_losses)
        self.assertEqual(len(metrics1.epoch_losses), 3)
        for name, value in m1.trainable.arrays().items():
            assert_array_equal(m2.trainable.arrays()[name], value)

    def test_encoder_is_frozen(self):
        before = self.enc.arrays()
        m, _ = self.train()
        for name, value in self.enc.arrays().items():
            assert_array_equal(value, before[name])
        self.assertFalse(any(name.startswith('temcl') for name in m.trainable))
        self.assertTrue(any(name.startswith('dpmamba') for name in m.trainable))
        self.assertTrue(any(name.startswith('kangin.layer2') for name in m.trainable))

    def test_unlabeled_targets_are_ignored(self):
        split = split_semisupervised(self.d, 0.5, 0)
        masked = apply_split(self.d, split)
        relabeled = list(masked.labels)
        for i in split.unlabeled_indices:
            relabeled[i] = (relabeled[i] + 1) % masked.classes
        other = dataclasses.replace(masked, labels=tuple(relabeled))
        m1, metrics1 = self.train(masked, label_fraction=0.5)
        m2, metrics2 = self.train(other, label_fraction=0.5)
        self.assertEqual(metrics1.epoch_losses, metrics2.epoch_losses)
        for name, value in m1.trainable.arrays().items():
            assert_array_equal(m2.trainable.arrays()[name], value)
        self.assertEqual(metrics1.label_fraction, 0.5)

    def test_permutation_keeps_accuracy_exact_and_losses_within_1e12(self):
        m = trainer.ModelParams(self.cfg, self.d.channels, self.d.classes, self.enc)
        inputs = m.node_inputs(self.d)
        perm = np.random.default_rng(3).permutation(len(self.d))
        g = self.similarity.graph
        permuted_graph = simgraph.row_normalize(g.adjacency[perm][:, perm], g.alpha, g.topk)
        fitted, metrics = trainer.train(self.d, g, self.enc, self.cfg, inputs=inputs)
        fitted_permuted, permuted = trainer.train(self.d.subset(perm), permuted_graph, self.enc, self.cfg,
                                                  inputs=inputs.take(perm))
        assert_allclose(permuted.epoch_losses, metrics.epoch_losses, rtol=1e-12)
        self.assertEqual(permuted.train_accuracy, metrics.train_accuracy)
        trainer.evaluate(fitted, self.d, g, inputs, metrics=metrics)
        trainer.evaluate(fitted_permuted, self.d.subset(perm), permuted_graph, inputs.take(perm), metrics=permuted)
        self.assertEqual(permuted.test_accuracy, metrics.test_accuracy)
        self.assertEqual(permuted.confusion, metrics.confusion)

    def test_only_dpmamba_learns(self):
        m, metrics = trainer.train(self.d, None, self.enc, self.cfg.replace(mode=trainer.ONLY_DPMAMBA, epochs=30,
                                                                            lr=1e-2))
        self.assertFalse(m.uses_graph())
        self.assertLess(np.mean(metrics.epoch_losses[-3:]), np.mean(metrics.epoch_losses[:3]))

    def test_evaluate(self):
        m, metrics = self.train()
        trainer.evaluate(m, self.d, self.similarity.graph, metrics=metrics)
        self.assertTrue(0.0 <= metrics.test_accuracy <= 1.0)
        self.assertEqual(np.array(metrics.confusion).sum(), 9)
        self.assertEqual(len(metrics.per_class_accuracy), 3)
        summary = metrics.summary()
        self.assertNotIn('wall_time', summary)
        self.assertIn('wall_time', metrics.summary(timing=True))

    def test_label_errors(self):
        hidden = self.d.with_label_mask([False] * len(self.d))
        with self.assertRaises(LabelError):
            self.train(hidden)
        m, _ = self.train()
        train_only = self.d.subset(self.d.train_indices())
        graph = simgraph.batch_subgraph(self.similarity.graph, self.d.train_indices())
        with self.assertRaises(LabelError):
            trainer.evaluate(m, train_only, graph)

    def test_graph_required(self):
        with self.assertRaises(ConfigError):
            trainer.train(self.d, None, self.enc, self.cfg)
        with self.assertRaises(ConfigError):
            trainer.ModelParams(self.cfg.replace(mode=trainer.ONLY_CONTRASTFASTDTW), 2, 3)

    def test_ablate(self):
        frame = trainer.ablate(self.d, self.cfg, self.enc, self.similarity)
        self.assertEqual(frame['mode'].tolist(), [trainer.FULL, trainer.ONLY_DPMAMBA, trainer.ONLY_KANGIN,
                                                  trainer.ONLY_CONTRASTFASTDTW])
        self.assertTrue(frame['test_accuracy'].between(0.0, 1.0).all())
        path = os.path.join(self.tmp, 'ablation.csv')
        trainer.write_table(frame, path)
        self.assertTrue(os.path.getsize(path) > 0)

    def test_sweep(self):
        frame = trainer.label_fraction_sweep(self.d, [0.5, 1.0], self.cfg, self.enc, self.similarity)
        self.assertEqual(frame['labeled'].tolist(), [6, 9])
        self.assertEqual(frame['label_fraction'].tolist(), [0.5, 1.0])
        with self.assertRaises(ConfigError):
            trainer.label_fraction_sweep(self.d, [0.0], self.cfg, self.enc, self.similarity)

    def test_representation_ablation(self):
        frame = trainer.representation_ablation(self.d, self.cfg, self.enc)
        self.assertEqual(frame['representation'].tolist(), ['fastdtw', 'contrast_fastdtw'])

    def test_write_metrics(self):
        _, metrics = self.train()
        paths = [os.path.join(self.tmp, name) for name in ('a.jsonl', 'a.json', 'b.jsonl', 'b.json')]
        trainer.write_metrics(metrics, paths[0], paths[1])
        trainer.write_metrics(metrics, paths[2], paths[3])
        for first, second in ((paths[0], paths[2]), (paths[1], paths[3])):
            with open(first, 'rb') as f, open(second, 'rb') as g:
                self.assertEqual(f.read(), g.read())
        with open(paths[0]) as f:
            self.assertEqual(len(f.readlines()), 3)

    def test_model_checkpoint(self):
        m, _ = self.train()
        path = os.path.join(self.tmp, 'model.ckpt')
        trainer.save_model(path, m, 0)
        loaded = trainer.load_model(path, self.cfg, self.d.channels, self.d.classes, self.enc)
        pred, logp = trainer.predict(m, self.d, self.similarity.graph)
        loaded_pred, loaded_logp = trainer.predict(loaded, self.d, self.similarity.graph)
        assert_array_equal(pred, loaded_pred)
        assert_array_equal(logp, loaded_logp)

    def test_summary_features(self):
        features = trainer.summary_features(self.d)
        self.assertEqual(features.shape, (18, 4))
        assert_allclose(features[0, :2], self.d.series[0].values.mean(axis=1))

    def test_debug_stops_at_first_non_finite_value(self):
        cfg = self.cfg.replace(mode=trainer.ONLY_KANGIN)
        inputs = trainer.NodeInputs(trainer.summary_features(self.d))
        inputs.values[self.d.train_indices()[0], 0] = np.nan
        with self.assertRaises(NumericError) as ctx:
            trainer.train(self.d, self.similarity.graph, None, cfg, inputs=inputs)
        self.assertEqual(ctx.exception.epoch, 0)
        with self.assertRaisesRegex(NumericError, 'produced non-finite values') as ctx:
            trainer.train(self.d, self.similarity.graph, None, cfg.replace(debug=True), inputs=inputs)
        self.assertIsNone(ctx.exception.epoch)

    def test_visible_labels(self):
        self.assertIs(trainer.visible_labels(self.d, self.cfg), self.d)
        d = trainer.visible_labels(self.d, self.cfg.replace(label_fraction=0.5))
        self.assertEqual(len(trainer.visible_train_indices(d)), 6)
        self.assertEqual(d.labels, self.d.labels)
        _, metrics = self.train(d, label_fraction=0.5)
        self.assertEqual((metrics.labeled, metrics.summary()['labeled']), (6, 6))

    def test_only_kangin(self):
        m, metrics = self.train(mode=trainer.ONLY_KANGIN)
        self.assertIsNotNone(m.embed)
        self.assertIsNone(m.ssm)
        self.assertEqual(len(metrics.epoch_losses), 3)


class SampleTestCase(unittest.TestCase):
    def test_small_pool_collapses(self):
        generator = np.random.default_rng(0)
        self.assertEqual(trainer._sample(generator, [5], 3), [5])

    def test_distinct(self):
        picks = trainer._sample(np.random.default_rng(1), list(range(10)), 4)
        self.assertEqual(len(set(picks)), 4)


@unittest.skipUnless(SLOW, 'set CSDP_SLOW_TESTS=1 for end-to-end training runs')
class EndToEndTestCase(unittest.TestCase):
    SEEDS = range(5)

    def run_seed(self, d, cfg, fractions=(1.0,)):
        enc, _ = temcl.pretrain(d, cfg, cfg.seed)
        similarity = trainer.build_similarity(d, enc, cfg)
        frame = trainer.label_fraction_sweep(d, fractions, cfg, enc, similarity)
        return frame['test_accuracy'].tolist()

    def test_toy_overfit(self):
        d = synthetic.make_toy()
        for seed in self.SEEDS:
            with self.subTest(seed=seed):
                cfg = small_config(pretrain_epochs=20, epochs=500, lr=1e-2, topk=3, seed=seed)
                enc, _ = temcl.pretrain(d, cfg, seed)
                similarity = trainer.build_similarity(d, enc, cfg)
                _, metrics = trainer.train(d, similarity.graph, enc, cfg)
                self.assertEqual(metrics.train_accuracy, 1.0)
        self.assertTrue(all(d.split[i] == TRAIN for i in range(len(d))))

    def test_sinusoids_median_of_seeds(self):
        d = synthetic.make_sinusoids()
        accuracies = []
        for seed in self.SEEDS:
            cfg = small_config(d_target=16, encoder_channels=(8, 16), ssm_state=8, pretrain_epochs=50, epochs=300,
                               seed=seed)
            accuracies.extend(self.run_seed(d, cfg))
        self.assertGreaterEqual(np.median(accuracies), 0.9)

    def test_label_fraction_trend(self):
        d = synthetic.make_sinusoids()
        fractions = (0.05, 0.1, 1.0)
        rows = []
        for seed in self.SEEDS:
            cfg = small_config(d_target=16, encoder_channels=(8, 16), ssm_state=8, pretrain_epochs=50, epochs=300,
                               seed=seed)
            rows.append(self.run_seed(d, cfg, fractions))
        medians = np.median(np.array(rows), axis=0)
        for lower, higher in zip(medians[:-1], medians[1:]):
            self.assertGreaterEqual(higher, lower - 0.05)
