import unittest

import numpy as np

from csdpmamba import numerics as nx
from csdpmamba.optim import OptimState, adam_step, plateau_update


class AdamTestCase(unittest.TestCase):
    def setUp(self):
        self.params = nx.ParamSet()
        self.x = self.params.add('x', np.array([1.0]))

    def test_zero_gradient(self):
        state = OptimState(self.params, lr=0.1)
        adam_step(self.params, {'x': np.zeros(1)}, state)
        self.assertEqual(self.x.data.tolist(), [1.0])
        self.assertEqual(state.step, 1)

    def test_first_step(self):
        state = OptimState(self.params, lr=0.1)
        adam_step(self.params, {'x': np.array([0.5])}, state)
        # bias correction makes the first update lr * g / |g|
        self.assertAlmostEqual(self.x.data[0], 0.9, places=6)

    def test_two_steps_descend_on_square(self):
        state = OptimState(self.params, lr=0.1)
        trace = [self.x.data[0]]
        for _ in range(2):
            adam_step(self.params, {'x': 2.0 * self.x.data}, state)
            trace.append(self.x.data[0])
        self.assertTrue(trace[0] > trace[1] > trace[2] > 0.0)

    def test_zero_learning_rate_is_identity(self):
        state = OptimState(self.params, lr=0.1)
        adam_step(self.params, {'x': np.array([3.0])}, state, lr=0.0)
        self.assertEqual(self.x.data.tolist(), [1.0])


class PlateauTestCase(unittest.TestCase):
    def setUp(self):
        self.state = OptimState({}, lr=1e-3)

    def test_improving(self):
        for metric in (5.0, 4.0, 3.0, 2.0):
            self.assertEqual(plateau_update(self.state, metric, 0.5, 2), 1e-3)

    def test_flat(self):
        lrs = [plateau_update(self.state, 1.0, 0.5, 2) for _ in range(3)]
        self.assertEqual(lrs, [1e-3, 1e-3, 5e-4])
        self.assertEqual(self.state.bad_epochs, 0)

    def test_improvement_below_threshold_counts_as_flat(self):
        plateau_update(self.state, 1.0, 0.5, 1)
        self.assertEqual(plateau_update(self.state, 1.0 - 1e-7, 0.5, 1), 5e-4)

    def test_floor(self):
        state = OptimState({}, lr=1.5e-6, lr_floor=1e-6)
        for _ in range(20):
            lr = plateau_update(state, 1.0, 0.5, 1)
        self.assertEqual(lr, 1e-6)

    def test_arguments(self):
        with self.assertRaises(ValueError):
            plateau_update(self.state, 1.0, 1.0, 2)
        with self.assertRaises(ValueError):
            plateau_update(self.state, 1.0, 0.5, 0)
