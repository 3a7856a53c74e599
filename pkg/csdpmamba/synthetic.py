#!/usr/bin/env python

"""Synthetic labeled datasets for smoke runs and end-to-end checks."""

import numpy as np

from csdpmamba.data import Dataset, TEST, TRAIN, TimeSeries, default_label_mask
from csdpmamba.utils import rng


def _dataset(values, labels, split, classes, name):
    series = tuple(TimeSeries(v, i) for i, v in enumerate(values))
    labels = tuple(int(c) for c in labels)
    split = tuple(split)
    return Dataset(series=series, labels=labels, classes=classes, split=split,
                   label_mask=default_label_mask(labels, split),
                   class_names=tuple('class{}'.format(c) for c in range(classes)), name=name)


def make_sinusoids(n_train=60, n_test=60, classes=3, channels=2, length=128, noise=0.3, seed=0):
    """Class c is a sinusoid of 2 * (c + 1) cycles per series plus Gaussian noise.

    Each series draws its own phase per channel; classes are balanced in both
    splits and train series come first.
    """
    generator = rng(seed, 11)
    t = np.arange(length) / float(length)
    values, labels, split = [], [], []
    for tag, count in ((TRAIN, n_train), (TEST, n_test)):
        for i in range(count):
            c = i % classes
            phase = generator.uniform(0.0, 2.0 * np.pi, size=(channels, 1))
            clean = np.sin(2.0 * np.pi * 2 * (c + 1) * t[None, :] + phase)
            values.append(clean + generator.normal(0.0, noise, size=(channels, length)))
            labels.append(c)
            split.append(tag)
    return _dataset(values, labels, split, classes, 'sinusoids')


def make_toy(n=12, classes=2, length=64, noise=0.05, seed=0):
    """n train-only series in `classes` well separated groups.

    Group c is a ramp of slope (-1)^c * (1 + c // 2) with a small amount of noise.
    """
    generator = rng(seed, 13)
    t = np.linspace(-1.0, 1.0, length)
    values, labels = [], []
    for i in range(n):
        c = i % classes
        slope = (-1.0) ** c * (1 + c // 2)
        values.append((slope * t + generator.normal(0.0, noise, size=length))[None, :])
        labels.append(c)
    return _dataset(values, labels, [TRAIN] * n, classes, 'toy')
