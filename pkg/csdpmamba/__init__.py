#!/usr/bin/env python

__all__ = [
    'Pipeline',
    'TrainConfig',
]

from csdpmamba.config import TrainConfig
from csdpmamba.pipeline import Pipeline

from csdpmamba._version import get_versions
__version__ = get_versions()['version']
del get_versions
