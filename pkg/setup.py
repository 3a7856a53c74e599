#!/usr/bin/env python

from setuptools import setup

from csdpmamba._version import get_versions

setup(name='csdpmamba',
    version=get_versions()['version'],
    description="Contrastive similarity-graph classifier for multivariate time series",
    classifiers=[
        "Operating System :: POSIX",
        "Environment :: Console",
        "Programming Language :: Python",
        "Programming Language :: Python :: 3",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Topic :: Software Development :: Libraries :: Python Modules",
    ],
    keywords='time series classification contrastive dtw state space graph',
    license='Apache2',
    packages=['csdpmamba', 'csdpmamba.tests'],
    python_requires='>=3.8',
    install_requires=[
        'numpy>=1.22',
        'scipy>=1.8',
        'scikit-learn>=1.1',
        'pandas>=1.5',
        'numba>=0.56',
    ],
    entry_points={'console_scripts': ['csdpmamba=csdpmamba.cli:run']},
    scripts=['bin/csdpmamba_client.py'],
)
