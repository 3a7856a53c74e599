#!/usr/bin/env python

import collections
import json
import logging
import os
import sqlite3

import numpy as np

from csdpmamba.errors import FormatError


log = logging.getLogger('csdpmamba')
log.addHandler(logging.NullHandler())


CHECKPOINT_MAGIC = 'CSDP1'
CHECKPOINT_VERSION = 1
MATRIX_MAGIC = 'CSDP-MAT1'
_FLOAT = np.dtype('<f8')


def sidecar_path(path):
    return '{}.json'.format(path)


def _read_sidecar(path):
    try:
        with open(sidecar_path(path), 'r', encoding='utf-8') as f:
            return json.load(f)
    except (OSError, ValueError) as e:
        raise FormatError('Can not read manifest for {}: {}'.format(path, e))


def _read_blob(path, count):
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except OSError as e:
        raise FormatError('Can not read {}: {}'.format(path, e))
    if len(raw) != count * _FLOAT.itemsize:
        raise FormatError('{} holds {} bytes, expected {}'.format(path, len(raw), count * _FLOAT.itemsize))
    return np.frombuffer(raw, dtype=_FLOAT).astype(np.float64)


def save_checkpoint(path, arrays, seed=None, extra=None):
    """Write named arrays as a little-endian float64 blob plus a JSON manifest.

    :param path: blob path; the manifest goes to `<path>.json`.
    :param arrays: ordered mapping of parameter name -> array.
    :param seed: RNG seed recorded in the manifest.
    """
    entries = []
    offset = 0
    chunks = []
    for name, value in arrays.items():
        value = np.asarray(value, dtype=_FLOAT, order='C')
        entries.append({'name': name, 'shape': list(value.shape), 'offset': offset})
        offset += value.nbytes
        chunks.append(value.tobytes())
    manifest = {
        'magic': CHECKPOINT_MAGIC,
        'format_version': CHECKPOINT_VERSION,
        'seed': seed,
        'params': entries,
        'extra': extra or {},
    }
    with open(path, 'wb') as f:
        f.write(b''.join(chunks))
    with open(sidecar_path(path), 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    log.info('Saved checkpoint %s (%d tensors)', path, len(entries))


def load_checkpoint(path, expected_shapes=None):
    """Read a checkpoint written by save_checkpoint.

    Returns (ordered dict of arrays, manifest). When `expected_shapes` is given
    every listed name must be present with exactly that shape.
    """
    manifest = _read_sidecar(path)
    if manifest.get('magic') != CHECKPOINT_MAGIC:
        raise FormatError('{} is not a checkpoint (magic {!r})'.format(path, manifest.get('magic')))
    if manifest.get('format_version') != CHECKPOINT_VERSION:
        raise FormatError('{} has unsupported format version {}'.format(path, manifest.get('format_version')))
    count = sum(int(np.prod(e['shape'], dtype=np.int64)) for e in manifest['params'])
    flat = _read_blob(path, count)
    arrays = collections.OrderedDict()
    for e in manifest['params']:
        start = e['offset'] // _FLOAT.itemsize
        n = int(np.prod(e['shape'], dtype=np.int64))
        arrays[e['name']] = flat[start:start + n].reshape(e['shape'])
    for name, shape in (expected_shapes or {}).items():
        if name not in arrays:
            raise FormatError('{} lacks parameter {}'.format(path, name))
        if tuple(arrays[name].shape) != tuple(shape):
            raise FormatError('{}: parameter {} has shape {}, expected {}'.format(
                path, name, arrays[name].shape, tuple(shape)))
    log.info('Loaded checkpoint %s', path)
    return arrays, manifest


def save_matrix_file(path, matrix, meta):
    """Persist a square matrix row-major with a `CSDP-MAT1` sidecar."""
    matrix = np.ascontiguousarray(matrix, dtype=_FLOAT)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise FormatError('matrix must be square, got {}'.format(matrix.shape))
    sidecar = dict(meta)
    sidecar.update({'magic': MATRIX_MAGIC, 'n': int(matrix.shape[0])})
    with open(path, 'wb') as f:
        f.write(matrix.tobytes())
    with open(sidecar_path(path), 'w', encoding='utf-8') as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)


def load_matrix_file(path):
    meta = _read_sidecar(path)
    if meta.get('magic') != MATRIX_MAGIC:
        raise FormatError('{} is not a matrix file (magic {!r})'.format(path, meta.get('magic')))
    n = int(meta['n'])
    return _read_blob(path, n * n).reshape(n, n), meta


class StageRegistry(object):
    """SQLite index of completed pipeline stages, keyed by content hash.

    The table layout is stamped into `PRAGMA user_version`. A registry with
    another stamp only caches stage results, so its table is rebuilt empty
    and every stage runs again.
    """

    SCHEMA_VERSION = 2

    def __init__(self, db_path, timeout=10):
        """Constructor.

        Args:
            db_path: string, SQLite file of the registry, created when missing.
            timeout: seconds to wait while another run holds the lock.
        """
        self.db_path = db_path
        log.debug('Opening stage registry %s', db_path)
        self.db = sqlite3.connect(db_path, timeout)
        found = self.schema_version()
        if found != self.SCHEMA_VERSION:
            if found:
                log.warning('Stage registry %s has layout %d, expected %d; forgetting its stages',
                            db_path, found, self.SCHEMA_VERSION)
            self.create_tables()

    def schema_version(self):
        return self.db.execute('PRAGMA user_version').fetchone()[0]

    def create_tables(self):
        self.db.executescript(
            """DROP TABLE IF EXISTS metadata;
            DROP TABLE IF EXISTS stage;
            CREATE TABLE stage (
                name text NOT NULL,
                digest character(64) NOT NULL,
                artifact text NOT NULL,
                created_at timestamp DEFAULT current_timestamp,
                PRIMARY KEY (name, digest)
            );
            PRAGMA user_version = {:d};""".format(self.SCHEMA_VERSION)
        )
        self.db.commit()

    def lookup(self, name, digest):
        """Artifact path of a completed stage, or None when absent or deleted."""
        row = self.db.execute('SELECT artifact FROM stage WHERE name=? AND digest=?', (name, digest)).fetchone()
        if row is None:
            return None
        if not os.path.exists(row[0]):
            log.info('Artifact %s of stage %s disappeared, recomputing', row[0], name)
            return None
        return row[0]

    def register(self, name, digest, artifact):
        self.db.execute('INSERT OR REPLACE INTO stage (name, digest, artifact) VALUES (?, ?, ?)',
                        (name, digest, artifact))

    def forget(self, name):
        self.db.execute('DELETE FROM stage WHERE name=?', (name,))

    def rollback(self):
        log.info('Rolling back stage registry transaction.')
        self.db.rollback()

    def commit(self):
        self.db.commit()

    def close(self):
        self.db.close()
