import binascii
import hashlib
import json

import numpy as np


def to_hex(v):
    return binascii.hexlify(v).decode('ascii')


def content_hash(*parts):
    """SHA256 over a sequence of arrays, bytes, strings and JSON-able values."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, np.ndarray):
            h.update(str(part.shape).encode())
            h.update(np.ascontiguousarray(part, dtype='<f8').tobytes())
        elif isinstance(part, bytes):
            h.update(part)
        elif isinstance(part, str):
            h.update(part.encode('utf-8'))
        else:
            h.update(json.dumps(part, sort_keys=True).encode('utf-8'))
        h.update(b'\x00')
    return to_hex(h.digest())


def file_hash(path):
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            h.update(chunk)
    return to_hex(h.digest())


def rng(seed, *salt):
    """Independent numpy Generator for (seed, salt...) streams."""
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(s) for s in salt]))
