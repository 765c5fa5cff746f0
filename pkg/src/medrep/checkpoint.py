"""Deterministic checkpoint container: JSON header plus raw float64 tensors.

Byte-identical for identical content (no timestamps, sorted keys), which is
what makes re-runs hash-comparable.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"MEDREPCKPT1\n"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, arrays, meta):
    """Write named float64 arrays plus a JSON metadata dict."""
    names = sorted(arrays)
    header = {
        "meta": meta,
        "tensors": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (arrays dict, meta dict)."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a medrep checkpoint")
        (n_header,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n_header).decode())
        arrays = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            arrays[spec["name"]] = data.copy()
    return arrays, header["meta"]


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def vocab_fingerprint(vocab):
    h = hashlib.sha256()
    for cid, ctype in zip(vocab.ids, vocab.types):
        h.update(f"{cid}\t{ctype}\n".encode())
    return h.hexdigest()
