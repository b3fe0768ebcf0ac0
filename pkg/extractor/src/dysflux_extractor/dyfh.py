"""Writer for the .dyfh feature container (the interface to the dysflux toolkit).

Independent implementation of the documented layout so this package needs no
import from the consumer side; the consumer's reader is exercised in tests.

    magic "DYFH" | version u16=1 | flags u16=0 | L,T,D u32 | id_len u32 |
    payload u64 | clip_id utf-8 | f32 little-endian row-major [layer][time][dim]
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"DYFH"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIIIQ")
SUFFIX = ".dyfh"


def feature_path(directory, clip_id):
    return os.path.join(directory, clip_id + SUFFIX)


def write_dyfh(path, clip_id, values):
    arr = np.asarray(values)
    if arr.ndim != 3:
        raise ValueError(f"hidden states must be L x T x D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"refusing to write non-finite values for clip {clip_id!r}")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    clip_bytes = clip_id.encode("utf-8")
    header = _HEADER.pack(
        MAGIC, VERSION, 0, arr.shape[0], arr.shape[1], arr.shape[2],
        len(clip_bytes), len(payload),
    )
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=SUFFIX)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(clip_bytes)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def peek_header(path):
    """(clip_id, L, T, D) of an existing file, or None if malformed/absent."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(_HEADER.size)
            if len(head) < _HEADER.size:
                return None
            magic, version, _flags, n_layers, n_frames, dim, id_len, payload = \
                _HEADER.unpack(head)
            if magic != MAGIC or version != VERSION:
                return None
            if payload != 4 * n_layers * n_frames * dim:
                return None
            clip_bytes = fh.read(id_len)
            if len(clip_bytes) < id_len:
                return None
            return clip_bytes.decode("utf-8"), n_layers, n_frames, dim
    except OSError:
        return None
