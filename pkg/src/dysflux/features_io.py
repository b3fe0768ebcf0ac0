"""Bit-exact binary container for one clip's backbone hidden states (.dyfh).

Layout, all little-endian:

    magic   "DYFH"   4 bytes
    version u16      currently 1
    flags   u16      0
    L, T, D u32 each
    id_len  u32      byte length of the UTF-8 clip id
    payload u64      byte length of the f32 payload (must equal 4*L*T*D)
    clip_id          id_len UTF-8 bytes
    values  f32      row-major [layer][time][dim]

The fixed header is 32 bytes. Values are stored as 32-bit floats and promoted
to 64-bit on read; files are immutable once written.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .ioutil import atomic_write_bytes

MAGIC = b"DYFH"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIIIQ")
HEADER_SIZE = _HEADER.size  # 32
SUFFIX = ".dyfh"


class FeatureFormatError(ValueError):
    """Malformed .dyfh file; the message names the offending field."""


@dataclass
class FeatureFile:
    clip_id: str
    values: np.ndarray                      # (L, T, D) float64

    @property
    def shape(self):
        return self.values.shape


def feature_path(directory, clip_id):
    return os.path.join(directory, clip_id + SUFFIX)


def write_features(path, clip_id, values):
    """Write one clip's L x T x D hidden states; refuses non-finite values."""
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
    return atomic_write_bytes(path, header + clip_bytes + payload)


def read_features(path):
    """Read and validate a .dyfh file; values come back as float64."""
    with open(path, "rb") as fh:
        head = fh.read(HEADER_SIZE)
        if len(head) < HEADER_SIZE:
            raise FeatureFormatError(f"{path}: truncated header ({len(head)} of {HEADER_SIZE} bytes)")
        magic, version, flags, n_layers, n_frames, dim, id_len, payload_len = _HEADER.unpack(head)
        if magic != MAGIC:
            raise FeatureFormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise FeatureFormatError(f"{path}: unsupported version {version}")
        if flags != 0:
            raise FeatureFormatError(f"{path}: unsupported flags {flags}")
        if min(n_layers, n_frames, dim) < 1:
            raise FeatureFormatError(f"{path}: non-positive shape {(n_layers, n_frames, dim)}")
        expected = 4 * n_layers * n_frames * dim
        if payload_len != expected:
            raise FeatureFormatError(
                f"{path}: payload length {payload_len} does not match shape "
                f"{(n_layers, n_frames, dim)} (expected {expected})"
            )
        clip_bytes = fh.read(id_len)
        if len(clip_bytes) < id_len:
            raise FeatureFormatError(f"{path}: truncated clip_id ({len(clip_bytes)} of {id_len} bytes)")
        payload = fh.read(payload_len)
        if len(payload) < payload_len:
            raise FeatureFormatError(
                f"{path}: truncated payload ({len(payload)} of {payload_len} bytes)"
            )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return FeatureFile(
        clip_id=clip_bytes.decode("utf-8"),
        values=values.reshape(n_layers, n_frames, dim),
    )
