"""WAV loading, mono downmix and resampling to the backbone's 16 kHz input rate."""

from __future__ import annotations

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

TARGET_RATE = 16000


class AudioError(RuntimeError):
    """Unreadable or undecodable audio clip."""


def load_clip(path, target_rate=TARGET_RATE):
    """Mono float waveform at target_rate; integer PCM is scaled to [-1, 1]."""
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise AudioError(f"{path}: {exc}") from exc
    data = np.asarray(data)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max)
    else:
        data = data.astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise AudioError(f"{path}: non-finite samples")
    if rate != target_rate:
        from math import gcd
        g = gcd(int(rate), int(target_rate))
        data = resample_poly(data, target_rate // g, rate // g)
    return data.astype(np.float32)


def normalize(waveform):
    """Zero-mean, unit-variance normalization as used by the backbone family."""
    waveform = np.asarray(waveform, dtype=np.float64)
    centered = waveform - waveform.mean()
    return (centered / np.sqrt(centered.var() + 1e-7)).astype(np.float32)
