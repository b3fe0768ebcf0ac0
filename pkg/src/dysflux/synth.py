"""Desk-scale synthetic fixtures: a separable labeled corpus with feature files.

Each class gets one standard-basis direction in feature space (unit mean
separation); a clip's hidden states are that class-mean mixture plus Gaussian
noise, identical in expectation across layers and frames. Labels follow a fixed
per-speaker pattern averaging just under two dysfluency labels per clip, and
speakers split 6/1/1 into train/dev/test, so the corpus is speaker-exclusive
and easily overfit by the head.
"""

from __future__ import annotations

import os

import numpy as np

from .datasets import ClipRecord, Manifest, SEVEN, save_manifest
from .features_io import feature_path, write_features


def _speaker_labels(speaker_idx, clip_idx):
    """Deterministic label pattern: six paired clips, one fluent, one triple."""
    labels = np.zeros(7, dtype=np.int64)
    if clip_idx < 6:
        labels[clip_idx] = 1
        labels[(clip_idx + 1) % 6] = 1
    elif clip_idx == 6:
        labels[6] = 1  # No-Df
    else:
        base = speaker_idx % 6
        for off in (0, 2, 4):
            labels[(base + off) % 6] = 1
    return labels


def make_synthetic_dataset(out_dir, n_speakers=8, clips_per_speaker=8,
                           n_layers=12, n_frames=10, dim=16, noise=0.5, seed=7):
    """Write manifest.jsonl plus one .dyfh per clip under ``out_dir``.

    Returns (manifest, manifest_path, features_dir).
    """
    if dim < 7:
        raise ValueError("feature dim must be >= 7 so every class has its own direction")
    rng = np.random.default_rng(seed)
    features_dir = os.path.join(out_dir, "features")
    os.makedirs(features_dir, exist_ok=True)

    class_means = np.eye(7, dim)  # unit mean separation between classes
    records = []
    for s in range(n_speakers):
        if s < n_speakers - 2:
            split = "train"
        elif s == n_speakers - 2:
            split = "dev"
        else:
            split = "test"
        for j in range(clips_per_speaker):
            labels = _speaker_labels(s, j)
            clip_id = f"syn{s:02d}_{j:02d}"
            mean = labels @ class_means
            hidden = mean[None, None, :] + noise * rng.standard_normal(
                (n_layers, n_frames, dim)
            )
            write_features(feature_path(features_dir, clip_id), clip_id, hidden)
            records.append(ClipRecord(
                clip_id=clip_id,
                dataset_id="KSOF",
                speaker_id=f"spk{s:02d}",
                gender="f" if s % 2 == 0 else "m",
                split=split,
                labels=labels,
            ))
    manifest = Manifest(
        name="synthetic", records=records, class_set=SEVEN, dataset_id="KSOF",
    )
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    save_manifest(manifest, manifest_path)
    return manifest, manifest_path, features_dir
