"""Shared fixtures and manifest builders."""

import json

import numpy as np
import pytest

from dysflux.datasets import SEVEN, SIX, ClipRecord, Manifest


def record(clip_id, split="train", labels=(), dataset_id="KSOF", speaker="s0",
           gender="f", counts=None, **extra):
    """ClipRecord with labels given as a list of positive class names."""
    vec = np.zeros(7, dtype=np.int64)
    for name in labels:
        vec[SEVEN.index(name)] = 1
    return ClipRecord(
        clip_id=clip_id, dataset_id=dataset_id, speaker_id=speaker, gender=gender,
        split=split, labels=vec,
        annotator_counts=None if counts is None else np.asarray(counts, dtype=np.int64),
        extra=extra,
    )


def manifest(records, name="test", class_set=SEVEN, dataset_id="KSOF", n_annotators=3):
    return Manifest(name=name, records=list(records), class_set=class_set,
                    dataset_id=dataset_id, n_annotators=n_annotators)


def write_manifest_lines(path, header, records):
    """Write raw JSON-lines content for loader tests."""
    lines = [json.dumps(header)]
    lines += [json.dumps(r) for r in records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def header_ksof():
    return {"name": "ksof-mini", "dataset_id": "KSOF",
            "class_set": list(SEVEN), "n_annotators": 3}


@pytest.fixture
def header_english():
    return {"name": "fbank-mini", "dataset_id": "FBANK",
            "class_set": list(SIX), "n_annotators": 3}
