"""Clip manifests: label schema, binarization, merging, split checks and statistics.

A manifest is a UTF-8 JSON-lines file. Line 1 is a header object with keys
``name``, ``dataset_id``, ``class_set`` and ``n_annotators``; every further line
is one clip record with keys ``clip_id``, ``speaker_id``, ``gender``, ``split``,
``labels`` (object class -> 0/1), optional ``annotator_counts``, ``duration_s``
and, in merged manifests, ``dataset_id``. Unknown keys are preserved on round-trip.

Labels are stored internally as a length-7 binary vector in SEVEN order even for
six-class datasets; English datasets never carry a positive Mod label.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .ioutil import atomic_write_text

SEVEN = ("Mod", "Bl", "Int", "Pro", "Snd", "Wd", "No-Df")
SIX = ("Bl", "Int", "Pro", "Snd", "Wd", "No-Df")
DYSFLUENCY_CLASSES = ("Mod", "Bl", "Int", "Pro", "Snd", "Wd")

DATASET_IDS = ("SEP28K-E", "FBANK", "KSOF")
ENGLISH_DATASETS = ("SEP28K-E", "FBANK")
SPLITS = ("train", "dev", "test")
GENDERS = ("f", "m", "unknown")

_SEVEN_INDEX = {name: i for i, name in enumerate(SEVEN)}


class ManifestError(ValueError):
    """Manifest-level validation failure; ``violations`` lists every offender."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("manifest validation failed:\n" + "\n".join(self.violations))


def resolve_class_set(spec):
    """Accept 'six'/'seven', or an explicit ordered name list, as a class set."""
    if isinstance(spec, str):
        key = spec.lower()
        if key == "seven":
            return SEVEN
        if key == "six":
            return SIX
        raise ValueError(f"unknown class set {spec!r} (expected 'six' or 'seven')")
    names = tuple(spec)
    if names not in (SEVEN, SIX):
        raise ValueError(f"class set must be {list(SEVEN)} or {list(SIX)}, got {list(names)}")
    return names


@dataclass
class ClipRecord:
    """One 3-second clip's metadata and binarized multi-label annotation."""

    clip_id: str
    dataset_id: str
    speaker_id: str
    gender: str
    split: str
    labels: np.ndarray                      # (7,) binary, SEVEN order
    annotator_counts: np.ndarray | None = None
    duration_s: float = 3.0
    extra: dict = field(default_factory=dict)

    @property
    def any_label(self):
        """1 iff any dysfluency class (Mod..Wd) is positive; No-Df is excluded."""
        return int(self.labels[:6].any())

    @property
    def n_dysfluency_labels(self):
        return int(self.labels[:6].sum())

    def label(self, class_name):
        return int(self.labels[_SEVEN_INDEX[class_name]])


@dataclass
class Manifest:
    name: str
    records: list
    class_set: tuple
    dataset_id: str | None = None
    n_annotators: int | None = None

    def __post_init__(self):
        self._by_id = {r.clip_id: r for r in self.records}
        if len(self._by_id) != len(self.records):
            seen, dups = set(), set()
            for r in self.records:
                if r.clip_id in seen:
                    dups.add(r.clip_id)
                seen.add(r.clip_id)
            raise ManifestError([f"duplicate clip_id {cid!r}" for cid in sorted(dups)])

    def __len__(self):
        return len(self.records)

    def record(self, clip_id):
        return self._by_id[clip_id]

    def split_records(self, split):
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]


def labels_from_dict(label_obj):
    """Class-name -> 0/1 object to a length-7 vector; missing classes are 0."""
    vec = np.zeros(7, dtype=np.int64)
    for name, value in label_obj.items():
        if name not in _SEVEN_INDEX:
            raise ValueError(f"unknown class name {name!r}")
        if value not in (0, 1):
            raise ValueError(f"label for {name!r} must be 0 or 1, got {value!r}")
        vec[_SEVEN_INDEX[name]] = value
    return vec


def binarize_labels(annotator_counts, n_annotators, threshold=2):
    """Class positive iff its annotator count >= threshold (default 2 of 3)."""
    counts = np.asarray(annotator_counts, dtype=np.int64)
    if counts.shape != (7,):
        raise ValueError(f"annotator counts must be length 7, got shape {counts.shape}")
    if not 1 <= threshold <= n_annotators:
        raise ValueError(f"threshold {threshold} outside [1, {n_annotators}]")
    if np.any(counts < 0) or np.any(counts > n_annotators):
        raise ValueError(f"annotator counts must lie in [0, {n_annotators}]")
    return (counts >= threshold).astype(np.int64)


def counts_from_dict(count_obj):
    vec = np.zeros(7, dtype=np.int64)
    for name, value in count_obj.items():
        if name not in _SEVEN_INDEX:
            raise ValueError(f"unknown class name {name!r}")
        vec[_SEVEN_INDEX[name]] = int(value)
    return vec


_RECORD_KEYS = {
    "clip_id", "speaker_id", "gender", "split", "labels",
    "annotator_counts", "duration_s", "dataset_id",
}


def load_manifest(path):
    """Parse and validate a manifest file; all violations are reported together."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ManifestError([f"{path}: empty file, missing header line"])
    header = json.loads(lines[0])
    class_set = resolve_class_set(header.get("class_set", list(SEVEN)))
    default_dataset = header.get("dataset_id")
    n_annotators = header.get("n_annotators")

    records, violations, seen = [], [], {}
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            violations.append(f"line {lineno}: invalid JSON ({exc.msg})")
            continue
        clip_id = obj.get("clip_id")
        if clip_id is None:
            violations.append(f"line {lineno}: missing clip_id")
            continue
        if clip_id in seen:
            violations.append(
                f"line {lineno}: duplicate clip_id {clip_id!r} (first seen line {seen[clip_id]})"
            )
            continue
        seen[clip_id] = lineno
        dataset_id = obj.get("dataset_id", default_dataset)
        if dataset_id not in DATASET_IDS:
            violations.append(f"line {lineno}: unknown dataset_id {dataset_id!r}")
            continue
        split = obj.get("split")
        if split not in SPLITS:
            violations.append(f"line {lineno}: unknown split {split!r}")
            continue
        gender = obj.get("gender", "unknown")
        if gender not in GENDERS:
            violations.append(f"line {lineno}: unknown gender {gender!r}")
            continue
        try:
            labels = labels_from_dict(obj.get("labels", {}))
        except ValueError as exc:
            violations.append(f"line {lineno}: {exc}")
            continue
        if dataset_id in ENGLISH_DATASETS and labels[_SEVEN_INDEX["Mod"]] == 1:
            violations.append(
                f"line {lineno}: clip {clip_id!r} carries a Mod label on English dataset {dataset_id}"
            )
            continue
        counts = None
        if obj.get("annotator_counts") is not None:
            try:
                counts = counts_from_dict(obj["annotator_counts"])
                if n_annotators is not None and np.any(counts > n_annotators):
                    raise ValueError(f"annotator count exceeds n_annotators={n_annotators}")
            except ValueError as exc:
                violations.append(f"line {lineno}: {exc}")
                continue
        records.append(ClipRecord(
            clip_id=clip_id,
            dataset_id=dataset_id,
            speaker_id=str(obj.get("speaker_id", "")),
            gender=gender,
            split=split,
            labels=labels,
            annotator_counts=counts,
            duration_s=float(obj.get("duration_s", 3.0)),
            extra={k: v for k, v in obj.items() if k not in _RECORD_KEYS},
        ))
    if violations:
        raise ManifestError(violations)
    return Manifest(
        name=header.get("name", os.path.basename(path)),
        records=records,
        class_set=class_set,
        dataset_id=default_dataset,
        n_annotators=n_annotators,
    )


def save_manifest(manifest: Manifest, path):
    """Write the JSON-lines form atomically; unknown record keys are preserved."""
    header = {
        "name": manifest.name,
        "dataset_id": manifest.dataset_id,
        "class_set": list(manifest.class_set),
        "n_annotators": manifest.n_annotators,
    }
    lines = [json.dumps(header, ensure_ascii=False)]
    for r in manifest.records:
        obj = {
            "clip_id": r.clip_id,
            "speaker_id": r.speaker_id,
            "gender": r.gender,
            "split": r.split,
            "labels": {name: int(r.labels[_SEVEN_INDEX[name]]) for name in manifest.class_set},
            "duration_s": r.duration_s,
        }
        if r.dataset_id != manifest.dataset_id:
            obj["dataset_id"] = r.dataset_id
        if r.annotator_counts is not None:
            obj["annotator_counts"] = {
                name: int(r.annotator_counts[_SEVEN_INDEX[name]]) for name in manifest.class_set
            }
        obj.update(r.extra)
        lines.append(json.dumps(obj, ensure_ascii=False))
    atomic_write_text(path, "\n".join(lines) + "\n")


def merge(manifests, name):
    """Concatenate manifests into one; seven-class if any source carries Mod.

    Sources must have disjoint clip ids; each record keeps its own dataset_id.
    """
    by_id = {}
    collisions = []
    for m in manifests:
        for r in m.records:
            if r.clip_id in by_id:
                collisions.append(r.clip_id)
            by_id[r.clip_id] = r
    if collisions:
        raise ManifestError([f"clip_id collision {cid!r}" for cid in sorted(set(collisions))])
    class_set = SEVEN if any(m.class_set == SEVEN for m in manifests) else SIX
    dataset_ids = {m.dataset_id for m in manifests}
    n_annos = {m.n_annotators for m in manifests}
    return Manifest(
        name=name,
        records=[r for m in manifests for r in m.records],
        class_set=class_set,
        dataset_id=dataset_ids.pop() if len(dataset_ids) == 1 else None,
        n_annotators=n_annos.pop() if len(n_annos) == 1 else None,
    )


@dataclass
class SpeakerExclusivityReport:
    ok: bool
    violations: list                        # (dataset_id, speaker_id, splits) tuples

    def lines(self):
        if self.ok:
            return ["speaker exclusivity: PASS"]
        out = ["speaker exclusivity: FAIL"]
        for dataset_id, speaker_id, splits in self.violations:
            out.append(f"  speaker {speaker_id!r} ({dataset_id}) appears in splits: {', '.join(splits)}")
        return out


def validate_speaker_exclusivity(manifest: Manifest):
    """Report every speaker seen in more than one split.

    Speakers are namespaced by dataset_id: the same raw speaker string in two
    different datasets is not a violation.
    """
    splits_by_speaker = {}
    for r in manifest.records:
        splits_by_speaker.setdefault((r.dataset_id, r.speaker_id), set()).add(r.split)
    violations = [
        (dataset_id, speaker_id, tuple(sorted(splits)))
        for (dataset_id, speaker_id), splits in sorted(splits_by_speaker.items())
        if len(splits) > 1
    ]
    return SpeakerExclusivityReport(ok=not violations, violations=violations)


@dataclass
class DistributionReport:
    """Per-class positive percentages plus the clip total, one selection."""

    name: str
    split: str | None
    total: int
    percentages: dict                       # class name -> percent of clips positive

    @property
    def empty(self):
        return self.total == 0


def label_distribution(manifest: Manifest, split=None):
    """Percent of clips positive per class; empty selections yield an empty marker."""
    records = manifest.records if split is None else manifest.split_records(split)
    if not records:
        return DistributionReport(name=manifest.name, split=split, total=0, percentages={})
    labels = np.stack([r.labels for r in records])
    percentages = {
        name: 100.0 * float(labels[:, _SEVEN_INDEX[name]].sum()) / len(records)
        for name in manifest.class_set
    }
    return DistributionReport(
        name=manifest.name, split=split, total=len(records), percentages=percentages
    )


def cooccurrence_stats(manifest: Manifest, split=None):
    """Fraction of clips carrying two or more dysfluency labels (No-Df excluded)."""
    records = manifest.records if split is None else manifest.split_records(split)
    if not records:
        return 0.0
    multi = sum(1 for r in records if r.n_dysfluency_labels > 1)
    return multi / len(records)


def make_batches(manifest: Manifest, split, batch_size, seed, epoch=0):
    """Deterministic per-(seed, epoch) shuffle chunked into batches of clip ids."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    ids = [r.clip_id for r in manifest.split_records(split)]
    if not ids:
        raise ValueError(f"split {split!r} of manifest {manifest.name!r} is empty")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]
