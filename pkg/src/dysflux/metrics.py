"""Multi-label per-class precision/recall/F1 and report generation.

Conventions: a class with neither labeled nor predicted positives in a split
has undefined precision and recall, so its F1 is reported as N/A. If exactly
one of precision/recall is undefined it counts as 0 and F1 is 0. Classes the
model has no output for are marked "-" (not evaluable). Macro aggregates
average the defined classes only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import __version__
from .datasets import SEVEN, Manifest
from .features_io import FeatureFile
from .head import head_forward
from .training import Checkpoint, FeatureStore

STATUS_DEFINED = "defined"
STATUS_NA = "na"
STATUS_NOT_EVALUABLE = "not_evaluable"

NA_SENTINEL = "N/A"
NOT_EVALUABLE_SENTINEL = "-"


@dataclass
class ClassMetrics:
    name: str
    tp: int
    fp: int
    fn: int
    tn: int
    support: int
    precision: float | None
    recall: float | None
    f1: float | None

    @property
    def status(self):
        return STATUS_NA if self.f1 is None else STATUS_DEFINED


def _class_metrics(name, tp, fp, fn, tn):
    p_undefined = tp + fp == 0
    r_undefined = tp + fn == 0
    if p_undefined and r_undefined:
        precision = recall = f1 = None
    else:
        precision = 0.0 if p_undefined else tp / (tp + fp)
        recall = 0.0 if r_undefined else tp / (tp + fn)
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ClassMetrics(
        name=name, tp=tp, fp=fp, fn=fn, tn=tn, support=tp + fn,
        precision=precision, recall=recall, f1=f1,
    )


@dataclass
class PRF1Result:
    per_class: list                         # ClassMetrics, one per column
    macro_precision: float | None
    macro_recall: float | None
    macro_f1: float | None
    n_clips: int


def prf1(preds, targets, class_names=None):
    """Per-class counts and P/R/F1 over an N x C prediction/target pair."""
    preds = np.asarray(preds, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if preds.shape != targets.shape:
        raise ValueError(f"prediction shape {preds.shape} != target shape {targets.shape}")
    if preds.ndim != 2:
        raise ValueError("predictions must be N x C")
    n, c = preds.shape
    if class_names is None:
        class_names = [f"class_{i}" for i in range(c)]
    per_class = []
    for j, name in enumerate(class_names):
        p, t = preds[:, j], targets[:, j]
        tp = int(np.sum((p == 1) & (t == 1)))
        fp = int(np.sum((p == 1) & (t == 0)))
        fn = int(np.sum((p == 0) & (t == 1)))
        tn = int(np.sum((p == 0) & (t == 0)))
        per_class.append(_class_metrics(name, tp, fp, fn, tn))
    defined = [m for m in per_class if m.f1 is not None]
    macro = lambda key: (  # noqa: E731
        float(np.mean([getattr(m, key) for m in defined])) if defined else None
    )
    return PRF1Result(
        per_class=per_class,
        macro_precision=macro("precision"),
        macro_recall=macro("recall"),
        macro_f1=macro("f1"),
        n_clips=n,
    )


def predict_probs(checkpoint: Checkpoint, features):
    """Per-class sigmoid probabilities for one clip's hidden states."""
    values = features.values if isinstance(features, FeatureFile) else np.asarray(features)
    if values.ndim != 3:
        raise ValueError(f"features must be L x T x D, got shape {values.shape}")
    p = checkpoint.params
    if values.shape[0] != p.num_layers or values.shape[2] != p.feature_dim:
        raise ValueError(
            f"feature shape {values.shape} does not match model dims "
            f"L={p.num_layers}, D={p.feature_dim}"
        )
    return head_forward(values, p).main_probs


def predict(checkpoint: Checkpoint, features, threshold=0.5):
    """Binary per-class decisions; the threshold comparison is inclusive (>=)."""
    return (predict_probs(checkpoint, features) >= threshold).astype(np.int64)


@dataclass
class ClassReportEntry:
    name: str
    status: str                             # defined | na | not_evaluable
    metrics: ClassMetrics | None


@dataclass
class MetricsReport:
    manifest_name: str
    split: str
    model_classes: tuple
    dataset_classes: tuple
    entries: list                           # ClassReportEntry in SEVEN order
    macro_precision: float | None
    macro_recall: float | None
    macro_f1: float | None
    n_clips: int
    threshold: float
    seed: int
    binarization: str
    toolkit_version: str = __version__

    def entry(self, name):
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)


def evaluate(checkpoint: Checkpoint, manifest: Manifest, split, features_dir,
             threshold=0.5, binarization="as-loaded"):
    """Run the model over a split and tabulate per-class metrics.

    Classes the model predicts are scored against the stored length-7 label
    vectors (empty-support classes fall under the N/A rule); classes only the
    dataset knows are reported as not evaluable.
    """
    records = manifest.split_records(split)
    if not records:
        raise ValueError(f"split {split!r} of manifest {manifest.name!r} is empty")
    store = FeatureStore(features_dir)
    model_classes = checkpoint.config.class_set
    preds = np.zeros((len(records), len(model_classes)), dtype=np.int64)
    targets = np.zeros_like(preds)
    missing = [r.clip_id for r in records
               if not _has_features(store, r.clip_id)]
    if missing:
        raise FileNotFoundError(
            "missing feature files for clips: " + ", ".join(sorted(missing))
        )
    for i, record in enumerate(records):
        preds[i] = predict(checkpoint, store.get(record.clip_id), threshold)
        targets[i] = [record.label(name) for name in model_classes]
    result = prf1(preds, targets, class_names=list(model_classes))
    by_name = {m.name: m for m in result.per_class}

    entries = []
    for name in SEVEN:
        if name in model_classes:
            m = by_name[name]
            entries.append(ClassReportEntry(name=name, status=m.status, metrics=m))
        elif name in manifest.class_set:
            entries.append(ClassReportEntry(name=name, status=STATUS_NOT_EVALUABLE, metrics=None))
    return MetricsReport(
        manifest_name=manifest.name,
        split=split,
        model_classes=model_classes,
        dataset_classes=manifest.class_set,
        entries=entries,
        macro_precision=result.macro_precision,
        macro_recall=result.macro_recall,
        macro_f1=result.macro_f1,
        n_clips=len(records),
        threshold=threshold,
        seed=checkpoint.config.seed,
        binarization=binarization,
    )


def _has_features(store: FeatureStore, clip_id):
    try:
        store.get(clip_id)
        return True
    except FileNotFoundError:
        return False


def _cell(entry: ClassReportEntry, key):
    if entry.status == STATUS_NOT_EVALUABLE:
        return NOT_EVALUABLE_SENTINEL
    value = getattr(entry.metrics, key)
    if value is None:
        return NA_SENTINEL
    if key == "support":
        return str(value)
    return f"{value:.4f}"


def report_tsv(report: MetricsReport):
    """Classes as columns with "-" and "N/A" sentinels; one row per statistic."""
    names = [e.name for e in report.entries]
    rows = [
        ["# toolkit_version", report.toolkit_version],
        ["# seed", str(report.seed)],
        ["# threshold", f"{report.threshold:g}"],
        ["# binarization", report.binarization],
        ["# manifest", report.manifest_name],
        ["# split", report.split],
        ["# clips", str(report.n_clips)],
        ["class", *names],
    ]
    for key in ("f1", "precision", "recall", "support"):
        rows.append([key, *[_cell(e, key) for e in report.entries]])
    macro = [
        ("macro_f1", report.macro_f1),
        ("macro_precision", report.macro_precision),
        ("macro_recall", report.macro_recall),
    ]
    for label, value in macro:
        rows.append([label, NA_SENTINEL if value is None else f"{value:.4f}"])
    return "\n".join("\t".join(row) for row in rows) + "\n"


def report_json(report: MetricsReport):
    classes = {}
    for e in report.entries:
        if e.status == STATUS_NOT_EVALUABLE:
            classes[e.name] = {"status": e.status}
        else:
            m = e.metrics
            classes[e.name] = {
                "status": e.status,
                "tp": m.tp, "fp": m.fp, "fn": m.fn, "tn": m.tn,
                "support": m.support,
                "precision": m.precision, "recall": m.recall, "f1": m.f1,
            }
    return {
        "toolkit_version": report.toolkit_version,
        "manifest": report.manifest_name,
        "split": report.split,
        "n_clips": report.n_clips,
        "threshold": report.threshold,
        "seed": report.seed,
        "binarization": report.binarization,
        "model_classes": list(report.model_classes),
        "dataset_classes": list(report.dataset_classes),
        "classes": classes,
        "macro": {
            "precision": report.macro_precision,
            "recall": report.macro_recall,
            "f1": report.macro_f1,
        },
    }


def report_json_text(report: MetricsReport):
    return json.dumps(report_json(report), indent=2, sort_keys=True) + "\n"
