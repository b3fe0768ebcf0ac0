"""Training: AdamW over head parameters, epoch loop with early stopping,
warm start across class sets, and grid search over (w_main, alpha, gamma).

Gradients are accumulated clip by clip and applied once per batch, so the
configured batch size is reachable regardless of memory; the update equals the
gradient of the batch-mean loss exactly.
"""

from __future__ import annotations

import itertools
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .datasets import Manifest, SEVEN, SIX, make_batches, resolve_class_set
from .features_io import feature_path, read_features
from .head import (
    HeadParams, head_backward, head_forward, init_params, param_items, zero_grads,
)
from .losses import (
    LossConfig, aux_cross_entropy_from_logits, main_loss_from_logits, mtl_loss,
)

MONITORS = ("total_dev_loss", "main_dev_loss")
AUX_TASKS = ("any", "gender")

# Hyperparameter ranges searched when no explicit grid is given.
DEFAULT_GRID = {
    "w_main": [0.5, 0.6, 0.7, 0.8, 0.9],
    "alpha": [round(0.1 * i, 1) for i in range(1, 10)],
    "gamma": [1.0, 2.0, 3.0],
}


@dataclass
class TrainConfig:
    learning_rate: float = 3e-5
    batch_size: int = 256
    max_epochs: int = 20
    patience: int = 5
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)
    aux_task: str = "any"
    class_set: tuple = SEVEN
    seed: int = 0
    monitor: str = "total_dev_loss"
    use_projections: bool = True
    mask_english_mod: bool = False      # alternative to Mod-as-hard-negative

    def __post_init__(self):
        self.class_set = resolve_class_set(self.class_set)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 1 <= self.patience <= self.max_epochs:
            raise ValueError(f"patience must lie in [1, max_epochs={self.max_epochs}]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.monitor not in MONITORS:
            raise ValueError(f"monitor must be one of {MONITORS}")
        if self.aux_task not in AUX_TASKS:
            raise ValueError(f"aux_task must be one of {AUX_TASKS}")

    @property
    def num_classes(self):
        return len(self.class_set)

    def to_dict(self):
        d = {k: getattr(self, k) for k in (
            "learning_rate", "batch_size", "max_epochs", "patience", "weight_decay",
            "adam_beta1", "adam_beta2", "adam_eps", "aux_task", "seed", "monitor",
            "use_projections", "mask_english_mod",
        )}
        d["loss"] = self.loss.to_dict()
        d["class_set"] = list(self.class_set)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["loss"] = LossConfig.from_dict(d["loss"])
        d["class_set"] = tuple(d["class_set"])
        return cls(**d)


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict


def init_adam_state(params: HeadParams):
    return AdamState(
        step=0,
        m={name: np.zeros_like(arr) for name, arr in param_items(params)},
        v={name: np.zeros_like(arr) for name, arr in param_items(params)},
    )


def optimizer_step(params: HeadParams, grads: dict, state: AdamState, config: TrainConfig):
    """One AdamW update: bias-corrected Adam step plus decoupled weight decay.

    The per-layer weights of the weighted layer sum are exempt from decay
    (decaying them would bias the layer combination toward zero).
    """
    t = state.step + 1
    new_fields, new_m, new_v = {}, {}, {}
    for name, p in param_items(params):
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = config.adam_beta1 * state.m[name] + (1.0 - config.adam_beta1) * g
        v = config.adam_beta2 * state.v[name] + (1.0 - config.adam_beta2) * g * g
        m_hat = m / (1.0 - config.adam_beta1 ** t)
        v_hat = v / (1.0 - config.adam_beta2 ** t)
        update = config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        if name != "layer_weights" and config.weight_decay > 0:
            update = update + config.learning_rate * config.weight_decay * p
        new_fields[name] = p - update
        new_m[name], new_v[name] = m, v
    return (
        replace(params, **new_fields),
        AdamState(step=t, m=new_m, v=new_v),
    )


class EarlyStopping:
    """Strict-improvement early stopping: stop after `patience` epochs without a new best."""

    def __init__(self, patience):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch, monitored):
        if monitored < self.best:
            self.best = monitored
            self.best_epoch = epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class Checkpoint:
    params: HeadParams
    config: TrainConfig
    history: list                       # one dict per epoch
    best_epoch: int
    provenance: dict

    @property
    def class_set(self):
        return self.config.class_set


class FeatureStore:
    """Lazy per-clip feature loader with an in-memory cache."""

    def __init__(self, directory):
        self.directory = directory
        self._cache = {}

    def get(self, clip_id):
        if clip_id not in self._cache:
            path = feature_path(self.directory, clip_id)
            if not os.path.exists(path):
                raise FileNotFoundError(f"no feature file for clip {clip_id!r} (expected {path})")
            self._cache[clip_id] = read_features(path).values
        return self._cache[clip_id]


def aux_target(record, task):
    """Auxiliary-branch target for one clip; None means masked out."""
    if task == "any":
        return record.any_label
    if record.gender == "f":
        return 0
    if record.gender == "m":
        return 1
    return None


def _clip_targets(record, config: TrainConfig):
    main = np.array([record.label(name) for name in config.class_set], dtype=np.float64)
    mask = None
    if (
        config.mask_english_mod
        and "Mod" in config.class_set
        and record.dataset_id != "KSOF"
    ):
        mask = np.ones(len(config.class_set), dtype=bool)
        mask[config.class_set.index("Mod")] = False
    return main, mask, aux_target(record, config.aux_task)


def _batch_pass(params, records, store, config, with_grads):
    """Mean main/aux losses over one batch; optionally the summed parameter gradients.

    The auxiliary mean runs over clips with a defined target only (masked mean);
    with no such clips the auxiliary term contributes zero.
    """
    n = len(records)
    w_main = config.loss.w_main
    main_sum = 0.0
    aux_sum = 0.0
    n_aux = 0
    passes = []
    for record in records:
        hidden = store.get(record.clip_id)
        out = head_forward(hidden, params)
        targets, class_mask, aux = _clip_targets(record, config)
        l_main, d_main = main_loss_from_logits(config.loss, out.main_logits, targets, class_mask)
        main_sum += l_main
        if aux is not None:
            l_aux, d_aux = aux_cross_entropy_from_logits(
                out.aux_logits, aux, config.loss.aux_class_weights
            )
            aux_sum += l_aux
            n_aux += 1
        else:
            d_aux = None
        if with_grads:
            passes.append((hidden, out, d_main, d_aux))
    main_mean = main_sum / n
    aux_mean = aux_sum / n_aux if n_aux else 0.0
    total = mtl_loss(main_mean, aux_mean, w_main)
    if not with_grads:
        return main_mean, aux_mean, n_aux, total, None

    grads = zero_grads(params)
    for hidden, out, d_main, d_aux in passes:
        up_main = (w_main / n) * d_main
        if d_aux is not None:
            up_aux = ((1.0 - w_main) / n_aux) * d_aux
        else:
            up_aux = np.zeros(2)
        clip_grads = head_backward(hidden, params, up_main, up_aux, out)
        for name in grads:
            grads[name] += clip_grads[name]
    return main_mean, aux_mean, n_aux, total, grads


def split_loss(params, manifest, split, store, config):
    """(main, aux, total) mean losses over an entire split, no gradients."""
    records = manifest.split_records(split)
    if not records:
        raise ValueError(f"split {split!r} of manifest {manifest.name!r} is empty")
    main, aux, _, total, _ = _batch_pass(params, records, store, config, with_grads=False)
    return main, aux, total


def _monitored(config, main, total):
    return main if config.monitor == "main_dev_loss" else total


def train(config: TrainConfig, manifest: Manifest, features_dir,
          initial_params: HeadParams | None = None, warm_start_from=None):
    """Run the full training protocol and return the best-epoch checkpoint.

    Deterministic given (config, manifest, features): initialization, batch
    order and all arithmetic depend only on the seed and the inputs.
    """
    train_records = manifest.split_records("train")
    dev_records = manifest.split_records("dev")
    if not train_records:
        raise ValueError(f"manifest {manifest.name!r} has an empty train split")
    if not dev_records:
        raise ValueError(f"manifest {manifest.name!r} has an empty dev split")

    store = FeatureStore(features_dir)
    first = store.get(train_records[0].clip_id)
    n_layers, _, dim = first.shape
    if initial_params is None:
        params = init_params(
            config.seed, n_layers, dim, config.num_classes,
            use_projections=config.use_projections,
        )
    else:
        if initial_params.num_layers != n_layers or initial_params.feature_dim != dim:
            raise ValueError(
                f"warm-start parameters are {initial_params.num_layers}x{initial_params.feature_dim}, "
                f"features are {n_layers}x{dim}"
            )
        if initial_params.num_classes != config.num_classes:
            raise ValueError(
                f"warm-start parameters predict {initial_params.num_classes} classes, "
                f"config asks for {config.num_classes}"
            )
        params = initial_params.copy()

    state = init_adam_state(params)
    stopper = EarlyStopping(config.patience)
    history = []
    best_params = params.copy()

    by_id = {r.clip_id: r for r in train_records}
    for epoch in range(1, config.max_epochs + 1):
        batches = make_batches(manifest, "train", config.batch_size, config.seed, epoch=epoch)
        main_acc = aux_acc = 0.0
        n_clips = n_aux_clips = 0
        for batch_ids in batches:
            records = [by_id[cid] for cid in batch_ids]
            main_mean, aux_mean, n_aux, _, grads = _batch_pass(
                params, records, store, config, with_grads=True
            )
            params, state = optimizer_step(params, grads, state, config)
            main_acc += main_mean * len(records)
            aux_acc += aux_mean * n_aux
            n_clips += len(records)
            n_aux_clips += n_aux
        train_main = main_acc / n_clips
        train_aux = aux_acc / n_aux_clips if n_aux_clips else 0.0
        dev_main, dev_aux, dev_total = split_loss(params, manifest, "dev", store, config)
        history.append({
            "epoch": epoch,
            "train_main": train_main,
            "train_aux": train_aux,
            "train_total": mtl_loss(train_main, train_aux, config.loss.w_main),
            "dev_main": dev_main,
            "dev_aux": dev_aux,
            "dev_total": dev_total,
        })
        improved = _monitored(config, dev_main, dev_total) < stopper.best
        stop = stopper.update(epoch, _monitored(config, dev_main, dev_total))
        if improved:
            best_params = params.copy()
        if stop:
            break

    return Checkpoint(
        params=best_params,
        config=config,
        history=history,
        best_epoch=stopper.best_epoch,
        provenance={
            "manifest": manifest.name,
            "features_dir": os.path.abspath(features_dir),
            "warm_start": warm_start_from,
            "toolkit_version": __version__,
        },
    )


def warm_start(checkpoint: Checkpoint, new_config: TrainConfig):
    """Initial parameters for a new run, transferred from an existing checkpoint.

    Class sets must be equal, or transferable by adding/dropping the Mod output:
    six -> seven initializes a fresh Mod row, seven -> six drops it. Everything
    else is copied verbatim.
    """
    src = checkpoint.params
    src_set = checkpoint.config.class_set
    tgt_set = new_config.class_set
    if src_set == tgt_set:
        params = src.copy()
    elif src_set == SIX and tgt_set == SEVEN:
        fresh = init_params(
            new_config.seed, src.num_layers, src.feature_dim, 7,
            use_projections=src.use_projections,
        )
        main_w = np.vstack([fresh.main_weight[:1], src.main_weight])
        main_b = np.concatenate([fresh.main_bias[:1], src.main_bias])
        params = replace(src.copy(), main_weight=main_w, main_bias=main_b)
    elif src_set == SEVEN and tgt_set == SIX:
        params = replace(
            src.copy(),
            main_weight=src.main_weight[1:].copy(),
            main_bias=src.main_bias[1:].copy(),
        )
    else:
        raise ValueError(f"cannot transfer from class set {src_set} to {tgt_set}")
    return params


def grid_cells(grid=None):
    """Lexicographically ordered (w_main, alpha, gamma) combinations."""
    grid = grid or DEFAULT_GRID
    return sorted(itertools.product(
        sorted(grid["w_main"]), sorted(grid["alpha"]), sorted(grid["gamma"])
    ))


@dataclass
class GridCellResult:
    w_main: float
    alpha: float
    gamma: float
    dev_loss: float
    best_epoch: int


@dataclass
class GridSearchResult:
    ranked: list                        # GridCellResult, best first
    best_config: TrainConfig
    best_checkpoint: Checkpoint


def grid_search(base_config: TrainConfig, manifest: Manifest, features_dir,
                grid=None, jobs=1):
    """Train one model per grid cell (shared seed); rank by monitored dev loss.

    Ties break lexicographically on (w_main, alpha, gamma). Cells are
    independent; `jobs` > 1 runs them in a thread pool.
    """
    cells = grid_cells(grid)

    def run(cell):
        w_main, alpha, gamma = cell
        cfg = replace(base_config, loss=replace(
            base_config.loss, w_main=w_main, alpha=alpha, gamma=gamma
        ))
        ckpt = train(cfg, manifest, features_dir)
        monitored = min(
            _monitored(cfg, h["dev_main"], h["dev_total"]) for h in ckpt.history
        )
        return cell, monitored, ckpt

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run, cells))
    else:
        outcomes = [run(cell) for cell in cells]

    outcomes.sort(key=lambda o: (o[1], o[0]))
    ranked = [
        GridCellResult(w_main=c[0], alpha=c[1], gamma=c[2], dev_loss=loss,
                       best_epoch=ckpt.best_epoch)
        for c, loss, ckpt in outcomes
    ]
    best_cell, _, best_ckpt = outcomes[0]
    return GridSearchResult(
        ranked=ranked,
        best_config=best_ckpt.config,
        best_checkpoint=best_ckpt,
    )


CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(checkpoint: Checkpoint, directory):
    """Checkpoint directory: params.json (metadata) + params.bin (f32, canonical order)."""
    os.makedirs(directory, exist_ok=True)
    shapes = {name: list(arr.shape) for name, arr in param_items(checkpoint.params)}
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "toolkit_version": __version__,
        "class_set": list(checkpoint.config.class_set),
        "dims": {
            "L": checkpoint.params.num_layers,
            "D": checkpoint.params.feature_dim,
            "C": checkpoint.params.num_classes,
        },
        "use_projections": checkpoint.params.use_projections,
        "param_shapes": shapes,
        "config": checkpoint.config.to_dict(),
        "history": checkpoint.history,
        "best_epoch": checkpoint.best_epoch,
        "provenance": checkpoint.provenance,
    }
    blob = b"".join(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()
        for _, arr in param_items(checkpoint.params)
    )
    with open(os.path.join(directory, "params.bin"), "wb") as fh:
        fh.write(blob)
    with open(os.path.join(directory, "params.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def load_checkpoint(directory):
    with open(os.path.join(directory, "params.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {meta['format_version']}")
    with open(os.path.join(directory, "params.bin"), "rb") as fh:
        blob = fh.read()
    fields = {}
    offset = 0
    from .head import PARAM_FIELDS  # canonical order
    for name in PARAM_FIELDS:
        shape = tuple(meta["param_shapes"][name])
        size = int(np.prod(shape)) * 4
        chunk = blob[offset:offset + size]
        if len(chunk) < size:
            raise ValueError(f"params.bin truncated in field {name}")
        fields[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)
        offset += size
    if offset != len(blob):
        raise ValueError(f"params.bin has {len(blob) - offset} trailing bytes")
    params = HeadParams(use_projections=meta["use_projections"], **fields)
    return Checkpoint(
        params=params,
        config=TrainConfig.from_dict(meta["config"]),
        history=meta["history"],
        best_epoch=meta["best_epoch"],
        provenance=meta["provenance"],
    )
