"""Optimizer, epoch loop, early stopping, warm start, grid search, checkpoints."""

import math
import os

import numpy as np
import pytest

from conftest import manifest, record
from dysflux.datasets import SEVEN, SIX
from dysflux.features_io import feature_path, write_features
from dysflux.head import init_params, param_items, zero_grads
from dysflux.losses import LossConfig
from dysflux.synth import make_synthetic_dataset
from dysflux.training import (
    Checkpoint, EarlyStopping, TrainConfig, grid_cells, grid_search,
    init_adam_state, load_checkpoint, optimizer_step, save_checkpoint, train,
    warm_start,
)


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    m, mpath, fdir = make_synthetic_dataset(str(out))
    return m, str(mpath), fdir


def quick_config(**kw):
    defaults = dict(learning_rate=3e-4, batch_size=16, max_epochs=3, patience=3, seed=0)
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestOptimizerStep:
    def _setup(self, **cfg_kw):
        params = init_params(0, num_layers=4, feature_dim=6, num_classes=3)
        state = init_adam_state(params)
        config = TrainConfig(**cfg_kw) if cfg_kw else TrainConfig()
        return params, state, config

    def test_zero_grads_no_decay_is_identity(self):
        params, state, config = self._setup(weight_decay=0.0)
        new, _ = optimizer_step(params, zero_grads(params), state, config)
        for (name, a), (_, b) in zip(param_items(params), param_items(new)):
            np.testing.assert_array_equal(a, b, err_msg=name)

    def test_zero_grads_with_decay_scales_params(self):
        params, state, config = self._setup(weight_decay=0.01)
        new, _ = optimizer_step(params, zero_grads(params), state, config)
        factor = 1.0 - config.learning_rate * config.weight_decay
        for name, arr in param_items(new):
            if name == "layer_weights":
                np.testing.assert_array_equal(arr, params.layer_weights,
                                              err_msg="layer weights must not decay")
            else:
                np.testing.assert_allclose(
                    arr, factor * getattr(params, name), rtol=1e-15, err_msg=name
                )

    def test_matches_hand_rolled_reference(self):
        rng = np.random.default_rng(1)
        params, state, config = self._setup(weight_decay=0.02, learning_rate=1e-3)
        grads = {name: rng.standard_normal(arr.shape) for name, arr in param_items(params)}
        # two steps to exercise moment accumulation and bias correction
        p1, s1 = optimizer_step(params, grads, state, config)
        p2, s2 = optimizer_step(p1, grads, s1, config)

        def reference(p, g, m, v, t, decay):
            m = config.adam_beta1 * m + (1 - config.adam_beta1) * g
            v = config.adam_beta2 * v + (1 - config.adam_beta2) * g * g
            m_hat = m / (1 - config.adam_beta1**t)
            v_hat = v / (1 - config.adam_beta2**t)
            upd = config.learning_rate * m_hat / (math.sqrt(v_hat) + config.adam_eps)
            if decay:
                upd += config.learning_rate * config.weight_decay * p
            return p - upd, m, v

        for name, arr in param_items(params):
            decay = name != "layer_weights"
            flat_p = arr.ravel()
            flat_g = grads[name].ravel()
            expect = np.empty_like(flat_p)
            for i in range(flat_p.size):
                p, m, v = flat_p[i], 0.0, 0.0
                for t in (1, 2):
                    p, m, v = reference(p, flat_g[i], m, v, t, decay)
                expect[i] = p
            np.testing.assert_allclose(
                getattr(p2, name).ravel(), expect, rtol=1e-12, err_msg=name
            )
        assert s2.step == 2

    def test_shape_mismatch_raises(self):
        params, state, config = self._setup()
        grads = zero_grads(params)
        grads["main_bias"] = np.zeros(99)
        with pytest.raises(ValueError, match="shape"):
            optimizer_step(params, grads, state, config)


class TestEarlyStopping:
    def test_reference_sequence(self):
        stopper = EarlyStopping(patience=5)
        stops = [stopper.update(epoch, loss) for epoch, loss in
                 enumerate([3.0, 2.0, 2.1, 2.2, 2.3, 2.4, 2.5], start=1)]
        assert stops == [False, False, False, False, False, False, True]
        assert stopper.best_epoch == 2

    def test_any_improvement_resets_counter(self):
        stopper = EarlyStopping(patience=2)
        for epoch, loss in enumerate([1.0, 1.1, 0.9999999], start=1):
            assert not stopper.update(epoch, loss)
        assert stopper.best_epoch == 3


class TestTrain:
    def test_stl_mode_total_equals_main(self, synth):
        m, _, fdir = synth
        cfg = quick_config(loss=LossConfig(w_main=1.0))
        ckpt = train(cfg, m, fdir)
        for h in ckpt.history:
            assert h["dev_total"] == h["dev_main"]
            assert h["train_total"] == h["train_main"]
            assert h["train_aux"] > 0.0  # still recorded, just not in the objective

    def test_best_epoch_attains_minimum_monitored_loss(self, synth):
        m, _, fdir = synth
        ckpt = train(quick_config(max_epochs=5, patience=5), m, fdir)
        devs = [h["dev_total"] for h in ckpt.history]
        assert ckpt.history[ckpt.best_epoch - 1]["dev_total"] == min(devs)

    def test_deterministic_histories_and_checkpoints(self, synth, tmp_path):
        m, _, fdir = synth
        a = train(quick_config(), m, fdir)
        b = train(quick_config(), m, fdir)
        assert a.history == b.history
        save_checkpoint(a, tmp_path / "a")
        save_checkpoint(b, tmp_path / "b")
        assert (tmp_path / "a" / "params.bin").read_bytes() == \
            (tmp_path / "b" / "params.bin").read_bytes()
        assert (tmp_path / "a" / "params.json").read_bytes() == \
            (tmp_path / "b" / "params.json").read_bytes()

    def test_train_loss_non_increasing_early_epochs(self, synth):
        m, _, fdir = synth
        monotone = 0
        for seed in range(10):
            ckpt = train(quick_config(max_epochs=5, patience=5, seed=seed), m, fdir)
            losses = [h["train_total"] for h in ckpt.history]
            monotone += all(b <= a for a, b in zip(losses, losses[1:]))
        assert monotone >= 9

    def test_missing_feature_file_names_clip(self, synth, tmp_path):
        m, _, fdir = synth
        fdir2 = tmp_path / "partial"
        fdir2.mkdir()
        for r in m.records:
            if r.clip_id != "syn00_03":
                os.link(feature_path(fdir, r.clip_id), feature_path(fdir2, r.clip_id))
        with pytest.raises(FileNotFoundError, match="syn00_03"):
            train(quick_config(), m, str(fdir2))

    def test_empty_dev_split_raises(self, tmp_path):
        records = [record(f"c{i}", split="train", labels=["Bl"]) for i in range(4)]
        m = manifest(records)
        fdir = tmp_path / "feat"
        fdir.mkdir()
        rng = np.random.default_rng(0)
        for r in records:
            write_features(feature_path(fdir, r.clip_id), r.clip_id,
                           rng.standard_normal((2, 3, 4)))
        with pytest.raises(ValueError, match="dev"):
            train(quick_config(), m, str(fdir))

    def test_main_loss_monitor_selects_by_main(self, synth):
        m, _, fdir = synth
        ckpt = train(quick_config(max_epochs=5, patience=5, monitor="main_dev_loss"),
                     m, fdir)
        mains = [h["dev_main"] for h in ckpt.history]
        assert ckpt.history[ckpt.best_epoch - 1]["dev_main"] == min(mains)

    def test_english_mod_masking_drops_mod_from_loss(self):
        from dysflux.training import _clip_targets
        rec = record("e0", dataset_id="FBANK", labels=["Bl"])
        masked_cfg = TrainConfig(class_set=SEVEN, mask_english_mod=True)
        targets, mask, aux = _clip_targets(rec, masked_cfg)
        assert mask is not None and not mask[0] and mask[1:].all()
        assert targets[0] == 0 and aux == 1
        # hard-negative default: no mask at all
        default_cfg = TrainConfig(class_set=SEVEN)
        _, no_mask, _ = _clip_targets(rec, default_cfg)
        assert no_mask is None
        # German clips are never masked
        _, de_mask, _ = _clip_targets(record("k0", dataset_id="KSOF", labels=["Mod"]),
                                      masked_cfg)
        assert de_mask is None

    def test_gender_aux_task_masks_unknown(self, synth, tmp_path):
        records = [
            record(f"c{i}", split="train" if i < 4 else "dev", labels=["Bl"],
                   speaker=f"sp{i // 4}", gender=("f", "m", "unknown", "f")[i % 4])
            for i in range(8)
        ]
        m = manifest(records)
        fdir = tmp_path / "feat"
        fdir.mkdir()
        rng = np.random.default_rng(1)
        for r in records:
            write_features(feature_path(fdir, r.clip_id), r.clip_id,
                           rng.standard_normal((2, 3, 4)))
        ckpt = train(quick_config(aux_task="gender", max_epochs=2, patience=2), m, str(fdir))
        assert len(ckpt.history) == 2
        assert all(np.isfinite(h["dev_aux"]) for h in ckpt.history)


class TestWarmStart:
    def _checkpoint(self, class_set, seed=3):
        cfg = TrainConfig(class_set=class_set, seed=seed)
        params = init_params(seed, num_layers=4, feature_dim=6,
                             num_classes=cfg.num_classes)
        return Checkpoint(params=params, config=cfg, history=[], best_epoch=0,
                          provenance={})

    def test_same_class_set_copies_everything(self):
        src = self._checkpoint(SEVEN)
        out = warm_start(src, TrainConfig(class_set=SEVEN, seed=9))
        for (name, a), (_, b) in zip(param_items(src.params), param_items(out)):
            np.testing.assert_array_equal(a, b, err_msg=name)

    def test_six_to_seven_adds_fresh_mod_row(self):
        src = self._checkpoint(SIX)
        new_cfg = TrainConfig(class_set=SEVEN, seed=11)
        out = warm_start(src, new_cfg)
        assert out.main_weight.shape == (7, 6)
        np.testing.assert_array_equal(out.main_weight[1:], src.params.main_weight)
        np.testing.assert_array_equal(out.main_bias[1:], src.params.main_bias)
        fresh = init_params(11, num_layers=4, feature_dim=6, num_classes=7)
        np.testing.assert_array_equal(out.main_weight[0], fresh.main_weight[0])
        np.testing.assert_array_equal(out.layer_weights, src.params.layer_weights)

    def test_seven_to_six_drops_mod_row(self):
        src = self._checkpoint(SEVEN)
        out = warm_start(src, TrainConfig(class_set=SIX, seed=5))
        assert out.main_weight.shape == (6, 6)
        np.testing.assert_array_equal(out.main_weight, src.params.main_weight[1:])
        np.testing.assert_array_equal(out.main_bias, src.params.main_bias[1:])
        np.testing.assert_array_equal(out.q_weight, src.params.q_weight)

    def test_dimension_mismatch_rejected_at_train_time(self, synth):
        m, _, fdir = synth
        src = self._checkpoint(SEVEN)  # feature_dim 6, synth features are dim 16
        params = warm_start(src, quick_config())
        with pytest.raises(ValueError, match="warm-start"):
            train(quick_config(), m, fdir, initial_params=params)

    def test_warm_start_lineage_recorded(self, synth):
        m, _, fdir = synth
        ckpt = train(quick_config(max_epochs=1, patience=1), m, fdir,
                     warm_start_from="/some/run")
        assert ckpt.provenance["warm_start"] == "/some/run"


class TestGridSearch:
    def test_default_grid_has_135_cells(self):
        assert len(grid_cells()) == 135

    def test_explicit_grid_enumeration(self):
        cells = grid_cells({"w_main": [0.9, 0.5], "alpha": [0.7], "gamma": [1, 3]})
        assert cells == [(0.5, 0.7, 1), (0.5, 0.7, 3), (0.9, 0.7, 1), (0.9, 0.7, 3)]

    def test_single_cell_equals_plain_train(self, synth):
        m, _, fdir = synth
        base = quick_config(max_epochs=2, patience=2)
        result = grid_search(base, m, fdir,
                             grid={"w_main": [0.9], "alpha": [0.7], "gamma": [3.0]})
        direct = train(base, m, fdir)
        assert result.best_checkpoint.history == direct.history
        assert len(result.ranked) == 1

    def test_equal_losses_break_ties_lexicographically(self, synth):
        m, _, fdir = synth
        # weighted BCE ignores (alpha, gamma) and w_main=1 ignores the aux loss,
        # so every cell trains identically: pure tie-break ordering remains
        base = quick_config(max_epochs=1, patience=1,
                            loss=LossConfig(w_main=1.0, main_loss_kind="weighted_bce"))
        result = grid_search(base, m, fdir,
                             grid={"w_main": [1.0], "alpha": [0.3, 0.1], "gamma": [2.0, 1.0]})
        cells = [(c.w_main, c.alpha, c.gamma) for c in result.ranked]
        assert cells == [(1.0, 0.1, 1.0), (1.0, 0.1, 2.0), (1.0, 0.3, 1.0), (1.0, 0.3, 2.0)]
        losses = {c.dev_loss for c in result.ranked}
        assert len(losses) == 1

    def test_parallel_jobs_match_serial(self, synth):
        m, _, fdir = synth
        base = quick_config(max_epochs=1, patience=1)
        grid = {"w_main": [0.8, 0.9], "alpha": [0.7], "gamma": [3.0]}
        serial = grid_search(base, m, fdir, grid=grid, jobs=1)
        parallel = grid_search(base, m, fdir, grid=grid, jobs=2)
        assert [(c.w_main, c.dev_loss) for c in serial.ranked] == \
            [(c.w_main, c.dev_loss) for c in parallel.ranked]


class TestCheckpointIO:
    def test_round_trip(self, synth, tmp_path):
        m, _, fdir = synth
        ckpt = train(quick_config(max_epochs=2, patience=2), m, fdir)
        save_checkpoint(ckpt, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        assert loaded.best_epoch == ckpt.best_epoch
        assert loaded.history == ckpt.history
        assert loaded.config.to_dict() == ckpt.config.to_dict()
        for (name, a), (_, b) in zip(param_items(ckpt.params), param_items(loaded.params)):
            np.testing.assert_array_equal(a.astype(np.float32).astype(np.float64), b,
                                          err_msg=name)

    def test_truncated_blob_rejected(self, synth, tmp_path):
        m, _, fdir = synth
        ckpt = train(quick_config(max_epochs=1, patience=1), m, fdir)
        save_checkpoint(ckpt, tmp_path / "ck")
        blob = (tmp_path / "ck" / "params.bin").read_bytes()
        (tmp_path / "ck" / "params.bin").write_bytes(blob[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(tmp_path / "ck")


class TestTrainConfig:
    def test_patience_bounded_by_max_epochs(self):
        with pytest.raises(ValueError, match="patience"):
            TrainConfig(patience=21, max_epochs=20)

    def test_defaults_match_protocol(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 3e-5
        assert cfg.batch_size == 256
        assert cfg.max_epochs == 20
        assert cfg.patience == 5
        assert (cfg.loss.w_main, cfg.loss.alpha, cfg.loss.gamma) == (0.9, 0.7, 3.0)

    def test_round_trips_through_dict(self):
        cfg = TrainConfig(seed=5, class_set="six", monitor="main_dev_loss")
        back = TrainConfig.from_dict(cfg.to_dict())
        assert back.to_dict() == cfg.to_dict()
        assert back.class_set == SIX
