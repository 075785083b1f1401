from dataclasses import replace

import numpy as np
import pytest

from seedloc.net.model import ArchConfig, NetworkParams
from seedloc.net.train import (PlateauSchedule, TrainConfig, TrainingDiverged, prepare_sample, train,
                               write_training_outputs)
from seedloc.phantom import PhantomConfig, render_phantom

TINY = ArchConfig(levels=2, base_channels=4)
PH = PhantomConfig(seed_count=3, shape=(32, 32, 32), margin_mm=3.0, min_separation_mm=5.0, cluster_fraction=0.0)
CFG = TrainConfig(voi_shape=(16, 16, 16), target_scale=100.0, weight_floor=0.1, batch_size=2,
                  learning_rate=0.01, voi_center="volume")


def samples(n, cfg=CFG, seed0=0):
    out = []
    for i in range(n):
        r = render_phantom(replace(PH, rng_seed=seed0 + i))
        out.append(prepare_sample(r.volume, r.annotations, cfg, f"s{i}"))
    return out


def test_sample_preparation():
    s = samples(1)[0]
    assert s.image.shape == (16, 16, 16) and s.target.shape == (16, 16, 16)
    assert 0.0 <= s.image.min() and s.image.max() <= 1.0
    assert s.grid.spacing_mm == (0.5, 0.5, 0.5)


def test_training_is_deterministic(tmp_path):
    data = samples(3)
    cfg = replace(CFG, max_rounds=2)
    a = train(data, TINY, cfg)
    b = train(data, TINY, cfg)
    write_training_outputs(a, tmp_path / "a")
    write_training_outputs(b, tmp_path / "b")
    for name in ("model.ckpt.bin", "model.ckpt.json", "loss.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    c = train(data, TINY, replace(cfg, rng_seed=1))
    assert c.checkpoint.tensors["head.weight"].tobytes() != a.checkpoint.tensors["head.weight"].tobytes()


def test_overfits_single_phantom():
    data = samples(1)
    cfg = replace(CFG, max_rounds=60, batch_size=1, augment=False, validation_fraction=0.0,
                  early_stop_patience=60, lr_patience=60)
    res = train(data, TINY, cfg)
    first, last = res.history[0]["train_loss"], min(h["train_loss"] for h in res.history)
    assert last < 0.1 * first


def test_best_checkpoint_and_history():
    data = samples(3)
    res = train(data, TINY, replace(CFG, max_rounds=3))
    vals = [h["val_loss"] for h in res.history]
    assert res.best_round == int(np.argmin(vals)) + 1
    meta = res.checkpoint.training_meta
    assert meta["best_round"] == res.best_round and len(meta["loss_history"]) == 3
    assert len(meta["validation_samples"]) == 1 and len(meta["train_samples"]) == 2
    net = NetworkParams.from_checkpoint(res.checkpoint)
    assert net.arch.input_shape == (16, 16, 16) and net.meta["target_scale"] == 100.0
    assert res.checkpoint.optimizer_state["step"] == res.best_round  # one batch of two per round


def test_plateau_schedule():
    s = PlateauSchedule(lr_patience=2, decay_factor=0.5, stop_patience=5)
    lr = 1.0
    trace = []
    for v in [1.0, 0.9, 0.95, 0.95, 0.95, 0.95, 0.8, 0.9, 0.9, 0.9, 0.9, 0.9]:
        improved, lr, stop = s.update(v, lr)
        trace.append((improved, lr, stop))
        if stop:
            break
    assert [t[1] for t in trace] == [1, 1, 1, 0.5, 0.5, 0.25, 0.25, 0.25, 0.125, 0.125, 0.0625, 0.0625]
    assert [t[0] for t in trace].count(True) == 3
    assert trace[-1][2] and not any(t[2] for t in trace[:-1])


def test_equal_loss_is_not_improvement():
    s = PlateauSchedule(1, 0.5, 10)
    assert s.update(1.0, 1.0)[0]
    assert s.update(1.0, 1.0) == (False, 0.5, False)


def test_early_stop_in_training():
    data = samples(2)
    # a vanishing learning rate cannot improve validation after the first rounds
    res = train(data, TINY, replace(CFG, max_rounds=30, learning_rate=1e-30, early_stop_patience=2, lr_patience=1))
    assert res.stopped_early and len(res.history) < 30
    lrs = [h["lr"] for h in res.history]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_divergence_aborts():
    data = samples(2)
    data[0].target[...] = np.inf
    with pytest.raises((TrainingDiverged, FloatingPointError)):
        train(data, TINY, replace(CFG, max_rounds=2, validation_fraction=0.0))


def test_requires_training_volumes():
    with pytest.raises(ValueError):
        train([], TINY, CFG)
    with pytest.raises(ValueError):
        train(samples(1), TINY, replace(CFG, validation_fraction=0.5))


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrainConfig(voi_center="middle")
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    assert TrainConfig.from_dict(CFG.to_dict()) == CFG
