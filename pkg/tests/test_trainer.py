import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import numeric_grad
from synthvision import data as D
from synthvision import toy, trainer, vit
from synthvision.core import Rng, Tensor
from synthvision.errors import ConfigError, DataError, NonFiniteError

# ---------------------------------------------------------------- rules


def run_plateau(losses, lr=1e-4, **kw):
    cfg = trainer.PlateauConfig(**kw)
    state = trainer.PlateauState(lr)
    lrs = []
    for loss in losses:
        state = trainer.plateau_update(state, loss, cfg)
        lrs.append(state.lr)
    return lrs


def run_stopper(losses, **kw):
    cfg = trainer.EarlyStopConfig(**kw)
    state = trainer.EarlyStopState()
    for loss in losses:
        state = trainer.early_stop_update(state, loss, cfg)
        if state.stop:
            return state
    return state


def test_plateau_trace():
    lrs = run_plateau([1.0, 0.9, 0.95, 0.93], patience=2, factor=0.5)
    assert lrs == [1e-4, 1e-4, 1e-4, 5e-5]


def test_plateau_strictly_decreasing_keeps_lr():
    assert run_plateau([1.0 - 0.01 * i for i in range(30)], patience=1) == [1e-4] * 30


def test_plateau_clamps_at_min_lr():
    lrs = run_plateau([1.0] * 10, lr=1e-6, patience=1, min_lr=1e-6)
    assert lrs == [1e-6] * 10
    lrs = run_plateau([1.0] * 4, lr=3e-6, patience=1, min_lr=1e-6)
    assert lrs == [3e-6, 1.5e-6, 1e-6, 1e-6]


def test_plateau_counter_resets_after_reduction():
    lrs = run_plateau([1.0, 1.0, 1.0, 1.0, 1.0], patience=2, factor=0.5)
    assert lrs == [1e-4, 1e-4, 5e-5, 5e-5, 2.5e-5]


def test_early_stop_patience_one():
    state = run_stopper([1.0, 1.0], patience=1)
    assert state.stop and state.epoch == 2 and state.best_epoch == 1


def test_early_stop_monotone_never_stops():
    state = run_stopper([1.0 / (i + 1) for i in range(50)], patience=1, min_delta=0.0)
    assert not state.stop and state.best_epoch == 50


def test_early_stop_after_one_real_gain():
    # 1.0 -> 0.99 clears min_delta, so the three stalled epochs are 3, 4 and 5
    assert not run_stopper([1.0, 0.99, 0.99, 0.99], patience=3, min_delta=0.005).stop
    state = run_stopper([1.0, 0.99, 0.99, 0.99, 0.99], patience=3, min_delta=0.005)
    assert state.stop and state.epoch == 5 and state.best_epoch == 2


def test_early_stop_min_delta_counts_small_gains_as_stalls():
    # 0.99 -> 0.989 is within min_delta, so epochs 3..5 do not improve
    state = run_stopper([1.0, 0.99, 0.989, 0.9895, 0.9899], patience=3, min_delta=0.005)
    assert state.stop and state.epoch == 5 and state.best_epoch == 2


@pytest.mark.parametrize("kw", [{"factor": 1.0}, {"factor": 0.0}, {"patience": 0}])
def test_plateau_config_invariants(kw):
    with pytest.raises(ConfigError):
        trainer.PlateauConfig(**kw)


def test_train_config_invariants_and_roundtrip():
    with pytest.raises(ConfigError):
        trainer.TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        trainer.TrainConfig.from_dict({"batch_size": 32, "bogus": 1})
    cfg = trainer.TrainConfig(image_size=32, max_epochs=3, plateau=trainer.PlateauConfig(patience=2))
    assert trainer.TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.batch_size == 32 and cfg.learning_rate == 1e-4


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 2.0), min_size=1, max_size=40), st.integers(1, 4), st.integers(1, 6),
       st.sampled_from([0.0, 1e-4, 0.05]))
def test_retrace_agrees_with_stateful_rules(losses, p_pat, e_pat, delta):
    cfg = trainer.TrainConfig(plateau=trainer.PlateauConfig(patience=p_pat, min_delta=delta),
                              early_stop=trainer.EarlyStopConfig(patience=e_pat, min_delta=delta))
    plateau = trainer.PlateauState(cfg.learning_rate)
    stopper = trainer.EarlyStopState()
    lrs, stopped = [], None
    for epoch, loss in enumerate(losses, start=1):
        lrs.append(plateau.lr)
        plateau = trainer.plateau_update(plateau, loss, cfg.plateau)
        stopper = trainer.early_stop_update(stopper, loss, cfg.early_stop)
        if stopper.stop:
            stopped = epoch
            break
    assert trainer.retrace(losses, cfg) == (lrs, stopped)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


# ---------------------------------------------------------------- loss


def test_cross_entropy_uniform_and_perfect():
    loss = trainer.cross_entropy(Tensor(np.zeros((4, 3))), [0, 1, 2, 1])
    assert abs(float(loss.data) - math.log(3)) < 1e-15
    logits = np.zeros((3, 3))
    logits[np.arange(3), [2, 0, 1]] = 1000.0
    assert float(trainer.cross_entropy(Tensor(logits), [2, 0, 1]).data) < 1e-12


def test_cross_entropy_gradient():
    rng = Rng(3)
    z = rng.normal((6, 3))
    labels = np.array([0, 2, 1, 1, 0, 2])
    t = Tensor(z, requires_grad=True)
    trainer.cross_entropy(t, labels).backward()
    num = numeric_grad(lambda a: float(trainer.cross_entropy(Tensor(a), labels).data), [z.copy()], 0)
    assert np.max(np.abs(t.grad - num)) / np.max(np.abs(num)) < 1e-5
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    onehot = np.eye(3)[labels]
    np.testing.assert_allclose(t.grad, (p - onehot) / 6, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("labels", [[0, 3], [-1, 0], [0.5, 1.0]])
def test_cross_entropy_rejects_bad_labels(labels):
    with pytest.raises(DataError):
        trainer.cross_entropy(Tensor(np.zeros((2, 3))), np.array(labels))


# ---------------------------------------------------------------- loop


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    records = []
    for split, per_class in (("train", 10), ("validation", 4)):
        for li, label in enumerate(D.LABELS):
            for i in range(per_class):
                img = toy.RENDERERS[label](Rng(7).fork(li, i, len(split)))
                rel = f"{split}/{label}_{i}.png"
                D.write_png(root / rel, img)
                records.append(D.SampleRecord(rel, label, "real", split))
    return D.DatasetManifest(records, None, root)


TINY = vit.get_preset("tiny")


def _cfg(**kw):
    base = dict(image_size=32, max_epochs=5, seed=11, learning_rate=1e-3)
    base.update(kw)
    return trainer.TrainConfig(**base)


def test_zero_epochs_returns_initial_params(tiny_manifest):
    p0 = vit.init_params(TINY, Rng(0), np.float32)
    res = trainer.train(TINY, p0, _cfg(max_epochs=0), tiny_manifest)
    assert res.log.epochs == [] and res.best_checkpoint is None
    for k in p0.tensors:
        np.testing.assert_array_equal(res.params.tensors[k], p0.tensors[k])


def test_smoke_loss_decreases_and_artifacts(tiny_manifest, tmp_path):
    res = trainer.train(TINY, None, _cfg(), tiny_manifest, out_dir=tmp_path)
    log = res.log
    assert len(log.epochs) == 5 and log.terminal_reason == "max_epochs"
    assert log.epochs[-1].train_loss < log.initial_train_loss
    assert (tmp_path / "train_log.jsonl").exists() and (tmp_path / "train_timing.json").exists()
    reread = trainer.TrainLog.read(tmp_path / "train_log.jsonl")
    assert reread.val_losses == log.val_losses and reread.terminal_reason == "max_epochs"
    # the stored best checkpoint reproduces the logged best validation loss
    best = vit.load_checkpoint(res.best_checkpoint)
    x_val, y_val = trainer.load_split(tiny_manifest, "validation", 32, np.float32)
    loss, _ = trainer.evaluate_loss(best, x_val, y_val)
    assert abs(loss - log.best_val_loss) <= 1e-6
    assert log.best_val_loss == min(log.val_losses)


def test_runs_are_reproducible(tiny_manifest, tmp_path):
    a = trainer.train(TINY, None, _cfg(max_epochs=2), tiny_manifest, out_dir=tmp_path / "a")
    b = trainer.train(TINY, None, _cfg(max_epochs=2), tiny_manifest, out_dir=tmp_path / "b")
    assert (tmp_path / "a/train_log.jsonl").read_bytes() == (tmp_path / "b/train_log.jsonl").read_bytes()
    assert (tmp_path / "a/best.ckpt").read_bytes() == (tmp_path / "b/best.ckpt").read_bytes()
    for k in a.params.tensors:
        assert a.params.tensors[k].tobytes() == b.params.tensors[k].tobytes()


def test_logged_schedule_retraces(tiny_manifest):
    cfg = _cfg(max_epochs=8, learning_rate=3e-3, plateau=trainer.PlateauConfig(patience=1, min_delta=0.02),
               early_stop=trainer.EarlyStopConfig(patience=3, min_delta=0.02))
    log = trainer.train(TINY, None, cfg, tiny_manifest).log
    lrs, stopped = trainer.retrace(log.val_losses, cfg)
    assert lrs == log.lrs
    assert (stopped is not None) == (log.terminal_reason == "early_stop")
    assert stopped is None or stopped == len(log.epochs)
    assert all(b <= a for a, b in zip(log.lrs, log.lrs[1:]))


def test_nan_loss_aborts_with_location(tiny_manifest):
    p0 = vit.init_params(TINY, Rng(0), np.float32)
    p0.tensors["head_out.bias"][:] = np.nan
    with pytest.raises(NonFiniteError, match="epoch 1, batch 0"):
        trainer.train(TINY, p0, _cfg(), tiny_manifest)


def test_image_size_must_match_model(tiny_manifest):
    with pytest.raises(ConfigError):
        trainer.train(TINY, None, trainer.TrainConfig(max_epochs=1), tiny_manifest)


def test_policy_violation_blocks_training(tiny_manifest):
    strict = D.DatasetManifest(tiny_manifest.records, D.reference_policy(), tiny_manifest.root)
    with pytest.raises(DataError):
        trainer.train(TINY, None, _cfg(), strict)


def test_empty_validation_split(tiny_manifest):
    only_train = D.DatasetManifest([r for r in tiny_manifest.records if r.split == "train"], None,
                                   tiny_manifest.root)
    with pytest.raises(DataError, match="validation"):
        trainer.train(TINY, None, _cfg(), only_train)
