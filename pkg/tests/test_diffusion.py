import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import rel_error
from synthvision import diffusion as D
from synthvision.core import Rng, Tensor
from synthvision.errors import DataError, ParameterError, ShortageError

SMALL = D.DenoiserConfig(image_size=4, channels=1, widths=(4, 6), time_dim=8, embed_dim=8, num_classes=2)


def test_schedule_examples():
    np.testing.assert_allclose(D.build_schedule(1, 0.1, 0.1).alpha_bars, [0.9])
    np.testing.assert_allclose(D.build_schedule(2, 0.1, 0.2).alpha_bars, [0.9, 0.72], rtol=1e-15)
    assert D.build_schedule(1000, 1e-4, 0.02).alpha_bars[999] < 0.01


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(ParameterError):
        D.build_schedule(*args)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 400), st.floats(1e-5, 0.01), st.floats(0.0, 0.05))
def test_schedule_invariants(T, start, spread):
    sch = D.build_schedule(T, start, start + spread)
    assert np.all((sch.betas > 0) & (sch.betas < 1))
    assert np.all((sch.alpha_bars > 0) & (sch.alpha_bars < 1))
    assert np.all(np.diff(sch.alpha_bars) < 0)
    brute = [math.prod(1.0 - b for b in sch.betas[: t + 1]) for t in range(T)]
    np.testing.assert_allclose(sch.alpha_bars, brute, rtol=0, atol=1e-12)


def test_q_sample_hand_value():
    sch = D.build_schedule(2, 0.1, 0.2)
    assert abs(float(D.q_sample(np.float64(1.0), 1, np.float64(1.0), sch)) - (math.sqrt(0.72) + math.sqrt(0.28))) < 1e-12
    # quoted to five places as 1.37780; the exact value is 1.377680
    assert abs(math.sqrt(0.72) + math.sqrt(0.28) - 1.37780) < 5e-4


def test_q_sample_boundaries():
    sch = D.build_schedule(1, 1e-4, 1e-4)
    x0 = np.random.default_rng(0).normal(size=(4, 4))
    eps = np.random.default_rng(1).normal(size=(4, 4))
    out = D.q_sample(x0, 0, eps, sch)
    bound = (1 - math.sqrt(0.9999)) * np.abs(x0).max() + math.sqrt(1e-4) * np.abs(eps).max()
    assert np.abs(out - x0).max() <= bound + 1e-15
    sch = D.build_schedule(50, 1e-4, 0.02)
    np.testing.assert_array_equal(D.q_sample(x0, 30, np.zeros_like(x0), sch), math.sqrt(sch.alpha_bars[30]) * x0)


def test_q_sample_rejects_bad_t():
    sch = D.build_schedule(10)
    with pytest.raises(ParameterError):
        D.q_sample(np.zeros(3), 10, np.zeros(3), sch)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 99), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_q_sample_linear(t, a, b, seed):
    sch = D.build_schedule(100)
    g = np.random.default_rng(seed)
    x1, x2, e1, e2 = (g.normal(size=(2, 3, 3)) for _ in range(4))
    lhs = D.q_sample(a * x1 + b * x2, t, a * e1 + b * e2, sch)
    rhs = a * D.q_sample(x1, t, e1, sch) + b * D.q_sample(x2, t, e2, sch)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    assert lhs.shape == x1.shape


def test_q_sample_per_sample_steps():
    sch = D.build_schedule(10)
    x0 = np.ones((3, 2, 2, 1))
    out = D.q_sample(x0, np.array([0, 5, 9]), np.zeros_like(x0), sch)
    for i, t in enumerate([0, 5, 9]):
        np.testing.assert_allclose(out[i], math.sqrt(sch.alpha_bars[t]))


def _oracle_denoiser(store):
    # returns the exact noise by inverting q_sample with the stored clean batch
    def fn(params, weights, x_t, t, cond):
        ab = store["schedule"].alpha_bars[t].reshape(-1, 1, 1, 1)
        return Tensor((x_t.data - np.sqrt(ab) * store["x0"]) / np.sqrt(1 - ab))
    return fn


def _zero_denoiser(params, weights, x_t, t, cond):
    return Tensor(np.zeros_like(x_t.data)) * weights["out.bias"].reshape(1, 1, 1, -1).sum()


def test_train_step_oracle_stub_zero_loss():
    sch = D.build_schedule(50)
    x0 = np.random.default_rng(0).uniform(-1, 1, size=(8, 4, 4, 1))
    params = D.init_denoiser(SMALL, Rng(0))
    store = {"schedule": sch, "x0": x0}
    loss, _ = D.diffusion_train_step(params, D.Batch(x0, D.Condition.make(8, 0)), sch, Rng(1),
                                     denoiser=_oracle_denoiser(store))
    assert loss < 1e-20


def test_train_step_zero_stub_unit_loss():
    sch = D.build_schedule(50)
    cfg = D.DenoiserConfig(image_size=16, channels=3, widths=(4, 4), time_dim=4, embed_dim=4, num_classes=1)
    x0 = np.random.default_rng(0).uniform(-1, 1, size=(64, 16, 16, 3))
    loss, _ = D.diffusion_train_step(D.init_denoiser(cfg, Rng(0)), D.Batch(x0, D.Condition.make(64, 0)), sch,
                                     Rng(2), denoiser=_zero_denoiser)
    assert abs(loss - 1.0) < 0.05


def test_initial_denoiser_predicts_zero():
    params = D.init_denoiser(SMALL, Rng(0))
    out = D.denoiser_apply(SMALL, {k: Tensor(v) for k, v in params.tensors.items()},
                           np.ones((2, 4, 4, 1)), np.array([0, 3]), D.Condition.make(2, 1))
    assert out.shape == (2, 4, 4, 1)
    assert np.all(out.data == 0)


def test_train_step_gradient_matches_finite_differences():
    sch = D.build_schedule(20)
    rng = np.random.default_rng(0)
    params = D.init_denoiser(SMALL, Rng(0))
    params.tensors = {k: v + rng.normal(scale=0.3, size=v.shape) for k, v in params.tensors.items()}
    x0 = rng.uniform(-1, 1, size=(3, 4, 4, 1))
    batch = D.Batch(x0, D.Condition.make(3, 1, "arm", "dark"))
    _, grads = D.diffusion_train_step(params, batch, sch, Rng(5))
    h = 1e-5
    for name in params.tensors:
        arr = params.tensors[name]
        flat = arr.reshape(-1)
        idx = rng.choice(flat.size, size=min(3, flat.size), replace=False)
        numeric = []
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up, _ = D.diffusion_train_step(params, batch, sch, Rng(5))
            flat[i] = orig - h
            down, _ = D.diffusion_train_step(params, batch, sch, Rng(5))
            flat[i] = orig
            numeric.append((up - down) / (2 * h))
        assert rel_error(grads[name].reshape(-1)[idx], numeric, floor=1e-6) < 1e-3, name


def test_sampling_deterministic_and_count():
    sch = D.build_schedule(5)
    params = D.init_denoiser(SMALL, Rng(0))
    params.tensors["out.bias"] = np.full(4, 0.1)
    a = D.ddpm_sample(params, sch, 7, 1, Rng(3), batch_size=3)
    b = D.ddpm_sample(params, sch, 7, 1, Rng(3), batch_size=7)
    assert a.shape == (7, 4, 4, 1)
    assert a.tobytes() == b.tobytes()
    assert np.all(np.abs(a) <= 1)
    assert D.ddpm_sample(params, sch, 0, 1, Rng(3)).shape == (0, 4, 4, 1)


def test_sampling_returns_exact_request_count():
    sch = D.build_schedule(2)
    cfg = D.DenoiserConfig(image_size=4, channels=1, widths=(2, 2), time_dim=2, embed_dim=2, num_classes=1)
    out = D.ddpm_sample(D.init_denoiser(cfg, Rng(0)), sch, 200, 0, Rng(1), batch_size=64)
    assert len(out) == 200


def test_single_step_sampling_hand_trace():
    sch = D.build_schedule(1, 0.1, 0.1)
    params = D.init_denoiser(SMALL, Rng(0))
    out = D.ddpm_sample(params, sch, 2, 0, Rng(11))
    # one reverse step with eps_hat = 0 and no added noise: x0 = x_T / sqrt(1 - beta)
    x_T = np.stack([Rng(11).fork(i).normal((4, 4, 1)) for i in range(2)])
    np.testing.assert_allclose(out, np.clip(x_T / math.sqrt(0.9), -1, 1), rtol=1e-14)


def test_sampling_single_point_oracle_recovers_point():
    # data concentrated on one image c: the exact noise predictor is
    # (x_t - sqrt(ab_t) c) / sqrt(1 - ab_t), and ancestral sampling must land on c
    sch = D.build_schedule(30, 1e-3, 0.2)
    c = np.random.default_rng(4).uniform(-0.9, 0.9, size=(4, 4, 1))
    ab = sch.alpha_bars

    def oracle(params, weights, x_t, t, cond):
        a = ab[t].reshape(-1, 1, 1, 1)
        return Tensor((x_t.data - np.sqrt(a) * c) / np.sqrt(1.0 - a))

    params = D.init_denoiser(SMALL, Rng(0), np.float64)
    for clip in (False, True):
        out = D.ddpm_sample(params, sch, 5, 0, Rng(2), denoiser=oracle, clip_denoised=clip)
        assert np.max(np.abs(out - c)) < 1e-10


def test_guide_set_size_check():
    g = D.GuideSet(0, [np.zeros((4, 4, 1))] * 14, "arm", "fair")
    with pytest.raises(DataError, match="14.*15"):
        g.check_size(15)
    with pytest.raises(DataError):
        D.GuideSet(0, [], "elbow")


def test_finetune_zero_steps_unchanged():
    base = D.init_denoiser(SMALL, Rng(0))
    g = D.GuideSet(0, [np.full((4, 4, 1), 0.5)] * 3)
    out = D.few_shot_finetune(base, g, 0, None, Rng(1))
    assert all(np.array_equal(out.tensors[k], v) for k, v in base.tensors.items())


def test_finetune_empty_guide():
    with pytest.raises(DataError):
        D.few_shot_finetune(D.init_denoiser(SMALL, Rng(0)), D.GuideSet(0, []), 5, None, Rng(1))


def test_finetune_prior_off_matches_plain():
    base = D.init_denoiser(SMALL, Rng(0))
    g = D.GuideSet(0, [np.random.default_rng(i).random((4, 4, 1)) for i in range(5)])
    sch = D.build_schedule(10)
    plain = D.few_shot_finetune(base, g, 6, None, Rng(1), sch, batch_size=4)
    off = D.few_shot_finetune(base, g, 6, D.PriorConfig(weight=0.0, ratio=0.0), Rng(1), sch, batch_size=4)
    assert all(plain.tensors[k].tobytes() == off.tensors[k].tobytes() for k in plain.tensors)
    assert any(not np.array_equal(plain.tensors[k], base.tensors[k]) for k in base.tensors)


def test_pooled_features():
    img = np.arange(16, dtype=float).reshape(1, 4, 4, 1)
    np.testing.assert_allclose(D.pooled_features(img, 2), [[2.5, 4.5, 10.5, 12.5]])


def _guide(val=0.5, n=3):
    return D.GuideSet(0, [np.full((4, 4, 3), val)] * n)


def test_select_200_keeps_100_to_150():
    rng = np.random.default_rng(0)
    cands = [rng.random((4, 4, 3)) for _ in range(200)]
    sel = D.select_images(cands, 100, 150, _guide())
    assert 100 <= len(sel.indices) <= 150
    kept = set(sel.indices.tolist())
    worst_kept = min(sel.scores[i] for i in kept)
    assert all(sel.scores[i] <= worst_kept for i in range(200) if i not in kept)


def test_select_identical_candidates_by_index():
    cands = [np.full((4, 4, 3), 0.2)] * 200
    sel = D.select_images(cands, 100, 150, _guide())
    assert sel.indices.tolist() == list(range(150))


def test_select_shortage():
    with pytest.raises(ShortageError, match="50.*100"):
        D.select_images([np.zeros((4, 4, 3))] * 50, 100, 150, _guide())


def test_select_prefers_guide_like():
    near = [np.full((4, 4, 3), 0.5 + 0.01 * i) for i in range(5)]
    far = [np.full((4, 4, 3), 0.0)] * 5
    sel = D.select_images(far + near, 2, 5, _guide(0.5), percentile=50)
    assert sorted(sel.indices.tolist()) == [5, 6, 7, 8, 9]


def test_denoiser_checkpoint_roundtrip(tmp_path):
    p = D.init_denoiser(SMALL, Rng(0), np.float32)
    path = D.save_denoiser(p, tmp_path / "d.ckpt", extra={"schedule": {"T": 5}})
    q, extra = D.load_denoiser(path)
    assert q.config == SMALL and extra == {"schedule": {"T": 5}}
    assert all(q.tensors[k].tobytes() == v.tobytes() for k, v in p.tensors.items())
