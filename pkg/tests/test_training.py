import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ihdnet import autodiff as ad
from ihdnet.model import ConfigError, LogitsPair, Model, ModelConfig
from ihdnet.training import (AugmentPolicy, LossBundle, TrainConfig, TrainingError, _finish_step, apply_augment,
                             class_weights, evaluate, fit, lr_at, supervised_loss, train_step, write_history)

STATIC = (1, 1, 1, 1, 1, 2)


# config ------------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"warmup_iters": 2000},
    {"lambda_u": -1},
    {"static_weights": (1, 1, 1, 1, 1)},
    {"static_weights": (1, 1, 1, 1, 0, 2)},
    {"weighting": "focal"},
    {"augment": "strong"},
    {"dw_min": 3, "dw_max": 2},
    {"unlabeled_ratio": 0},
])
def test_config_invariants(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


# class weights -----------------------------------------------------------------

def test_static_weights():
    assert class_weights("static").tolist() == [1, 1, 1, 1, 1, 2]


def test_dynamic_equal_prevalence_is_one():
    w = class_weights("dynamic", positives=[30] * 6, count=100)
    assert np.allclose(w, 1.0, atol=1e-15)


def test_dynamic_on_competition_counts():
    # training-set positives per class out of 677485 slices
    w = class_weights("dynamic", positives=[2841, 32814, 23955, 31884, 42438, 97510], count=677485)
    expected = [2.5350961732394035, 0.7460540154423956, 0.8731710420488515,
                0.7568560133579033, 0.6560303105011271, 0.4327924454103193]
    assert np.allclose(w, expected, rtol=1e-12)
    assert np.argmax(w) == 0 and w.max() <= 5


def test_dynamic_clamps_before_rescaling():
    w = class_weights("dynamic", positives=[0, 50, 50, 50, 50, 50], count=100000, lo=0.5, hi=5)
    raw = np.clip(np.sqrt(np.mean([1, 51, 51, 51, 51, 51]) / np.array([1, 51, 51, 51, 51, 51])), 0.5, 5)
    assert np.allclose(w, raw / raw.mean(), rtol=1e-12)


def test_both_is_product():
    pos, n = [5, 10, 20, 40, 80, 100], 400
    assert np.array_equal(class_weights("both", STATIC, pos, n),
                          np.array(STATIC) * class_weights("dynamic", STATIC, pos, n))


def test_class_weights_rejects_negative_counts():
    with pytest.raises(ValueError):
        class_weights("dynamic", positives=[-1, 0, 0, 0, 0, 0], count=3)


@given(st.lists(st.integers(0, 10_000), min_size=6, max_size=6), st.integers(0, 10_000),
       st.floats(0.1, 2.0), st.sampled_from(["static", "dynamic", "both"]))
def test_weights_positive_and_dynamic_mean_one(pos, extra, alpha, mode):
    count = max(pos) + extra
    w = class_weights(mode, STATIC, pos, count, alpha=alpha)
    assert np.all(w > 0)
    if mode == "dynamic":
        assert abs(w.mean() - 1) < 1e-12


# schedule ----------------------------------------------------------------------

def test_lr_examples():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.0
    assert lr_at(300, cfg) == 0.001
    assert abs(lr_at(1150, cfg) - 0.0005) < 1e-18
    assert abs(lr_at(2000, cfg)) < 1e-18


def test_lr_out_of_range():
    with pytest.raises(ValueError):
        lr_at(2001, TrainConfig())
    with pytest.raises(ValueError):
        lr_at(-1, TrainConfig())


@given(st.integers(1, 500), st.integers(1, 5000), st.floats(1e-5, 1.0))
def test_lr_continuous_and_decaying(warm, extra, peak):
    cfg = TrainConfig(total_iters=warm + extra, warmup_iters=warm, peak_lr=peak)
    # the jump across the boundary is one warmup increment
    assert abs(lr_at(warm, cfg) - lr_at(warm - 1, cfg)) <= peak / warm + 1e-15
    values = [lr_at(i, cfg) for i in range(warm, cfg.total_iters + 1, max(1, extra // 50))]
    assert all(b <= a for a, b in zip(values, values[1:]))


# augmentation ------------------------------------------------------------------

def test_identity_policy():
    x = np.random.default_rng(0).random((3, 3, 16, 16))
    assert np.array_equal(apply_augment(x, AugmentPolicy.identity(), np.random.default_rng(1)), x)


@pytest.mark.parametrize("policy", [AugmentPolicy.weak(), AugmentPolicy.strong()])
def test_augment_deterministic_shared_and_bounded(policy):
    one = np.random.default_rng(0).random((3, 16, 16))
    x = np.stack([one, one, one])
    a = apply_augment(x, policy, np.random.default_rng(5))
    b = apply_augment(x, policy, np.random.default_rng(5))
    assert a.shape == x.shape and np.array_equal(a, b)
    # one transform for every slice
    assert np.array_equal(a[0], a[1]) and np.array_equal(a[0], a[2])
    assert a.min() >= 0 and a.max() <= 1


def test_flip_only_policy_mirrors():
    x = np.random.default_rng(0).random((1, 3, 8, 8))
    policy = AugmentPolicy(scale=(1.0, 1.0), hflip=True, vflip=False)
    seen = set()
    for seed in range(20):
        out = apply_augment(x, policy, np.random.default_rng(seed))
        if np.array_equal(out, x):
            seen.add("same")
        elif np.allclose(out, x[..., ::-1], atol=1e-12):
            seen.add("mirror")
        else:
            raise AssertionError("unexpected transform")
    assert seen == {"same", "mirror"}


def test_strong_extends_weak():
    weak, strong = AugmentPolicy.weak(), AugmentPolicy.strong()
    assert (strong.scale, strong.hflip, strong.vflip) == (weak.scale, weak.hflip, weak.vflip)
    assert strong.rotation_deg == 15 and strong.blur_sigma == (0.1, 1.5) and strong.distortion > 0


# losses and steps --------------------------------------------------------------

def test_zero_logits_give_ln2():
    z = ad.Tensor(np.zeros((4, 6)))
    b = supervised_loss(LogitsPair(z, z), np.zeros((4, 6)), np.array(STATIC, float))
    assert abs(b.l1 - math.log(2)) < 1e-15 and abs(b.l2 - math.log(2)) < 1e-15
    assert b.total == b.l1 + b.l2 and b.lu == 0


def test_saturated_logits_near_zero():
    y = np.array([[1, 0, 1, 0, 0, 1]], float)
    z = ad.Tensor(np.where(y > 0, 40.0, -40.0))
    assert supervised_loss(LogitsPair(z, z), y, np.ones(6)).total < 1e-15


def test_deep_supervision_off_is_main_loss():
    rng = np.random.default_rng(0)
    aux, main = ad.Tensor(rng.normal(size=(3, 6))), ad.Tensor(rng.normal(size=(3, 6)))
    y = (rng.random((3, 6)) < 0.5).astype(float)
    on = supervised_loss(LogitsPair(aux, main), y, np.ones(6))
    off = supervised_loss(LogitsPair(aux, main), y, np.ones(6), deep_supervision=False)
    assert off.l1 == 0 and off.total == off.l2 == on.l2


def test_non_finite_loss_raises():
    m = Model(ModelConfig.tiny(), seed=0)
    with pytest.raises(TrainingError, match="iteration 7"):
        _finish_step(m, LossBundle(0, 0, 0, float("nan"), ad.Tensor(np.nan)), 0.1, 7)


def test_zero_lr_leaves_parameters(tiny_series):
    m = Model(ModelConfig.tiny(), seed=0)
    before = m.state()
    s = tiny_series[0]
    train_step(m, s.images, s.labels, TrainConfig(total_iters=10, warmup_iters=5), 0, np.random.default_rng(0))
    assert all(np.array_equal(before[k], m.params[k].data) for k in before)
    assert np.linalg.norm(m.params["patch.w"].grad) > 0


def test_train_step_bitwise_deterministic(tiny_series):
    cfg = TrainConfig(total_iters=10, warmup_iters=1, peak_lr=0.05)
    s = tiny_series[1]
    runs = []
    for _ in range(2):
        m = Model(ModelConfig.tiny(), seed=2)
        train_step(m, s.images, s.labels, cfg, 3, np.random.default_rng(9))
        runs.append(m.state())
    assert all(runs[0][k].tobytes() == runs[1][k].tobytes() for k in runs[0])


def test_overfit_one_series(tiny_series):
    s = tiny_series[0]
    cfg = TrainConfig(total_iters=200, warmup_iters=10, peak_lr=0.05, augment="none")
    m = Model(ModelConfig.tiny(), seed=1)
    losses = [train_step(m, s.images, s.labels, cfg, i, np.random.default_rng(i)).total for i in range(200)]
    assert losses[-1] < losses[0]
    assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])


# fit ---------------------------------------------------------------------------

def test_fit_zero_iterations_unchanged(tiny_series):
    m = Model(ModelConfig.tiny(), seed=0)
    before = m.state()
    res = fit(m, tiny_series, TrainConfig(total_iters=0, warmup_iters=0))
    assert res.history == []
    assert all(np.array_equal(before[k], m.params[k].data) for k in before)


def test_fit_empty_manifest(tiny_series):
    unlabeled = [type(tiny_series[0])("u", tiny_series[0].images, None)]
    with pytest.raises(ConfigError):
        fit(Model(ModelConfig.tiny(), seed=0), unlabeled, TrainConfig())


def test_fit_history_deterministic(tiny_series):
    cfg = TrainConfig(total_iters=12, warmup_iters=2, peak_lr=0.05, seed=4)
    h = [fit(Model(ModelConfig.tiny(), seed=0), tiny_series, cfg).history for _ in range(2)]
    assert h[0] == h[1] and len(h[0]) == 12
    assert h[0][0].lr == 0.0


def test_fit_keeps_best_validation(tiny_series):
    cfg = TrainConfig(total_iters=12, warmup_iters=2, peak_lr=0.05, eval_every=3)
    m = Model(ModelConfig.tiny(), seed=0)
    res = fit(m, tiny_series, cfg, val=tiny_series[:1])
    assert res.best_iteration in (3, 6, 9, 12)
    assert evaluate(m, tiny_series[:1]) == res.best_val


def test_fit_with_pseudo_sums_losses(tiny_series):
    from ihdnet.ssl import make_unlabeled_step

    cfg = TrainConfig(total_iters=4, warmup_iters=1, peak_lr=0.02, unlabeled_ratio=2)
    pseudo = [type(s)(s.series_id, s.images, np.zeros_like(s.labels)) for s in tiny_series]
    res = fit(Model(ModelConfig.tiny(), seed=0), tiny_series[:1], cfg, pseudo=pseudo,
              unlabeled_step=make_unlabeled_step(0.5))
    for h in res.history:
        assert h.lu > 0 and h.l1 > 0
        assert abs(h.total - (h.l1 + h.l2 + 0.5 * h.lu)) < 1e-12


def test_write_history(tmp_path, tiny_series):
    res = fit(Model(ModelConfig.tiny(), seed=0), tiny_series, TrainConfig(total_iters=3, warmup_iters=1))
    write_history(res.history, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "iteration,L1,L2,Lu,total,lr" and len(lines) == 4
