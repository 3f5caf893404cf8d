import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import deepred.numerics as nx
import deepred.trainer as trainer_mod
from conftest import random_pair_batch
from deepred.eventlog import EventLog, temporal_split
from deepred.model import DeePRedModel, ModelConfig
from deepred.synthetic import planted_context_log
from deepred.trainer import (Adam, TrainConfig, TrainingDiverged, adam_step, batch_loss,
                             batch_order, checkpoint_bytes, clip_global_norm, load_checkpoint,
                             mean_inter_event_gap, pair_loss, per_sample_losses, save_checkpoint,
                             train, training_loss, whitening_penalty)


def _vec(*xs):
    return np.array(xs, dtype=float)


# ------------------------------------------------------------------- losses

@pytest.mark.parametrize("u,i,expected", [
    (_vec(1, 0, 0), _vec(1, 0, 0), 2.0),   # identical unit vectors
    (_vec(1, 0, 0), _vec(0, 1, 0), 2.0),   # orthonormal pair
    (_vec(0, 0, 0), _vec(0, 0, 0), 2.0),   # collapsed pair
])
def test_pair_loss_examples(u, i, expected):
    assert pair_loss(u, i, 1.0).item() == pytest.approx(expected)


def test_pair_loss_matches_gram_definition():
    rng = np.random.default_rng(0)
    u, i = rng.normal(size=5), rng.normal(size=5)
    v = np.stack([u, i], axis=1)
    expected = np.sum((u - i) ** 2) + 0.3 * np.sum((v.T @ v - np.eye(2)) ** 2)
    assert pair_loss(u, i, 0.3).item() == pytest.approx(expected, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-10, 10)), arrays(np.float64, 4, elements=st.floats(-10, 10)),
       st.floats(0, 5))
def test_pair_loss_non_negative(u, i, gamma):
    assert pair_loss(u, i, gamma).item() >= 0


def test_pair_loss_rejects_non_finite():
    with pytest.raises(nx.NonFiniteError):
        pair_loss(_vec(np.nan, 0), _vec(0, 0), 1.0)


def test_batch_loss_is_mean_of_pair_losses(small_model, rng):
    uh, ih = random_pair_batch(small_model, rng, 2)
    per = per_sample_losses(small_model, uh, ih, 0.5)
    assert batch_loss(small_model, uh, ih, 0.5).item() == pytest.approx(per.mean(), rel=1e-14)
    one = batch_loss(small_model, uh.take([0]), ih.take([0]), 0.5).item()
    assert one == pytest.approx(per[0], rel=1e-14)


def test_batch_loss_rejects_empty(small_model, rng):
    uh, ih = random_pair_batch(small_model, rng, 2)
    with pytest.raises(ValueError, match="empty"):
        batch_loss(small_model, uh.take([]), ih.take([]), 0.1)


def _grads(model, loss):
    params = model.parameters()
    nx.zero_grads(params)
    nx.backward(loss)
    out = [p.grad.copy() for p in params]
    nx.zero_grads(params)
    return out


def test_batch_gradient_equals_mean_of_sample_gradients(small_model, rng):
    n = 8
    uh, ih = random_pair_batch(small_model, rng, n)
    batch = _grads(small_model, batch_loss(small_model, uh, ih, 0.01))
    acc = [np.zeros_like(g) for g in batch]
    for r in range(n):
        for a, g in zip(acc, _grads(small_model, batch_loss(small_model, uh.take([r]), ih.take([r]), 0.01))):
            a += g
    for b, a in zip(batch, acc):
        mean = a / n
        scale = np.maximum(np.abs(b), np.abs(mean))
        assert np.all(np.abs(b - mean) <= 1e-8 * scale + 1e-15)


def test_per_sample_losses_order_invariant(small_model, rng):
    uh, ih = random_pair_batch(small_model, rng, 40)
    base = per_sample_losses(small_model, uh, ih, 0.1)
    perm = rng.permutation(40)
    shuffled = per_sample_losses(small_model, uh.take(perm), ih.take(perm), 0.1)
    assert sorted(base.tolist()) == sorted(shuffled.tolist())


def test_whitening_penalty():
    d = 4
    u = nx.Tensor(np.sqrt(2.0) * np.eye(d))       # (d/2N) V^T V = I exactly with V=[U; 0]
    i = nx.Tensor(np.zeros((d, d)))
    assert whitening_penalty(u, i).item() == pytest.approx(0.0, abs=1e-12)
    same = nx.Tensor(np.ones((6, d)))
    assert whitening_penalty(same, same).item() > 1.0


@pytest.mark.parametrize("regularizer", ["pair", "batch"])
def test_training_loss_gradient(regularizer, rng):
    m = DeePRedModel(5, 6, ModelConfig(d=3, k=2), seed=1)
    uh, ih = random_pair_batch(m, rng, 4)
    err = nx.gradient_check(lambda: training_loss(m, uh, ih, 0.1, regularizer), m.parameters())
    assert err < 1e-4


# ---------------------------------------------------------------- optimizer

def test_adam_first_step_is_lr():
    p = nx.Parameter(np.array([2.0]))
    opt = Adam([p], lr=0.01)
    p.grad[:] = 3.7
    opt.step()
    assert 2.0 - p.value[0] == pytest.approx(0.01, rel=1e-6)


def test_adam_zero_grad_keeps_params():
    p = nx.Parameter(np.array([1.0, -2.0]))
    opt = Adam([p])
    for _ in range(5):
        adam_step([p], [np.zeros(2)], opt, 0.1)
    assert p.value.tolist() == [1.0, -2.0]


def test_adam_converges_on_quadratic():
    c = np.array([1.5, -0.5, 3.0])
    x = nx.Parameter(np.zeros(3))
    opt = Adam([x], lr=0.05)
    for step in range(2000):
        nx.zero_grads([x])
        nx.backward(nx.sum(nx.square(x - c)))
        opt.step()
        if np.max(np.abs(x.value - c)) < 1e-3:
            break
    assert np.max(np.abs(x.value - c)) < 1e-3


def test_adam_state_roundtrip():
    p = nx.Parameter(np.arange(3.0))
    opt = Adam([p])
    p.grad[:] = [1.0, 2.0, 3.0]
    opt.step()
    other = Adam([nx.Parameter(np.zeros(3))])
    end = other.load_state(opt.state_bytes())
    assert end == len(opt.state_bytes())
    assert other.t == 1 and np.array_equal(other.m[0], opt.m[0]) and np.array_equal(other.v[0], opt.v[0])


def test_clip_global_norm():
    a, b = nx.Parameter(np.zeros(2)), nx.Parameter(np.zeros(1))
    a.grad[:] = [3.0, 0.0]
    b.grad[:] = [4.0]
    assert clip_global_norm([a, b], 1.0) == pytest.approx(5.0)
    assert np.sqrt(np.sum(a.grad ** 2) + np.sum(b.grad ** 2)) == pytest.approx(1.0)


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def small_log():
    return planted_context_log(n_users=40, n_items=20, n_events=3000, seed=1)


def _cfg(**kw):
    base = dict(batch_size=64, epochs=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    for bad in (dict(batch_size=0), dict(gamma=-1.0), dict(learning_rate=0.0), dict(regularizer="x")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_zero_epochs_returns_initial_model(small_log):
    split = temporal_split(small_log)
    mcfg = ModelConfig(d=4, k=2)
    model, metrics = train(small_log, split, mcfg, _cfg(epochs=0))
    fresh = DeePRedModel(small_log.n_users, small_log.n_items, mcfg, seed=3,
                         delta_scale=mean_inter_event_gap(split[0]))
    assert metrics == []
    assert checkpoint_bytes(model) == checkpoint_bytes(fresh)


def test_training_is_deterministic_and_padding_stays_zero(small_log):
    split = temporal_split(small_log)
    runs = [train(small_log, split, ModelConfig(d=4, k=3), _cfg(), evaluate=False)[0] for _ in range(2)]
    assert checkpoint_bytes(runs[0]) == checkpoint_bytes(runs[1])
    assert np.all(runs[0].embedding.value[runs[0].pad_row] == 0.0)


def test_train_loss_decreases(small_log):
    split = temporal_split(small_log)
    _, metrics = train(small_log, split, ModelConfig(d=8, k=3), _cfg(epochs=5), evaluate=False)
    assert metrics[-1].train_loss < metrics[0].train_loss


def test_metrics_and_checkpoints_written(small_log, tmp_path):
    split = temporal_split(small_log)
    buf = io.StringIO()
    train(small_log, split, ModelConfig(d=4, k=2), _cfg(checkpoint_every=1,
          val_max_events=30), metrics_file=buf, checkpoint_dir=str(tmp_path))
    rows = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2]
    assert set(rows[0]) == {"epoch", "train_loss", "val_mrr", "val_recall10", "wall_seconds"}
    model, opt = load_checkpoint(tmp_path / "epoch_0002.ckpt")
    assert opt is not None and opt.t > 0


def test_shuffle_on_and_off_both_learn(small_log):
    split = temporal_split(small_log)
    results = []
    for shuffle in (True, False):
        _, metrics = train(small_log, split, ModelConfig(d=8, k=3),
                           _cfg(epochs=4, shuffle=shuffle, val_max_events=200))
        results.append(max(m.val_mrr for m in metrics))
    random_mrr = np.mean(1.0 / np.arange(1, 21))
    assert min(results) > 1.5 * random_mrr
    assert abs(results[0] - results[1]) <= 0.2 * max(results)


def test_batch_order_never_sorts():
    cfg = TrainConfig(seed=0)
    orders = [batch_order(500, cfg, e) for e in (1, 2)]
    for o in orders:
        assert sorted(o.tolist()) == list(range(500))
        assert not np.array_equal(o, np.arange(500))
    assert not np.array_equal(orders[0], orders[1])
    assert np.array_equal(batch_order(5, TrainConfig(shuffle=False), 1), np.arange(5))


def test_divergence_reports_last_good_model(small_log, monkeypatch):
    split = temporal_split(small_log)
    real = trainer_mod.training_loss
    calls = {"n": 0}
    n_batches = -(-len(split[0]) // 64)

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] > n_batches:
            raise nx.NonFiniteError("boom")
        return real(*args, **kwargs)

    monkeypatch.setattr(trainer_mod, "training_loss", flaky)
    with pytest.raises(TrainingDiverged) as err:
        train(small_log, split, ModelConfig(d=4, k=2), _cfg(), evaluate=False)
    assert err.value.epoch == 2
    monkeypatch.setattr(trainer_mod, "training_loss", real)
    one_epoch, _ = train(small_log, split, ModelConfig(d=4, k=2), _cfg(epochs=1), evaluate=False)
    assert checkpoint_bytes(err.value.model) == checkpoint_bytes(one_epoch)


def test_mean_inter_event_gap():
    log = EventLog([0, 0, 1, 0], [0, 1, 1, 2], [0.0, 1.0, 2.0, 5.0])
    # user gaps: 1, 4; item gaps: (item 1) 1
    assert mean_inter_event_gap(log) == pytest.approx(2.0)


def test_save_checkpoint_with_optimizer(tmp_path, small_model):
    opt = Adam(small_model.parameters())
    save_checkpoint(tmp_path / "m.ckpt", small_model, opt)
    model, loaded = load_checkpoint(tmp_path / "m.ckpt")
    assert checkpoint_bytes(model, loaded) == checkpoint_bytes(small_model, opt)
