import math

import numpy as np
import pytest

import deepred.numerics as nx
from conftest import random_batch, random_pair_batch
from deepred.eventlog import ITEM, USER, EventLog, History, HistoryBatch, event_histories
from deepred.model import (MODEL_MAGIC, CheckpointError, DeePRedModel, ModelConfig, align,
                           attend, build_signature, encode, forward, gru_encode, model_bytes,
                           model_from_bytes, project, static_encode, transform_deltas)
from deepred.synthetic import random_log


def _hist(cps, deltas, side=USER, owner=0, t=10.0):
    cps = np.asarray(cps)
    valid = int(np.sum(cps >= 0))
    return History(cps, np.asarray(deltas, dtype=float), valid, t, side, owner)


# --------------------------------------------------------------- signature

def test_empty_history_signature_is_zero():
    m = DeePRedModel(3, 4, ModelConfig(d=5, k=3))
    sig = build_signature(_hist([-1, -1, -1], [0, 0, 0]), m)
    assert not sig.mask.any()
    assert np.all(sig.embeddings(m) == 0) and np.all(sig.deltas == 0)


def test_signature_direct_lookup():
    m = DeePRedModel(3, 8, ModelConfig(d=4, k=2))
    sig = build_signature(_hist([3, 7], [2.0, 1.0]), m)
    np.testing.assert_array_equal(sig.embeddings(m)[0], m.embedding.value[[3 + 3, 3 + 7]])
    assert sig.deltas[0].tolist() == [2.0, 1.0]


def test_item_history_looks_up_user_rows():
    m = DeePRedModel(5, 2, ModelConfig(d=4, k=2))
    sig = build_signature(_hist([4, 1], [2.0, 1.0], side=ITEM), m)
    assert sig.rows[0].tolist() == [4, 1]


def test_log_decay_transform():
    cfg = ModelConfig(delta_transform="log_decay")
    assert transform_deltas(0.0, cfg) == 1.0
    assert transform_deltas(10.0, cfg) == pytest.approx(1 / math.log(math.e + 10))


def test_raw_deltas_are_scaled():
    m = DeePRedModel(2, 2, ModelConfig(d=2, k=1), delta_scale=4.0)
    assert build_signature(_hist([1], [2.0]), m).deltas[0, 0] == 0.5


def test_signature_errors():
    m = DeePRedModel(2, 3, ModelConfig(d=2, k=2))
    with pytest.raises(IndexError):
        build_signature(_hist([0, 3], [2.0, 1.0]), m)
    with pytest.raises(ValueError, match="k=2"):
        build_signature(_hist([0, 1, 2], [3.0, 2.0, 1.0]), m)


def test_cold_start_uses_own_embedding():
    m = DeePRedModel(3, 4, ModelConfig(d=5, k=3))
    sig = build_signature(_hist([-1, -1, -1], [0, 0, 0], side=ITEM, owner=2), m, cold_start=True)
    assert sig.mask[0].tolist() == [False, False, True]
    assert sig.rows[0, -1] == 3 + 2 and sig.deltas[0, -1] == 0.0


# --------------------------------------------------------------------- GRU

def test_gru_all_padding_gives_zero_features():
    m = DeePRedModel(3, 4, ModelConfig(d=5, k=3))
    f = gru_encode(build_signature(_hist([-1] * 3, [0] * 3), m), m)
    assert np.all(f.value == 0)


def test_gru_zero_parameter_fixpoint():
    m = DeePRedModel(3, 4, ModelConfig(d=5, k=1))
    for p in m.gru.values():
        p.value[...] = 0.0
    f = gru_encode(build_signature(_hist([2], [1.0]), m), m)
    assert np.all(f.value == 0.0)


def test_gru_states_bounded(rng):
    m = DeePRedModel(20, 30, ModelConfig(d=8, k=6), seed=2)
    for p in m.gru.values():
        p.value[...] = rng.normal(0, 1, size=p.value.shape)
    sig = build_signature(random_batch(rng, 200, 6, 30, USER, 20), m)
    f = gru_encode(sig, m).value
    assert np.all(np.abs(f) < 1)


def test_gru_padded_steps_freeze_state():
    m = DeePRedModel(3, 6, ModelConfig(d=4, k=4), seed=1)
    padded = gru_encode(build_signature(_hist([-1, -1, 2, 5], [0, 0, 2.0, 1.0]), m), m).value[0]
    short = DeePRedModel(3, 6, ModelConfig(d=4, k=2), seed=1)
    plain = gru_encode(build_signature(_hist([2, 5], [2.0, 1.0]), short), short).value[0]
    assert np.all(padded[:2] == 0)
    np.testing.assert_array_equal(padded[2:], plain)


# Expected final state for the frozen case in _golden_case(), produced by a
# one-off scalar transcription of the delta-aware recurrence (z gates the
# recurrent term of the candidate, r interpolates).
GOLDEN_H = [-0.5488621834415193, 0.013355708625707452, -0.7239542570068105, 0.07810920612699015]


def _golden_case():
    m = DeePRedModel(4, 5, ModelConfig(d=3, hidden=4, k=3), seed=11, delta_scale=1.0)
    rng = np.random.default_rng(99)
    for p in m.gru.values():
        p.value[...] = rng.uniform(-0.8, 0.8, size=p.value.shape)
    return m, _hist([2, 0, 4], [2.5, 1.25, 0.5], USER, 1)


def _scalar_recurrence(m, sig, gate_swap=False):
    """Loop-level transcription of the update, independent of the tensor code."""
    sigm = lambda x: 1.0 / (1.0 + math.exp(-x))  # noqa: E731
    P = {k: v.value for k, v in m.gru.items()}
    E = m.embedding.value
    hid, k = m.cfg.hidden, m.cfg.k
    h = [0.0] * hid
    for j in range(k):
        if not sig.mask[0, j]:
            continue
        e, dl = E[sig.rows[0, j]], sig.deltas[0, j]

        def lin(q, a, hv):
            inp = sum(P["W1" + q][a][b] * e[b] for b in range(len(e))) + P["b1" + q][a]
            inp += P["W2" + q][a][0] * dl + P["b2" + q][a]
            rec = sum(P["W3" + q][a][b] * hv[b] for b in range(hid)) + P["b3" + q][a]
            return inp, rec

        new = []
        for a in range(hid):
            zi, zr = lin("z", a, h)
            ri, rr = lin("r", a, h)
            ni, nr = lin("n", a, h)
            z, r = sigm(zi + zr), sigm(ri + rr)
            if gate_swap:  # textbook GRU: r resets the candidate, z interpolates
                n = math.tanh(ni + r * nr)
                new.append((1 - z) * n + z * h[a])
            else:
                n = math.tanh(ni + z * nr)
                new.append((1 - r) * n + r * h[a])
        h = new
    return np.array(h)


def test_gru_golden_vector():
    m, hist = _golden_case()
    out = gru_encode(build_signature(hist, m), m).value[0, -1]
    np.testing.assert_allclose(out, GOLDEN_H, rtol=0, atol=1e-12)


def test_gru_golden_differs_from_textbook_gru():
    m, hist = _golden_case()
    textbook = _scalar_recurrence(m, build_signature(hist, m), gate_swap=True)
    assert np.max(np.abs(textbook - np.array(GOLDEN_H))) > 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_gru_matches_scalar_transcription(seed):
    rng = np.random.default_rng(seed)
    m = DeePRedModel(6, 7, ModelConfig(d=4, hidden=5, k=4), seed=seed)
    for batch in range(3):
        hb = random_batch(rng, 1, 4, 7, USER, 6)
        sig = build_signature(hb, m)
        expected = _scalar_recurrence(m, sig)
        np.testing.assert_allclose(gru_encode(sig, m).value[0, -1], expected, rtol=0, atol=1e-12)


# ----------------------------------------------------- align / attend / project

def test_align_orthonormal_gives_tanh_identity():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(4, 4)))
    f = nx.Tensor(q.T[None, :3])          # three orthonormal rows
    mask = np.ones((1, 3), bool)
    a, joint = align(f, f, mask, mask)
    np.testing.assert_allclose(a.value[0], np.tanh(np.eye(3)), atol=1e-12)
    assert a.value[0, 0, 0] == pytest.approx(0.7616, abs=1e-4)
    assert joint.all()


def test_align_zero_features():
    f = nx.Tensor(np.zeros((1, 2, 3)))
    g = nx.Tensor(np.random.default_rng(1).normal(size=(1, 2, 3)))
    a, _ = align(f, g, np.ones((1, 2), bool), np.ones((1, 2), bool))
    assert np.all(a.value == 0)


def test_align_joint_mask():
    f = nx.Tensor(np.ones((1, 2, 2)))
    _, joint = align(f, f, np.array([[False, True]]), np.array([[True, True]]))
    assert joint[0].tolist() == [[False, False], [True, True]]


A = np.array([[[0.1, 0.9], [0.5, 0.2]]])
FULL = np.ones((1, 2, 2), bool)


def test_attend_max_example():
    us, um, is_, im = attend(nx.Tensor(A), FULL, "max")
    np.testing.assert_allclose(us.value[0], [0.9, 0.5])
    np.testing.assert_allclose(is_.value[0], [0.5, 0.9])
    assert um.all() and im.all()


def test_attend_mean_example():
    us, _, _, _ = attend(nx.Tensor(A), FULL, "mean")
    np.testing.assert_allclose(us.value[0], [0.5, 0.35])


def test_attend_single_valid_entry():
    joint = np.array([[[False, True], [False, False]]])
    us, um, is_, im = attend(nx.Tensor(A), joint, "max")
    assert us.value[0, 0] == 0.9
    assert um[0].tolist() == [True, False] and im[0].tolist() == [False, True]


def test_attend_empty_grid_raises():
    with pytest.raises(ValueError, match="no valid"):
        attend(nx.Tensor(A), np.zeros((1, 2, 2), bool))


def test_project_examples():
    f = nx.Tensor(np.array([[[1.0, 2.0], [3.0, 6.0]]]))
    out, w = project(f, nx.Tensor(np.zeros((1, 2))), np.ones((1, 2), bool))
    np.testing.assert_allclose(out.value[0], [2.0, 4.0])
    out, _ = project(f, nx.Tensor(np.array([[5.0, 1.0]])), np.array([[False, True]]))
    np.testing.assert_array_equal(out.value[0], [3.0, 6.0])
    out, _ = project(f, nx.Tensor(np.array([[10.0, -10.0]])), np.ones((1, 2), bool))
    np.testing.assert_allclose(out.value[0], [1.0, 2.0], atol=1e-4)


# --------------------------------------------------------------- static mode

def _static_model(seed=0):
    return DeePRedModel(6, 9, ModelConfig(d=5, k=4, static=True), seed=seed)


def test_static_encode_is_lookup():
    m = _static_model()
    sig = build_signature(_hist([3, 7, 3, 1], [0] * 4), m)
    np.testing.assert_array_equal(static_encode(sig, m).value[0], m.embedding.value[[9, 13, 9, 7]])
    assert encode(sig, m) is not None


def test_static_permutation_invariance(rng):
    m = _static_model(1)
    for _ in range(20):
        uc, ic = rng.integers(9, size=4), rng.integers(6, size=4)
        base_u, base_i = forward(_hist(uc, [0] * 4), _hist(ic, [0] * 4, ITEM), m)
        pu, pi = rng.permutation(4), rng.permutation(4)
        u, i = forward(_hist(uc[pu], [0] * 4), _hist(ic[pi], [0] * 4, ITEM), m)
        np.testing.assert_allclose(u.value, base_u.value, rtol=0, atol=1e-12)
        np.testing.assert_allclose(i.value, base_i.value, rtol=0, atol=1e-12)


def test_static_all_padding_fails_at_attend():
    m = _static_model()
    with pytest.raises(ValueError, match="no valid"):
        forward(_hist([-1] * 4, [0] * 4), _hist([1, 2, 3, 4], [0] * 4, ITEM), m, cold_start=False)


def test_static_config_requires_equal_dims():
    with pytest.raises(ValueError):
        ModelConfig(d=4, hidden=5, static=True)


# ------------------------------------------------------------- invariances

CONFIGS = [ModelConfig(d=6, k=4), ModelConfig(d=6, k=4, pooling="mean"),
           ModelConfig(d=6, hidden=5, k=4, use_theta=True),
           ModelConfig(d=6, k=4, delta_transform="log_decay")]


@pytest.mark.parametrize("cfg", CONFIGS, ids=lambda c: f"{c.pooling}-{c.delta_transform}-{c.use_theta}")
def test_masking_soundness(cfg, rng):
    m = DeePRedModel(8, 9, cfg, seed=4)
    uh, ih = random_pair_batch(m, rng, 64)
    base_u, base_i = forward(uh, ih, m)
    for batch, n_cp in ((uh, 9), (ih, 8)):
        pad = ~batch.mask
        batch.counterparts[pad] = rng.integers(n_cp, size=pad.sum())
        batch.deltas[pad] = rng.uniform(-100, 100, size=pad.sum())
    u, i = forward(uh, ih, m)
    assert np.array_equal(u.value, base_u.value) and np.array_equal(i.value, base_i.value)


@pytest.mark.parametrize("cfg", CONFIGS[:2])
def test_swap_symmetry(cfg, rng):
    m = DeePRedModel(8, 9, cfg, seed=5)
    uh, ih = random_pair_batch(m, rng, 64, min_len=0)
    u, i = forward(uh, ih, m)
    i2, u2 = forward(ih, uh, m)
    assert np.array_equal(u.value, u2.value) and np.array_equal(i.value, i2.value)


def test_time_shift_invariance():
    log = random_log(400, 10, 12, seed=3)
    log = EventLog(log.users, log.items, np.round(log.times * 16) / 16, n_users=10, n_items=12)
    shifted = log.shift_time(1024.0)
    m = DeePRedModel(10, 12, ModelConfig(d=6, k=3), seed=0, delta_scale=1.3)
    a = forward(event_histories(log, 3, USER), event_histories(log, 3, ITEM), m)
    b = forward(event_histories(shifted, 3, USER), event_histories(shifted, 3, ITEM), m)
    assert np.array_equal(a[0].value, b[0].value) and np.array_equal(a[1].value, b[1].value)


@pytest.mark.parametrize("cfg", CONFIGS)
def test_convex_hull_reconstruction(cfg, rng):
    m = DeePRedModel(8, 9, cfg, seed=6)
    uh, ih = random_pair_batch(m, rng, 50)
    res = forward(uh, ih, m, details=True)
    for emb, w, f in ((res.u, res.u_weights, res.f_u), (res.i, res.i_weights, res.f_i)):
        w = w.value
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
        recon = np.einsum("nk,nkh->nh", w, f.value)
        np.testing.assert_allclose(emb.value, recon, rtol=0, atol=1e-12)
    assert np.all(np.abs(res.alignment.value) < 1)


def test_forward_rejects_mismatched_batches(rng):
    m = DeePRedModel(8, 9, ModelConfig(d=4, k=3))
    uh, ih = random_pair_batch(m, rng, 5)
    with pytest.raises(ValueError):
        forward(uh, ih.take(np.arange(3)), m)


# ------------------------------------------------------------- model state

def test_padding_row_starts_zero_and_init_scales():
    m = DeePRedModel(50, 60, ModelConfig(d=16), seed=0)
    assert np.all(m.embedding.value[m.pad_row] == 0)
    assert np.std(m.embedding.value[:-1]) == pytest.approx(0.25, rel=0.1)
    assert np.max(np.abs(m.gru["W1z"].value)) <= 0.25
    assert np.all(m.gru["b1z"].value == 0)


def test_static_parameters_exclude_gru():
    assert len(_static_model().parameters()) == 1
    assert len(DeePRedModel(2, 2, ModelConfig(d=2, use_theta=True)).parameters()) == 20


@pytest.mark.parametrize("cfg", CONFIGS + [ModelConfig(d=5, k=2, static=True)])
def test_checkpoint_roundtrip(cfg):
    m = DeePRedModel(4, 6, cfg, seed=9, delta_scale=2.5)
    data = model_bytes(m)
    assert data[:8] == MODEL_MAGIC
    back, end = model_from_bytes(data)
    assert end == len(data)
    assert back.cfg == m.cfg and back.delta_scale == 2.5
    assert model_bytes(back) == data


def test_checkpoint_corruption_detected():
    data = bytearray(model_bytes(DeePRedModel(3, 3, ModelConfig(d=2, k=2))))
    data[60] ^= 0xFF  # inside the embedding table
    with pytest.raises(CheckpointError, match="CRC"):
        model_from_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        model_from_bytes(b"XXXXXXXX" + bytes(data[8:]))


def test_history_batch_and_single_history_agree(rng):
    m = DeePRedModel(8, 9, ModelConfig(d=4, k=3), seed=2)
    uh, ih = random_pair_batch(m, rng, 6)
    u, i = forward(uh, ih, m)
    for r in range(6):
        u1, i1 = forward(uh[r], ih[r], m)
        np.testing.assert_allclose(u1.value[0], u.value[r], rtol=0, atol=1e-14)
        np.testing.assert_allclose(i1.value[0], i.value[r], rtol=0, atol=1e-14)
    assert isinstance(HistoryBatch.from_histories([uh[0]]), HistoryBatch)
