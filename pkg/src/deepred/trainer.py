"""Mini-batch training of the joint distance + anti-collapse objective."""
import json
import logging
import struct
import time
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .eventlog import ITEM, USER, StaticSampler, event_histories
from .model import DeePRedModel, forward, model_bytes, model_from_bytes
from .seeding import rng_for

logger = logging.getLogger(__name__)

OPT_MAGIC = b"DPRDOPT1"


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite; ``model`` holds the last good parameters."""

    def __init__(self, message, model=None, epoch=None):
        super().__init__(message)
        self.model = model
        self.epoch = epoch


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-2
    epochs: int = 5
    gamma: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    checkpoint_every: int = 0
    clip_norm: float = 5.0
    regularizer: str = "batch"
    val_mode: str = "exact"
    val_max_events: int = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.regularizer not in ("pair", "batch"):
            raise ValueError(f"regularizer must be 'pair' or 'batch', got {self.regularizer!r}")


# ---------------------------------------------------------------------- loss

def pair_losses(u, i, gamma):
    """Per-row ``||u - i||^2 + gamma * ||V^T V - I||_F^2`` with ``V = [u, i]``."""
    if not (np.all(np.isfinite(u.value)) and np.all(np.isfinite(i.value))):
        raise nx.NonFiniteError("non-finite embeddings")
    if u.shape != i.shape:
        raise nx.ShapeError(f"embedding shapes differ: {u.shape} and {i.shape}")
    dist = nx.sum(nx.square(u - i), axis=-1)
    uu = nx.sum(nx.square(u), axis=-1)
    ii = nx.sum(nx.square(i), axis=-1)
    ui = nx.sum(u * i, axis=-1)
    reg = nx.square(uu - 1.0) + 2.0 * nx.square(ui) + nx.square(ii - 1.0)
    return dist + gamma * reg


def pair_loss(u, i, gamma):
    """Loss of a single (user, item) embedding pair; 1-D inputs allowed."""
    u, i = nx.as_tensor(u), nx.as_tensor(i)
    if u.ndim == 1:
        u, i = nx.reshape(u, (1, -1)), nx.reshape(i, (1, -1))
    return nx.sum(pair_losses(u, i, gamma))


def batch_loss(model, user_hist, item_hist, gamma):
    """Mean pair loss over a batch of paired histories."""
    if len(user_hist) == 0:
        raise ValueError("empty batch")
    u, i = forward(user_hist, item_hist, model)
    return nx.mean(pair_losses(u, i, gamma))


def whitening_penalty(u, i):
    """``||(d / 2N) V^T V - I_d||_F^2`` for the ``(2N, d)`` stack ``V = [U; I]``.

    Zero when the batch's embeddings are isotropic with unit mean square
    norm; a constant map (every row equal) is penalized.
    """
    n, d = u.shape
    v = nx.concat([u, i], axis=0)
    second = nx.matmul(nx.transpose(v), v) * (d / (2.0 * n))
    return nx.sum(nx.square(second - np.eye(d)))


def training_loss(model, user_hist, item_hist, gamma, regularizer="batch"):
    """Objective minimized by ``train``.

    ``"pair"`` is ``batch_loss``.  ``"batch"`` keeps the mean distance term
    and replaces the per-pair Gram penalty by ``whitening_penalty`` over the
    whole batch.
    """
    if regularizer == "pair":
        return batch_loss(model, user_hist, item_hist, gamma)
    if len(user_hist) == 0:
        raise ValueError("empty batch")
    u, i = forward(user_hist, item_hist, model)
    if not (np.all(np.isfinite(u.value)) and np.all(np.isfinite(i.value))):
        raise nx.NonFiniteError("non-finite embeddings")
    dist = nx.mean(nx.sum(nx.square(u - i), axis=-1))
    return dist + gamma * whitening_penalty(u, i)


def per_sample_losses(model, user_hist, item_hist, gamma):
    u, i = forward(user_hist, item_hist, model)
    return pair_losses(u, i, gamma).value


# ----------------------------------------------------------------- optimizer

class Adam:
    """Adam with bias correction; state arrays follow ``params`` order."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, grads=None):
        grads = [p.grad for p in self.params] if grads is None else grads
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_bytes(self):
        body = [OPT_MAGIC, struct.pack("<IQI", 1, self.t, len(self.params))]
        for m, v in zip(self.m, self.v):
            body.append(m.astype("<f8").tobytes())
            body.append(v.astype("<f8").tobytes())
        body = b"".join(body)
        return body + struct.pack("<I", zlib.crc32(body))

    def load_state(self, data, offset=0):
        start = offset
        if data[offset:offset + 8] != OPT_MAGIC:
            raise ValueError("missing optimizer block")
        _, self.t, n = struct.unpack_from("<IQI", data, offset + 8)
        offset += 8 + 16
        if n != len(self.params):
            raise ValueError("optimizer state does not match parameters")
        for m, v in zip(self.m, self.v):
            for arr in (m, v):
                arr[...] = np.frombuffer(data, "<f8", arr.size, offset).reshape(arr.shape)
                offset += arr.size * 8
        (crc,) = struct.unpack_from("<I", data, offset)
        if crc != zlib.crc32(bytes(data[start:offset])):
            raise ValueError("optimizer state CRC mismatch")
        return offset + 4


def adam_step(params, grads, state, lr):
    """Functional wrapper: one Adam update using ``state`` (an ``Adam``)."""
    state.lr = lr
    state.step(grads)
    return params, state


def clip_global_norm(params, max_norm):
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad *= scale
    return total


# -------------------------------------------------------------- checkpoints

def checkpoint_bytes(model, optimizer=None):
    data = model_bytes(model)
    return data + optimizer.state_bytes() if optimizer is not None else data


def save_checkpoint(path, model, optimizer=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, optimizer))


def load_checkpoint(path):
    """Returns ``(model, optimizer_or_None)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    model, end = model_from_bytes(data)
    opt = None
    if end < len(data):
        opt = Adam(model.parameters())
        opt.load_state(data, end)
    return model, opt


# ------------------------------------------------------------------ training

def mean_inter_event_gap(log):
    """Mean gap between consecutive events of the same entity (users and items)."""
    gaps = []
    for owners in (log.users, log.items):
        order = np.argsort(owners, kind="stable")
        same = owners[order][1:] == owners[order][:-1]
        gaps.append(np.diff(log.times[order])[same])
    gaps = np.concatenate(gaps)
    gaps = gaps[gaps > 0]
    return float(gaps.mean()) if len(gaps) else 1.0


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_mrr: float
    val_recall10: float
    wall_seconds: float

    def to_json(self):
        return json.dumps(asdict(self))


def _apply_step(model, optimizer, loss, clip_norm):
    params = optimizer.params
    nx.zero_grads(params)
    nx.backward(loss)
    model.embedding.grad[model.pad_row] = 0.0
    clip_global_norm(params, clip_norm)
    optimizer.step()


def batch_order(n, cfg, epoch):
    """Sample order for one epoch; shuffling never re-sorts by time."""
    if cfg.shuffle:
        return rng_for(cfg.seed, f"train.shuffle.{epoch}").permutation(n)
    return np.arange(n)


def train(log, split, model_cfg, cfg=None, metrics_file=None, checkpoint_dir=None, model=None,
          evaluate=True):
    """Fit a model on ``split[0]`` and track validation MRR on ``split[1]``.

    ``log`` is the full observed log; ``split`` its (train, val, test)
    views.  Returns ``(best_model, metrics)`` where best is by validation
    MRR (the last epoch when ``evaluate`` is off).
    """
    from .evaluator import replay_evaluate

    cfg = cfg or TrainConfig()
    train_view, val_view = split[0], split[1]
    if not len(train_view):
        raise ValueError("training partition is empty")
    if model is None:
        model = DeePRedModel(log.n_users, log.n_items, model_cfg, seed=cfg.seed,
                             delta_scale=mean_inter_event_gap(train_view))
    k = model.cfg.k
    lo = train_view.offset - log.offset
    hi = lo + len(train_view)
    uh = event_histories(log, k, USER, lo, hi)
    ih = event_histories(log, k, ITEM, lo, hi)
    optimizer = Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    metrics, best, best_mrr = [], model.copy(), -np.inf
    last_good = model.copy()
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = batch_order(len(uh), cfg, epoch)
        total, count = 0.0, 0
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            try:
                loss = training_loss(model, uh.take(idx), ih.take(idx), cfg.gamma, cfg.regularizer)
                _apply_step(model, optimizer, loss, cfg.clip_norm)
            except nx.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good, epoch) from exc
            total += loss.item() * len(idx)
            count += len(idx)
        train_loss = total / count
        val_mrr = val_r10 = float("nan")
        if evaluate and len(val_view):
            outcome = replay_evaluate(model, log, val_view, mode=cfg.val_mode, split="val",
                                      max_events=cfg.val_max_events)
            val_mrr, val_r10 = outcome.mrr, outcome.recall_at_10
        row = EpochMetrics(epoch, train_loss, val_mrr, val_r10, time.perf_counter() - start)
        metrics.append(row)
        logger.info("epoch %d loss %.5f val_mrr %.4f", epoch, train_loss, val_mrr)
        if metrics_file is not None:
            metrics_file.write(row.to_json() + "\n")
            metrics_file.flush()
        last_good = model.copy()
        if not evaluate or val_mrr > best_mrr:
            best, best_mrr = model.copy(), val_mrr
        if checkpoint_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(f"{checkpoint_dir}/epoch_{epoch:04d}.ckpt", model, optimizer)
    if cfg.epochs == 0:
        best = model
    return best, metrics


def train_static(train_log, model_cfg, cfg=None, model=None):
    """Fit global embeddings on an unordered edge set.

    Each epoch resamples ``k`` neighbors per endpoint from the training
    edges; the GRU is not used.
    """
    cfg = cfg or TrainConfig()
    if not model_cfg.static:
        raise ValueError("train_static needs a static ModelConfig")
    if not len(train_log):
        raise ValueError("training partition is empty")
    if model is None:
        model = DeePRedModel(train_log.n_users, train_log.n_items, model_cfg, seed=cfg.seed)
    sampler = StaticSampler(train_log)
    optimizer = Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    users, items = train_log.users, train_log.items
    losses = []
    for epoch in range(1, cfg.epochs + 1):
        rng = rng_for(cfg.seed, f"train.static.{epoch}")
        order = rng.permutation(len(users)) if cfg.shuffle else np.arange(len(users))
        total = 0.0
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            uh = sampler.sample_batch(users[idx], model.cfg.k, rng, USER)
            ih = sampler.sample_batch(items[idx], model.cfg.k, rng, ITEM)
            loss = training_loss(model, uh, ih, cfg.gamma, cfg.regularizer)
            _apply_step(model, optimizer, loss, cfg.clip_norm)
            total += loss.item() * len(idx)
        losses.append(total / len(order))
    return model, losses
