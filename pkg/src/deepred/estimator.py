"""scikit-learn style wrappers around the temporal and static pipelines.

Both estimators accept plain arrays: events as an ``(n, 3)`` array of
``(user, item, time)`` rows (or an :class:`EventLog`), and static edges as
an ``(n, 2)`` integer array.
"""
import numbers

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .eventlog import ITEM, USER, EventLog, StaticSampler, event_histories
from .evaluator import (ReplayState, average_precision, ranking_order, replay_evaluate,
                        score_static_pairs)
from .model import ModelConfig, embed_pairs
from .seeding import rng_for
from .trainer import TrainConfig, train, train_static


# ------------------------------------------------------------- validation

def check_events(X, n_users=None, n_items=None):
    """Coerce ``X`` to an :class:`EventLog`.

    Arrays must be 2-D with three columns, integral non-negative ids in the
    first two and finite non-negative times in the third.  Rows are stably
    sorted by time.
    """
    if isinstance(X, EventLog):
        return X
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) array of (user, item, time), got shape {arr.shape}")
    if len(arr) == 0:
        raise ValueError("no events given")
    if not np.all(np.isfinite(arr)):
        raise ValueError("events contain NaN or infinite values")
    ids = arr[:, :2]
    if np.any(ids < 0) or np.any(ids != np.floor(ids)):
        raise ValueError("user and item ids must be non-negative integers")
    if np.any(arr[:, 2] < 0):
        raise ValueError("timestamps must be non-negative")
    order = np.argsort(arr[:, 2], kind="stable")
    arr = arr[order]
    return EventLog(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2],
                    n_users=n_users, n_items=n_items)


def check_pairs(X, n_users=None, n_items=None):
    """Validate an ``(n, 2)`` array of (user, item) index pairs."""
    arr = np.asarray(X)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected an (n, 2) array of (user, item), got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.isfinite(arr)) or np.any(arr != np.floor(arr)):
            raise ValueError("pair ids must be integers")
        arr = arr.astype(np.int64)
    if np.any(arr < 0):
        raise ValueError("pair ids must be non-negative")
    if n_users is not None and np.any(arr[:, 0] >= n_users):
        raise ValueError(f"user id out of range (n_users={n_users})")
    if n_items is not None and np.any(arr[:, 1] >= n_items):
        raise ValueError(f"item id out of range (n_items={n_items})")
    return arr.astype(np.int64)


def _check_positive_int(name, value):
    if not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")


def _concat(past, new):
    """``past`` followed by ``new`` (whose events may not precede ``past``)."""
    if len(past) and len(new) and new.times[0] < past.times[-1]:
        raise ValueError("new events must not precede the fitted log")
    return EventLog(np.r_[past.users, new.users], np.r_[past.items, new.items],
                    np.r_[past.times, new.times], n_users=past.n_users, n_items=past.n_items)


class _Base(BaseEstimator):
    def _configs(self, static):
        for name in ("d", "k", "batch_size"):
            _check_positive_int(name, getattr(self, name))
        model_cfg = ModelConfig(d=self.d, hidden=self.hidden, k=self.k,
                                delta_transform=getattr(self, "delta_transform", "raw"),
                                pooling=self.pooling, use_theta=self.use_theta, static=static)
        train_cfg = TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                                epochs=self.epochs, gamma=self.gamma, seed=self.random_state,
                                regularizer=self.regularizer)
        return model_cfg, train_cfg


# ---------------------------------------------------------------- temporal

class DeePRedRecommender(_Base):
    """Next-item recommender over a timestamped user-item event stream.

    ``fit`` trains on the given events.  Later calls to ``transform``,
    ``predict`` and ``score`` take events that happen after the fitted
    ones and use the fitted log as visible history.
    """

    def __init__(self, d=16, hidden=None, k=5, delta_transform="raw", pooling="max",
                 use_theta=False, batch_size=128, learning_rate=1e-2, epochs=5, gamma=0.1,
                 regularizer="batch", eval_mode="exact", random_state=0):
        self.d = d
        self.hidden = hidden
        self.k = k
        self.delta_transform = delta_transform
        self.pooling = pooling
        self.use_theta = use_theta
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.gamma = gamma
        self.regularizer = regularizer
        self.eval_mode = eval_mode
        self.random_state = random_state

    def fit(self, X, y=None, n_users=None, n_items=None):
        log = check_events(X, n_users, n_items)
        model_cfg, train_cfg = self._configs(static=False)
        empty = log[len(log):]
        self.model_, self.history_ = train(log, (log, empty, empty), model_cfg, train_cfg,
                                           evaluate=False)
        self.log_ = log
        self.n_users_, self.n_items_ = log.n_users, log.n_items
        return self

    def _with(self, X):
        check_is_fitted(self, "model_")
        new = check_events(X, self.n_users_, self.n_items_)
        return _concat(self.log_, new), len(new)

    def transform(self, X):
        """Short-term ``[u(t), i(t)]`` embeddings for each event, shape ``(n, 2*hidden)``."""
        full, n = self._with(X)
        lo = len(full) - n
        k = self.model_.cfg.k
        u, i = embed_pairs(self.model_, event_histories(full, k, USER, lo),
                           event_histories(full, k, ITEM, lo))
        return np.hstack([u, i])

    def predict(self, X, n_top=1):
        """Top item(s) for each ``(user, time)`` query given the fitted history.

        Returns shape ``(n,)`` when ``n_top == 1`` else ``(n, n_top)``.
        """
        check_is_fitted(self, "model_")
        queries = np.asarray(X, dtype=np.float64)
        if queries.ndim != 2 or queries.shape[1] != 2:
            raise ValueError("expected an (n, 2) array of (user, time) queries")
        out = []
        for user, t in queries:
            past = self.log_[:int(np.searchsorted(self.log_.times, t, side="left"))]
            state = ReplayState(self.model_, past, mode=self.eval_mode)
            out.append(ranking_order(state.scores(int(user), t))[:n_top])
        out = np.asarray(out, dtype=np.int64)
        return out[:, 0] if n_top == 1 else out

    def score(self, X, y=None):
        """Replay MRR on events following the fitted log."""
        full, n = self._with(X)
        outcome = replay_evaluate(self.model_, full, full[len(full) - n:], mode=self.eval_mode)
        return outcome.mrr


# ------------------------------------------------------------------ static

class StaticLinkPredictor(_Base):
    """Link prediction on an unordered bipartite edge set.

    ``decision_function`` returns the negative Euclidean distance between
    the two projected embeddings; larger means more likely.
    """

    def __init__(self, d=16, hidden=None, k=5, pooling="max", use_theta=False, batch_size=128,
                 learning_rate=1e-2, epochs=50, gamma=0.1, regularizer="batch", random_state=0):
        self.d = d
        self.hidden = hidden
        self.k = k
        self.pooling = pooling
        self.use_theta = use_theta
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.gamma = gamma
        self.regularizer = regularizer
        self.random_state = random_state

    def fit(self, X, y=None, n_users=None, n_items=None):
        pairs = check_pairs(X, n_users, n_items)
        log = EventLog(pairs[:, 0], pairs[:, 1], np.zeros(len(pairs)), n_users=n_users,
                       n_items=n_items)
        model_cfg, train_cfg = self._configs(static=True)
        self.model_, self.loss_curve_ = train_static(log, model_cfg, train_cfg)
        self.sampler_ = StaticSampler(log)
        self.n_users_, self.n_items_ = log.n_users, log.n_items
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        pairs = check_pairs(X, self.n_users_, self.n_items_)
        rng = rng_for(self.random_state, "estimator.static.score")
        return score_static_pairs(self.model_, self.sampler_, pairs[:, 0], pairs[:, 1], rng)

    def score(self, X, y):
        """Average precision of ``decision_function`` against binary labels ``y``."""
        return average_precision(self.decision_function(X), y)


__all__ = ["DeePRedRecommender", "StaticLinkPredictor", "check_events", "check_pairs"]
