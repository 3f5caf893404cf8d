"""Replay ranking evaluation, the short-term embedding store and static AP."""
import time
from dataclasses import dataclass, field

import numpy as np

from .eventlog import ITEM, USER, HistoryBatch, HistoryIndex, StaticSampler, random_split
from .model import embed_pairs
from .seeding import rng_for

EXACT, CACHED = "exact", "cached"


def mrr(ranks):
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("mrr of an empty rank list")
    return float(np.mean(1.0 / ranks))


def recall_at_k(ranks, k):
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("recall of an empty rank list")
    return float(np.mean(ranks <= k))


def rank_of(scores, target):
    """1-based rank of ``target`` under ascending scores, ties broken by index."""
    s = scores[target]
    return int(np.sum(scores < s) + np.sum(scores[:target] == s) + 1)


def ranking_order(scores):
    return np.lexsort((np.arange(len(scores)), scores))


@dataclass
class RankingOutcome:
    ranks: np.ndarray
    events: list = field(default_factory=list)
    split: str = "test"
    mode: str = EXACT
    wall_seconds: float = 0.0

    @property
    def mrr(self):
        return mrr(self.ranks)

    def recall(self, k):
        return recall_at_k(self.ranks, k)

    @property
    def recall_at_1(self):
        return self.recall(1)

    @property
    def recall_at_10(self):
        return self.recall(10)

    def to_dict(self):
        return {"split": self.split, "mode": self.mode, "mrr": self.mrr,
                "recall_at_1": self.recall_at_1, "recall_at_10": self.recall_at_10,
                "num_events": int(len(self.ranks)), "wall_seconds": self.wall_seconds}

    def write_rank_dump(self, fh):
        fh.write("event_index,user,item,time,rank\n")
        for (idx, u, i, t), r in zip(self.events, self.ranks.tolist()):
            fh.write(f"{idx},{u},{i},{t!r},{r}\n")


class ShortTermStore:
    """Latest short-term embedding per user and per item."""

    def __init__(self, n_users, n_items, dim):
        self.user = np.zeros((n_users, dim))
        self.item = np.zeros((n_items, dim))
        self.user_time = np.full(n_users, np.nan)
        self.item_time = np.full(n_items, np.nan)

    def set(self, side, index, vector, t):
        if side == USER:
            self.user[index], self.user_time[index] = vector, t
        else:
            self.item[index], self.item_time[index] = vector, t

    def has(self, side, index):
        times = self.user_time if side == USER else self.item_time
        return not np.isnan(times[index])


def _after(t):
    return float(np.nextafter(t, np.inf))


class ReplayState:
    """History index plus (in cached mode) the short-term store.

    ``scores`` ranks every item for a user at time ``t``; ``observe``
    reveals an event afterwards.  Exact mode scores each candidate by a
    full paired forward pass on current histories.  Cached mode compares
    the user's embedding (paired with their most recent item) against each
    item's stored embedding from its last refresh; items never refreshed
    use their cold-start encoding.
    """

    def __init__(self, model, past_log, mode=EXACT, refresh=True):
        if mode not in (EXACT, CACHED):
            raise ValueError(f"mode must be 'exact' or 'cached', got {mode!r}")
        self.model, self.mode, self.refresh = model, mode, refresh
        self.k = model.cfg.k
        self.index = HistoryIndex.from_log(past_log)
        self.store = None
        if mode == CACHED:
            self.store = ShortTermStore(model.n_users, model.n_items, model.cfg.hidden)
            self._cold_items = self._cold_item_embeddings()
            self._warm(past_log)

    def _hist(self, index, t, side):
        return self.index.history_before(index, t, self.k, side)

    def _cold_item_embeddings(self):
        n = self.model.n_items
        k = self.k
        empty = HistoryBatch(np.full((n, k), -1), np.zeros((n, k)), np.zeros(n, dtype=np.int64),
                             np.arange(n), ITEM)
        anyone = HistoryBatch(np.full((n, k), -1), np.zeros((n, k)), np.zeros(n, dtype=np.int64),
                              np.zeros(n, dtype=np.int64), USER)
        _, cold = embed_pairs(self.model, anyone, empty)
        return cold

    def _warm(self, past_log):
        if not len(past_log):
            return
        for side, owners in ((USER, past_log.users), (ITEM, past_log.items)):
            n = self.model.n_users if side == USER else self.model.n_items
            last = np.full(n, -1)
            last[owners] = np.arange(len(past_log))
            for pos in last[last >= 0].tolist():
                u, i, t = past_log[pos]
                self._refresh_pair(u, i, t, only=side)

    def _refresh_pair(self, u, i, t, only=None):
        tp = _after(t)
        uh = HistoryBatch.from_histories([self._hist(u, tp, USER)])
        ih = HistoryBatch.from_histories([self._hist(i, tp, ITEM)])
        ue, ie = embed_pairs(self.model, uh, ih)
        if only in (None, USER):
            self.store.set(USER, u, ue[0], t)
        if only in (None, ITEM):
            self.store.set(ITEM, i, ie[0], t)

    def item_histories(self, t):
        return HistoryBatch.from_histories(
            [self._hist(c, t, ITEM) for c in range(self.model.n_items)])

    def scores(self, user, t):
        """Squared L2 distance from ``user`` to every item at time ``t``."""
        if not 0 <= user < self.model.n_users:
            raise IndexError(f"unknown user {user}")
        n_items = self.model.n_items
        uh = self._hist(user, t, USER)
        if self.mode == EXACT:
            users = HistoryBatch.from_histories([uh] * n_items)
            ue, ie = embed_pairs(self.model, users, self.item_histories(t))
            return np.sum((ue - ie) ** 2, axis=1)
        partner = self.index.last_counterpart(user, t, USER)
        ph = self._hist(0 if partner is None else partner, t, ITEM)
        ue, _ = embed_pairs(self.model, HistoryBatch.from_histories([uh]), HistoryBatch.from_histories([ph]))
        reps = np.where(~np.isnan(self.store.item_time)[:, None], self.store.item, self._cold_items)
        return np.sum((reps - ue[0]) ** 2, axis=1)

    def rank(self, user, item, t):
        return rank_of(self.scores(user, t), item)

    def topk(self, user, t, k):
        return ranking_order(self.scores(user, t))[:k]

    def observe(self, event):
        self.index.append_event(event)
        if self.store is not None and self.refresh:
            self._refresh_pair(*event)


def replay_evaluate(model, log, eval_view, mode=EXACT, refresh=True, split="test", max_events=None):
    """Rank each held-out event's item before revealing it.

    ``log`` is the full observed log and ``eval_view`` a contiguous slice of
    it; everything before the slice is visible history.
    """
    if not len(eval_view):
        raise ValueError("evaluation split is empty")
    start = time.perf_counter()
    state = ReplayState(model, log[:eval_view.offset - log.offset], mode=mode, refresh=refresh)
    ranks, events = [], []
    for pos, event in enumerate(eval_view):
        if max_events is not None and pos >= max_events:
            break
        ranks.append(state.rank(event.user, event.item, event.time))
        events.append((eval_view.offset + pos, event.user, event.item, event.time))
        state.observe(event)
    return RankingOutcome(np.asarray(ranks, dtype=np.int64), events, split, mode,
                          time.perf_counter() - start)


def predict_topk(model, log, user, t, k, mode=EXACT):
    """The ``k`` lowest-distance items for ``user`` given events before ``t``."""
    past = log[:int(np.searchsorted(log.times, t, side="left"))]
    return ReplayState(model, past, mode=mode).topk(user, t, k)


# ---------------------------------------------------------- link prediction

def average_precision(scores, labels):
    """Precision averaged over the positive hits of the descending-score list."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if not labels.any():
        raise ValueError("average precision needs at least one positive")
    order = np.lexsort((np.arange(len(scores)), -scores))
    hits = labels[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].mean())


def sample_negatives(full_log, n, rng, max_attempts_factor=100):
    """``n`` distinct (user, item) pairs absent from ``full_log``."""
    existing = set((full_log.users * full_log.n_items + full_log.items).tolist())
    found, seen = [], set()
    for _ in range(max_attempts_factor * n):
        if len(found) == n:
            break
        u, i = int(rng.integers(full_log.n_users)), int(rng.integers(full_log.n_items))
        key = u * full_log.n_items + i
        if key in existing or key in seen:
            continue
        seen.add(key)
        found.append((u, i))
    if len(found) < n:
        raise RuntimeError(f"could only find {len(found)} of {n} absent pairs")
    return np.array(found, dtype=np.int64).reshape(-1, 2)


def score_static_pairs(model, sampler, users, items, rng):
    k = model.cfg.k
    uh = sampler.sample_batch(users, k, rng, USER)
    ih = sampler.sample_batch(items, k, rng, ITEM)
    ue, ie = embed_pairs(model, uh, ih)
    return -np.sqrt(np.sum((ue - ie) ** 2, axis=1))


def static_link_prediction(model, full_log, train_log, test_log, seed=0):
    """Average precision separating test edges from sampled absent pairs."""
    rng = rng_for(seed, "eval.static")
    keys = np.unique(test_log.users * test_log.n_items + test_log.items)
    pos = np.stack([keys // full_log.n_items, keys % full_log.n_items], axis=1)
    neg = sample_negatives(full_log, len(pos), rng)
    pairs = np.concatenate([pos, neg])
    labels = np.r_[np.ones(len(pos), bool), np.zeros(len(neg), bool)]
    sampler = StaticSampler(train_log)
    scores = score_static_pairs(model, sampler, pairs[:, 0], pairs[:, 1], rng)
    return average_precision(scores, labels)


def static_splits(log, seed=0, fractions=(0.6, 0.1, 0.3)):
    return random_split(log, fractions, seed=seed)
