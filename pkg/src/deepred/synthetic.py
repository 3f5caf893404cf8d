"""Synthetic logs with planted structure for learning checks."""
import numpy as np

from .eventlog import EventLog
from .seeding import rng_for


def planted_context_log(n_users=200, n_items=100, n_contexts=2, n_events=20_000,
                        in_context=0.9, zipf=2.0, seed=0):
    """Users belong to one context and mostly pick items from it.

    Items are split evenly across contexts.  A user's in-context choice
    follows a Zipf law (exponent ``zipf``) over a private random ordering
    of the context's items; out-of-context choices are uniform over the
    other contexts' items.  Inter-event times are i.i.d. exponential.
    """
    rng = rng_for(seed, "synthetic.context")
    item_ctx = np.arange(n_items) % n_contexts
    user_ctx = rng.integers(n_contexts, size=n_users)
    prefs = []
    for u in range(n_users):
        own = np.flatnonzero(item_ctx == user_ctx[u])
        own = own[rng.permutation(len(own))]
        w = 1.0 / np.arange(1, len(own) + 1) ** zipf
        prefs.append((own, w / w.sum(), np.flatnonzero(item_ctx != user_ctx[u])))
    users = rng.integers(n_users, size=n_events)
    stay = rng.random(n_events) < in_context
    items = np.empty(n_events, dtype=np.int64)
    for j, u in enumerate(users.tolist()):
        own, w, other = prefs[u]
        items[j] = own[rng.choice(len(own), p=w)] if stay[j] else other[rng.integers(len(other))]
    times = np.cumsum(rng.exponential(1.0, size=n_events))
    log = EventLog(users, items, times, n_users=n_users, n_items=n_items)
    log.user_context, log.item_context = user_ctx, item_ctx
    return log


def two_block_graph(n_users=100, n_items=100, p_in=0.3, p_out=0.01, seed=0):
    """Bipartite stochastic block model with two blocks; all times 0."""
    rng = rng_for(seed, "synthetic.blocks")
    ub = np.arange(n_users) % 2
    ib = np.arange(n_items) % 2
    prob = np.where(ub[:, None] == ib[None, :], p_in, p_out)
    users, items = np.nonzero(rng.random((n_users, n_items)) < prob)
    return EventLog(users, items, np.zeros(len(users)), n_users=n_users, n_items=n_items)


def random_log(n_events, n_users, n_items, seed=0, tie_prob=0.0):
    """Uniform random events; ``tie_prob`` repeats the previous timestamp."""
    rng = rng_for(seed, "synthetic.random")
    gaps = rng.exponential(1.0, size=n_events)
    gaps[rng.random(n_events) < tie_prob] = 0.0
    return EventLog(rng.integers(n_users, size=n_events), rng.integers(n_items, size=n_events),
                    np.cumsum(gaps), n_users=n_users, n_items=n_items)
