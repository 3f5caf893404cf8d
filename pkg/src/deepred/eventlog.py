"""Interaction logs: parsing, caching, splitting and recent-history queries."""
import bisect
import io
import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .seeding import rng_for

PAD = -1
USER, ITEM = "user", "item"
CACHE_MAGIC = b"DPRDLOG1"


class LogFormatError(ValueError):
    """Malformed input; ``line`` is the 1-based line number in the source."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class Event(NamedTuple):
    user: int
    item: int
    time: float


class HistoryEntry(NamedTuple):
    counterpart: int
    delta: float


@dataclass(frozen=True)
class FormatDescriptor:
    """Which columns hold the user, item and timestamp.

    Columns are header names or 0-based positions.
    """

    user: object = "user_id"
    item: object = "item_id"
    time: object = "timestamp"
    delimiter: str = ","
    header: bool = True

    def resolve(self, header_fields):
        cols = []
        for col in (self.user, self.item, self.time):
            if isinstance(col, int):
                cols.append(col)
            elif header_fields is not None and col in header_fields:
                cols.append(header_fields.index(col))
            else:
                raise LogFormatError(f"column {col!r} not found in header", line=1)
        return cols


JODIE_FORMAT = FormatDescriptor(user=0, item=1, time=2)


class EventLog:
    """Time-ordered user-item events with contiguous 0-based indices.

    Slicing returns a view that shares the name tables and remembers its
    ``offset`` inside the parent log.
    """

    def __init__(self, users, items, times, user_names=None, item_names=None,
                 n_users=None, n_items=None, offset=0, n_out_of_order=0):
        self.users = np.asarray(users, dtype=np.int64)
        self.items = np.asarray(items, dtype=np.int64)
        self.times = np.asarray(times, dtype=np.float64)
        if not (len(self.users) == len(self.items) == len(self.times)):
            raise ValueError("users, items and times must have equal length")
        self.n_users = int(n_users if n_users is not None else (self.users.max() + 1 if len(self.users) else 0))
        self.n_items = int(n_items if n_items is not None else (self.items.max() + 1 if len(self.items) else 0))
        self.user_names = list(user_names) if user_names is not None else [str(u) for u in range(self.n_users)]
        self.item_names = list(item_names) if item_names is not None else [str(i) for i in range(self.n_items)]
        self.offset = offset
        self.n_out_of_order = n_out_of_order
        if len(self.users):
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise ValueError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise ValueError("item index out of range")
            if np.any(np.diff(self.times) < 0):
                raise ValueError("events must be sorted by time")

    @classmethod
    def from_events(cls, events, **kwargs):
        events = list(events)
        users = [e[0] for e in events]
        items = [e[1] for e in events]
        times = [e[2] for e in events]
        return cls(users, items, times, **kwargs)

    @property
    def U(self):
        return self.n_users

    @property
    def I(self):  # noqa: E743
        return self.n_items

    def __len__(self):
        return len(self.times)

    def __iter__(self):
        for u, i, t in zip(self.users.tolist(), self.items.tolist(), self.times.tolist()):
            yield Event(u, i, t)

    def __getitem__(self, key):
        if isinstance(key, slice):
            start, stop, step = key.indices(len(self))
            if step != 1:
                raise ValueError("only contiguous slices are supported")
            return EventLog(self.users[start:stop], self.items[start:stop], self.times[start:stop],
                            self.user_names, self.item_names, self.n_users, self.n_items,
                            offset=self.offset + start)
        return Event(int(self.users[key]), int(self.items[key]), float(self.times[key]))

    def __eq__(self, other):
        return (isinstance(other, EventLog)
                and self.n_users == other.n_users and self.n_items == other.n_items
                and np.array_equal(self.users, other.users)
                and np.array_equal(self.items, other.items)
                and np.array_equal(self.times, other.times)
                and self.user_names == other.user_names
                and self.item_names == other.item_names)

    def __repr__(self):
        return f"EventLog(L={len(self)}, U={self.n_users}, I={self.n_items}, offset={self.offset})"

    def shift_time(self, c):
        return EventLog(self.users, self.items, self.times + c, self.user_names, self.item_names,
                        self.n_users, self.n_items, self.offset)

    def repeat_rate(self):
        """Fraction of events whose (user, item) pair already occurred earlier."""
        if not len(self):
            return 0.0
        keys = self.users * self.n_items + self.items
        return 1.0 - len(np.unique(keys)) / len(keys)

    def summary(self):
        span = float(self.times[-1] - self.times[0]) if len(self) else 0.0
        return {"U": self.n_users, "I": self.n_items, "L": len(self),
                "time_span": span, "repeat_rate": self.repeat_rate()}


# -------------------------------------------------------------------- parsing

def parse_event_log(stream, fmt=JODIE_FORMAT):
    """Parse delimited text into an EventLog.

    ``stream`` may be bytes, str, or a binary/text file object.  Rows are
    stably sorted by timestamp; the number of rows that arrived out of order
    is stored on the result and reported with a warning.
    """
    text = _read_text(stream)
    lines = text.splitlines()
    header = None
    start = 0
    if fmt.header:
        if not lines:
            raise LogFormatError("empty log")
        header = [h.strip() for h in lines[0].split(fmt.delimiter)]
        start = 1
    ucol, icol, tcol = fmt.resolve(header)
    need = max(ucol, icol, tcol) + 1
    raw_u, raw_i, times = [], [], []
    width = None
    for lineno, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        fields = line.split(fmt.delimiter)
        if width is None:
            width = len(fields)
            if width < need:
                raise LogFormatError(f"expected at least {need} columns, found {width}", lineno)
        elif len(fields) != width:
            raise LogFormatError(f"expected {width} columns, found {len(fields)}", lineno)
        try:
            t = float(fields[tcol])
        except ValueError:
            raise LogFormatError(f"unparsable timestamp {fields[tcol].strip()!r}", lineno) from None
        if not math.isfinite(t) or t < 0:
            raise LogFormatError(f"timestamp must be finite and non-negative, got {t}", lineno)
        raw_u.append(fields[ucol].strip())
        raw_i.append(fields[icol].strip())
        times.append(t)
    if not times:
        raise LogFormatError("empty log")

    times = np.asarray(times, dtype=np.float64)
    n_out_of_order = int(np.sum(np.diff(times) < 0))
    if n_out_of_order:
        warnings.warn(f"{n_out_of_order} rows out of timestamp order; sorted", stacklevel=2)
    order = np.argsort(times, kind="stable")
    user_ids, user_names = _remap([raw_u[j] for j in order])
    item_ids, item_names = _remap([raw_i[j] for j in order])
    return EventLog(user_ids, item_ids, times[order], user_names, item_names,
                    n_out_of_order=n_out_of_order)


def read_event_log(path, fmt=JODIE_FORMAT):
    with open(path, "rb") as fh:
        return parse_event_log(fh, fmt)


def _read_text(stream):
    if isinstance(stream, (bytes, bytearray)):
        data = bytes(stream)
    elif isinstance(stream, str):
        return stream
    else:
        data = stream.read()
        if isinstance(data, str):
            return data
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise LogFormatError(f"input is not UTF-8: {exc}") from None


def _remap(names):
    mapping = {}
    ids = np.empty(len(names), dtype=np.int64)
    for j, name in enumerate(names):
        ids[j] = mapping.setdefault(name, len(mapping))
    return ids, list(mapping)


# ---------------------------------------------------------------- binary cache

_TRIPLE = np.dtype([("user", "<u8"), ("item", "<u8"), ("time", "<f8")])


def write_cache(log, fh):
    """Serialize ``log`` in the DPRDLOG1 layout (all integers little-endian u64)."""
    fh.write(CACHE_MAGIC)
    fh.write(struct.pack("<QQQ", log.n_users, log.n_items, len(log)))
    rec = np.empty(len(log), dtype=_TRIPLE)
    rec["user"], rec["item"], rec["time"] = log.users, log.items, log.times
    fh.write(rec.tobytes())
    for names in (log.user_names, log.item_names):
        fh.write(struct.pack("<Q", len(names)))
        for name in names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)


def read_cache(fh):
    if fh.read(8) != CACHE_MAGIC:
        raise LogFormatError("not a DPRDLOG1 cache file")
    n_users, n_items, n = struct.unpack("<QQQ", _read_exact(fh, 24))
    rec = np.frombuffer(_read_exact(fh, n * _TRIPLE.itemsize), dtype=_TRIPLE)
    tables = []
    for _ in range(2):
        (count,) = struct.unpack("<Q", _read_exact(fh, 8))
        names = []
        for _ in range(count):
            (size,) = struct.unpack("<Q", _read_exact(fh, 8))
            names.append(_read_exact(fh, size).decode("utf-8"))
        tables.append(names)
    return EventLog(rec["user"].astype(np.int64), rec["item"].astype(np.int64), rec["time"].copy(),
                    tables[0], tables[1], n_users, n_items)


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise LogFormatError("truncated cache file")
    return data


def save_cache(log, path):
    with open(path, "wb") as fh:
        write_cache(log, fh)


def load_cache(path):
    with open(path, "rb") as fh:
        return read_cache(fh)


def cache_bytes(log):
    buf = io.BytesIO()
    write_cache(log, buf)
    return buf.getvalue()


# ------------------------------------------------------------------ splitting

def split_counts(n, fractions):
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError("fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)!r}")
    # the 1e-9 slack keeps e.g. 0.29 * 100 from flooring to 28
    n_train = int(math.floor(fractions[0] * n + 1e-9))
    n_trval = int(math.floor((fractions[0] + fractions[1]) * n + 1e-9))
    counts = (n_train, n_trval - n_train, n - n_trval)
    if min(counts) <= 0:
        raise ValueError(f"split {fractions} of {n} events leaves an empty partition {counts}")
    return counts


def temporal_split(log, fractions=(0.8, 0.1, 0.1)):
    """Chronological train/validation/test views split by event count."""
    a, b, _ = split_counts(len(log), fractions)
    return log[:a], log[a:a + b], log[a + b:]


def random_split(log, fractions=(0.6, 0.1, 0.3), seed=0):
    """Random edge partition for static-network experiments (unique pairs)."""
    keys = log.users * log.n_items + log.items
    _, first = np.unique(keys, return_index=True)
    first = np.sort(first)
    rng = rng_for(seed, "split.static")
    perm = first[rng.permutation(len(first))]
    a, b, _ = split_counts(len(perm), fractions)
    parts = []
    for idx in (perm[:a], perm[a:a + b], perm[a + b:]):
        idx = np.sort(idx)
        parts.append(EventLog(log.users[idx], log.items[idx], log.times[idx], log.user_names,
                              log.item_names, log.n_users, log.n_items))
    return tuple(parts)


# ------------------------------------------------------------------ histories

@dataclass
class History:
    """The ``k`` most recent counterpart events of one entity before ``query_time``.

    Slots run oldest to newest and are left-padded with ``PAD``.
    """

    counterparts: np.ndarray
    deltas: np.ndarray
    valid_len: int
    query_time: float = 0.0
    side: str = USER
    owner: int = -1

    @property
    def k(self):
        return len(self.counterparts)

    @property
    def mask(self):
        m = np.zeros(self.k, dtype=bool)
        m[self.k - self.valid_len:] = True
        return m

    @property
    def entries(self):
        return [HistoryEntry(int(c), float(d)) for c, d in zip(self.counterparts, self.deltas)]

    def __eq__(self, other):
        return (isinstance(other, History) and self.valid_len == other.valid_len
                and self.side == other.side
                and np.array_equal(self.counterparts, other.counterparts)
                and np.array_equal(self.deltas, other.deltas))


def _make_history(cps, times, t, k, side, owner, static=False):
    n = len(cps)
    counterparts = np.full(k, PAD, dtype=np.int64)
    deltas = np.zeros(k, dtype=np.float64)
    if n:
        counterparts[k - n:] = cps
        if not static:
            deltas[k - n:] = t - np.asarray(times, dtype=np.float64)
    return History(counterparts, deltas, n, float(t), side, owner)


def _columns(log, side):
    if side == USER:
        return log.users, log.items
    if side == ITEM:
        return log.items, log.users
    raise ValueError(f"side must be 'user' or 'item', got {side!r}")


def history_before(log, index, t, k, side=USER):
    """Brute-force scan: last ``min(k, available)`` events with time < ``t``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    owners, cps = _columns(log, side)
    sel = (owners == index) & (log.times < t)
    cp, times = cps[sel][-k:], log.times[sel][-k:]
    return _make_history(cp, times, t, k, side, index)


class HistoryIndex:
    """Per-entity event lists answering ``history_before`` queries.

    Built from a log and extendable one event at a time with
    ``append_event`` (single writer).  Queries are a binary search on the
    entity's timestamps, so ties at the query time are excluded exactly.
    """

    def __init__(self, n_users, n_items):
        self.n_users, self.n_items = n_users, n_items
        self._times = {USER: [[] for _ in range(n_users)], ITEM: [[] for _ in range(n_items)]}
        self._cps = {USER: [[] for _ in range(n_users)], ITEM: [[] for _ in range(n_items)]}

    @classmethod
    def from_log(cls, log):
        index = cls(log.n_users, log.n_items)
        for side in (USER, ITEM):
            owners, cps = _columns(log, side)
            order = np.argsort(owners, kind="stable")
            bounds = np.searchsorted(owners[order], np.arange(len(index._times[side]) + 1))
            times_sorted, cps_sorted = log.times[order].tolist(), cps[order].tolist()
            for e in range(len(index._times[side])):
                lo, hi = bounds[e], bounds[e + 1]
                index._times[side][e] = times_sorted[lo:hi]
                index._cps[side][e] = cps_sorted[lo:hi]
        return index

    def append_event(self, event):
        u, i, t = event
        for side, owner, cp in ((USER, u, i), (ITEM, i, u)):
            times = self._times[side][owner]
            if times and t < times[-1]:
                raise ValueError("events must be appended in time order")
            times.append(float(t))
            self._cps[side][owner].append(int(cp))
        return self

    def count(self, index, side=USER):
        return len(self._times[side][index])

    def last_counterpart(self, index, t, side=USER):
        times = self._times[side][index]
        pos = bisect.bisect_left(times, t)
        return self._cps[side][index][pos - 1] if pos else None

    def history_before(self, index, t, k, side=USER):
        if k < 1:
            raise ValueError("k must be >= 1")
        times = self._times[side][index]
        stop = bisect.bisect_left(times, t)
        start = max(0, stop - k)
        return _make_history(self._cps[side][index][start:stop], times[start:stop], t, k, side, index)

    def counterparts(self, index, side=USER):
        return list(self._cps[side][index])


@dataclass
class HistoryBatch:
    """Histories for many queries as aligned ``(n, k)`` arrays."""

    counterparts: np.ndarray
    deltas: np.ndarray
    valid_len: np.ndarray
    owners: np.ndarray
    side: str = USER
    query_times: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.valid_len)

    @property
    def mask(self):
        k = self.counterparts.shape[1]
        return np.arange(k)[None, :] >= (k - self.valid_len)[:, None]

    def take(self, idx):
        qt = None if self.query_times is None else self.query_times[idx]
        return HistoryBatch(self.counterparts[idx], self.deltas[idx], self.valid_len[idx],
                            self.owners[idx], self.side, qt)

    def __getitem__(self, j):
        qt = 0.0 if self.query_times is None else float(self.query_times[j])
        return History(self.counterparts[j].copy(), self.deltas[j].copy(), int(self.valid_len[j]),
                       qt, self.side, int(self.owners[j]))

    @classmethod
    def from_histories(cls, histories):
        histories = list(histories)
        return cls(np.stack([h.counterparts for h in histories]),
                   np.stack([h.deltas for h in histories]),
                   np.array([h.valid_len for h in histories], dtype=np.int64),
                   np.array([h.owner for h in histories], dtype=np.int64),
                   histories[0].side if histories else USER,
                   np.array([h.query_time for h in histories], dtype=np.float64))


def event_histories(log, k, side=USER, start=0, stop=None):
    """Histories of each event's own user (or item) at the event's timestamp.

    Vectorized over the whole log; rows ``start:stop`` are returned.  Same
    output as calling ``history_before`` once per event.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    owners, cps = _columns(log, side)
    n = len(log)
    order = np.argsort(owners, kind="stable")
    own_s, t_s, cp_s = owners[order], log.times[order], cps[order]
    pos = np.arange(n)
    seg_start = np.r_[True, own_s[1:] != own_s[:-1]] if n else np.zeros(0, bool)
    first = np.maximum.accumulate(np.where(seg_start, pos, 0)) if n else pos
    new_time = seg_start | np.r_[True, t_s[1:] != t_s[:-1]] if n else seg_start
    tie_first = np.maximum.accumulate(np.where(new_time, pos, 0)) if n else pos
    slots = tie_first[:, None] - k + np.arange(k)[None, :]
    valid = slots >= first[:, None]
    src = np.where(valid, slots, 0)
    counterparts = np.where(valid, cp_s[src], PAD)
    deltas = np.where(valid, t_s[:, None] - t_s[src], 0.0)
    valid_len = valid.sum(axis=1)

    inverse = np.empty(n, dtype=np.int64)
    inverse[order] = pos
    sel = inverse[start:stop]
    return HistoryBatch(counterparts[sel], deltas[sel], valid_len[sel], owners[start:stop].copy(),
                        side, log.times[start:stop].copy())


def sample_history_static(log, index, k, seed, side=USER):
    """``k`` counterparts drawn from the entity's events in ``log``; deltas all 0.

    Without replacement when at least ``k`` events exist, with replacement
    otherwise.  ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    owners, cps = _columns(log, side)
    pool = cps[owners == index]
    return _sample(pool, k, np.random.default_rng(seed), side, index)


def _sample(pool, k, rng, side, owner):
    n = len(pool)
    if n == 0:
        return _make_history([], [], 0.0, k, side, owner, static=True)
    pick = rng.choice(n, size=k, replace=n < k)
    return _make_history(pool[pick], None, 0.0, k, side, owner, static=True)


class StaticSampler:
    """Repeated neighbor sampling over a fixed edge set (static mode)."""

    def __init__(self, log):
        self.log = log
        self._pools = {}
        for side in (USER, ITEM):
            owners, cps = _columns(log, side)
            order = np.argsort(owners, kind="stable")
            n_ent = log.n_users if side == USER else log.n_items
            bounds = np.searchsorted(owners[order], np.arange(n_ent + 1))
            cps_sorted = cps[order]
            self._pools[side] = [cps_sorted[bounds[e]:bounds[e + 1]] for e in range(n_ent)]

    def sample(self, index, k, rng, side=USER):
        return _sample(self._pools[side][index], k, rng, side, index)

    def sample_batch(self, indices, k, rng, side=USER):
        return HistoryBatch.from_histories([self.sample(int(e), k, rng, side) for e in indices])
