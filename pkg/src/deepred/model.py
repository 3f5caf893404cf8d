"""Mutual recurrent encoders with alignment attention and projection.

Shapes carry a leading batch axis ``n``.  Feature matrices are stored as
``(n, k, hidden)``: row ``j`` is the encoder state after history slot
``j``, so ``F_u @ F_i^T`` is the ``(k, k)`` alignment grid.
"""
import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .eventlog import ITEM, USER, HistoryBatch
from .seeding import rng_for

GATES = ("z", "r", "n")
GRU_ORDER = tuple(f"{kind}{q}" for q in GATES for kind in ("W1", "W2", "W3", "b1", "b2", "b3"))
MODEL_MAGIC = b"DPRDMDL1"
MODEL_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 32
    hidden: int = None
    k: int = 5
    delta_transform: str = "raw"
    pooling: str = "max"
    use_theta: bool = False
    static: bool = False

    def __post_init__(self):
        if self.hidden is None:
            self.hidden = self.d
        if self.d < 1 or self.hidden < 1 or self.k < 1:
            raise ValueError("d, hidden and k must be >= 1")
        if self.delta_transform not in ("raw", "log_decay"):
            raise ValueError(f"delta_transform must be 'raw' or 'log_decay', got {self.delta_transform!r}")
        if self.pooling not in ("max", "mean"):
            raise ValueError(f"pooling must be 'max' or 'mean', got {self.pooling!r}")
        if self.static and self.hidden != self.d:
            raise ValueError("static mode uses embeddings as features, so hidden must equal d")

    @property
    def flags(self):
        return (int(self.delta_transform == "log_decay") | int(self.pooling == "mean") << 1
                | int(self.use_theta) << 2 | int(self.static) << 3)

    @classmethod
    def from_flags(cls, d, hidden, k, flags):
        return cls(d=d, hidden=hidden, k=k,
                   delta_transform="log_decay" if flags & 1 else "raw",
                   pooling="mean" if flags & 2 else "max",
                   use_theta=bool(flags & 4), static=bool(flags & 8))


class DeePRedModel:
    """Long-term embedding table plus one shared set of encoder weights.

    Row ``u`` of the table is user ``u``, row ``n_users + i`` is item ``i``
    and the last row is an all-zero padding row that is never updated.
    """

    def __init__(self, n_users, n_items, cfg=None, seed=0, delta_scale=1.0):
        self.cfg = cfg or ModelConfig()
        self.n_users, self.n_items = int(n_users), int(n_items)
        self.delta_scale = float(delta_scale)
        d, h = self.cfg.d, self.cfg.hidden
        rng = rng_for(seed, "model.init")
        table = rng.normal(0.0, 1.0 / math.sqrt(d), size=(self.n_rows, d))
        table[self.pad_row] = 0.0
        self.embedding = nx.Parameter(table, name="embedding")
        bound = 1.0 / math.sqrt(h)
        shapes = {"W1": (h, d), "W2": (h, 1), "W3": (h, h)}
        self.gru = {}
        for name in GRU_ORDER:
            kind = name[:2]
            if kind in shapes:
                value = rng.uniform(-bound, bound, size=shapes[kind])
            else:
                value = np.zeros(h)
            self.gru[name] = nx.Parameter(value, name=name)
        self.theta = nx.Parameter(np.eye(h), name="theta") if self.cfg.use_theta else None

    @property
    def n_rows(self):
        return self.n_users + self.n_items + 1

    @property
    def pad_row(self):
        return self.n_users + self.n_items

    def parameters(self):
        params = [self.embedding]
        if not self.cfg.static:
            params += [self.gru[name] for name in GRU_ORDER]
        if self.theta is not None:
            params.append(self.theta)
        return params

    def copy(self):
        clone = DeePRedModel.__new__(DeePRedModel)
        clone.cfg, clone.n_users, clone.n_items = self.cfg, self.n_users, self.n_items
        clone.delta_scale = self.delta_scale
        clone.embedding = nx.Parameter(self.embedding.value.copy(), name="embedding")
        clone.gru = {k: nx.Parameter(p.value.copy(), name=k) for k, p in self.gru.items()}
        clone.theta = None if self.theta is None else nx.Parameter(self.theta.value.copy(), name="theta")
        return clone

    def row_of(self, index, side):
        return index if side == USER else self.n_users + index


# ------------------------------------------------------------------ signature

@dataclass
class Signature:
    """Table rows, transformed deltas and validity of each history slot."""

    rows: np.ndarray
    deltas: np.ndarray
    mask: np.ndarray

    def embeddings(self, model):
        return model.embedding.value[self.rows]


def transform_deltas(deltas, cfg, delta_scale=1.0):
    deltas = np.asarray(deltas, dtype=np.float64)
    if cfg.delta_transform == "log_decay":
        return 1.0 / np.log(math.e + deltas)
    return deltas / delta_scale


def build_signature(history, model, cold_start=False):
    """Signature of a History or HistoryBatch.

    Counterparts are looked up on the opposite side of the table.  With
    ``cold_start`` an empty history is replaced by a single slot holding the
    owner's own long-term embedding with delta 0.
    """
    single = not isinstance(history, HistoryBatch)
    batch = HistoryBatch.from_histories([history]) if single else history
    cfg = model.cfg
    if batch.counterparts.shape[1] != cfg.k:
        raise ValueError(f"history length {batch.counterparts.shape[1]} does not match k={cfg.k}")
    mask = batch.mask
    cps = batch.counterparts
    limit = model.n_items if batch.side == USER else model.n_users
    if np.any(mask & ((cps < 0) | (cps >= limit))):
        raise IndexError("history counterpart out of range")
    offset = model.n_users if batch.side == USER else 0
    rows = np.where(mask, cps + offset, model.pad_row)
    deltas = np.where(mask, transform_deltas(np.where(mask, batch.deltas, 0.0), cfg, model.delta_scale), 0.0)
    if cold_start:
        empty = batch.valid_len == 0
        if empty.any():
            own = batch.owners[empty] + (0 if batch.side == USER else model.n_users)
            rows[empty, -1] = own
            deltas[empty, -1] = transform_deltas(0.0, cfg, model.delta_scale)
            mask = mask.copy()
            mask[empty, -1] = True
    sig = Signature(rows, deltas, mask)
    return sig


# -------------------------------------------------------------------- encoder

def _lin(x, weight):
    return nx.matmul(x, nx.transpose(weight))


def gru_encode(sig, model):
    """Run the delta-aware recurrence over the signature slots.

    Gate roles follow the formulation this model is defined by: ``z`` gates
    the recurrent term inside the candidate and ``r`` interpolates between
    candidate and previous state.  Padded slots keep the state unchanged and
    emit a zero row.
    """
    p = model.gru
    n, k = sig.rows.shape
    emb = nx.gather_rows(model.embedding, sig.rows)                    # (n, k, d)
    dl = nx.Tensor(sig.deltas[..., None])                              # (n, k, 1)
    x = {q: _lin(emb, p["W1" + q]) + p["b1" + q] + _lin(dl, p["W2" + q]) + p["b2" + q] for q in GATES}
    h = nx.Tensor(np.zeros((n, model.cfg.hidden)))
    rows = []
    for j in range(k):
        m = sig.mask[:, j:j + 1].astype(np.float64)
        z = nx.sigmoid(x["z"][:, j] + _lin(h, p["W3z"]) + p["b3z"])
        r = nx.sigmoid(x["r"][:, j] + _lin(h, p["W3r"]) + p["b3r"])
        cand = nx.tanh(x["n"][:, j] + z * (_lin(h, p["W3n"]) + p["b3n"]))
        h_new = (1.0 - r) * cand + r * h
        if m.all():
            h = h_new
        else:
            h = m * h_new + (1.0 - m) * h
        rows.append(h if m.all() else m * h)
    return nx.stack(rows, axis=1)


def static_encode(sig, model):
    """Feature matrix made of the sampled counterparts' global embeddings."""
    return nx.gather_rows(model.embedding, sig.rows)


def encode(sig, model):
    return static_encode(sig, model) if model.cfg.static else gru_encode(sig, model)


# ---------------------------------------------------- alignment and attention

def align(f_u, f_i, mask_u, mask_i, theta=None):
    """``tanh(F_u^T [theta] F_i)`` as an ``(n, k, k)`` grid plus its validity."""
    left = f_u if theta is None else nx.matmul(f_u, theta)
    a = nx.tanh(nx.matmul(left, nx.transpose(f_i)))
    joint = mask_u[:, :, None] & mask_i[:, None, :]
    return a, joint


def attend(a, joint, pooling="max"):
    """Per-slot attention scores from the alignment grid.

    The user side pools each row over the valid item-side slots; the item
    side pools each column.  Returns ``(u_scores, u_mask, i_scores, i_mask)``;
    slots without a valid partner carry a 0 sentinel and a False mask.
    """
    if not joint.any(axis=(-2, -1)).all():
        raise ValueError("attend: alignment grid has no valid position")
    if pooling == "max":
        u_scores, _ = nx.masked_max(a, joint, axis=-1, fill=0.0)
        i_scores, _ = nx.masked_max(a, joint, axis=-2, fill=0.0)
    elif pooling == "mean":
        u_scores = nx.masked_mean(a, joint, axis=-1, fill=0.0)
        i_scores = nx.masked_mean(a, joint, axis=-2, fill=0.0)
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    return u_scores, joint.any(axis=-1), i_scores, joint.any(axis=-2)


def project(features, scores, mask):
    """Softmax-weighted sum of feature rows; returns ``(embedding, weights)``."""
    w = nx.masked_softmax(scores, mask)
    n, k = w.shape
    out = nx.reshape(nx.matmul(nx.reshape(w, (n, 1, k)), features), (n, features.shape[-1]))
    return out, w


@dataclass
class ForwardResult:
    u: nx.Tensor
    i: nx.Tensor
    u_weights: nx.Tensor
    i_weights: nx.Tensor
    f_u: nx.Tensor
    f_i: nx.Tensor
    alignment: nx.Tensor


def forward(user_hist, item_hist, model, cold_start=True, details=False):
    """Short-term user and item embeddings for paired histories.

    Accepts single Histories or HistoryBatches of equal length.
    """
    cfg = model.cfg
    sig_u = build_signature(user_hist, model, cold_start=cold_start)
    sig_i = build_signature(item_hist, model, cold_start=cold_start)
    if sig_u.rows.shape != sig_i.rows.shape:
        raise ValueError("user and item batches differ in shape")
    f_u, f_i = encode(sig_u, model), encode(sig_i, model)
    a, joint = align(f_u, f_i, sig_u.mask, sig_i.mask, model.theta)
    us, um, is_, im = attend(a, joint, cfg.pooling)
    u, wu = project(f_u, us, um)
    i, wi = project(f_i, is_, im)
    if details:
        return ForwardResult(u, i, wu, wi, f_u, f_i, a)
    return u, i


def embed_pairs(model, user_hist, item_hist, cold_start=True):
    """Forward pass returning plain arrays (no gradient use intended)."""
    u, i = forward(user_hist, item_hist, model, cold_start=cold_start)
    return u.value, i.value


# --------------------------------------------------------------- checkpoints

def _pack_model(model):
    cfg = model.cfg
    parts = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION),
             struct.pack("<IIII", cfg.d, cfg.hidden, cfg.k, cfg.flags),
             struct.pack("<d", model.delta_scale),
             struct.pack("<QQ", model.n_users, model.n_items),
             model.embedding.value.astype("<f8").tobytes()]
    for name in GRU_ORDER:
        parts.append(model.gru[name].value.astype("<f8").tobytes())
    if model.theta is not None:
        parts.append(model.theta.value.astype("<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def model_bytes(model):
    """Checkpoint layout: magic, version, (d, hidden, k, flags) u32, delta
    scale f64, U and I u64, embedding rows, GRU tensors in ``GRU_ORDER``,
    theta when enabled; all floats little-endian f64; trailing CRC32."""
    return _pack_model(model)


def model_from_bytes(data, offset=0):
    """Inverse of ``model_bytes``; returns ``(model, end_offset)``."""
    start = offset
    if data[offset:offset + 8] != MODEL_MAGIC:
        raise CheckpointError("not a DPRDMDL1 checkpoint")
    offset += 8
    (version,) = struct.unpack_from("<I", data, offset)
    if version != MODEL_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset += 4
    d, h, k, flags = struct.unpack_from("<IIII", data, offset)
    offset += 16
    (delta_scale,) = struct.unpack_from("<d", data, offset)
    offset += 8
    n_users, n_items = struct.unpack_from("<QQ", data, offset)
    offset += 16
    cfg = ModelConfig.from_flags(d, h, k, flags)
    model = DeePRedModel.__new__(DeePRedModel)
    model.cfg, model.n_users, model.n_items, model.delta_scale = cfg, n_users, n_items, delta_scale

    def take(shape):
        nonlocal offset
        size = int(np.prod(shape)) * 8
        if offset + size > len(data):
            raise CheckpointError("truncated checkpoint")
        arr = np.frombuffer(data, dtype="<f8", count=size // 8, offset=offset).astype(np.float64).reshape(shape)
        offset += size
        return arr

    model.embedding = nx.Parameter(take((n_users + n_items + 1, d)), name="embedding")
    shapes = {"W1": (h, d), "W2": (h, 1), "W3": (h, h)}
    model.gru = {name: nx.Parameter(take(shapes.get(name[:2], (h,))), name=name) for name in GRU_ORDER}
    model.theta = nx.Parameter(take((h, h)), name="theta") if cfg.use_theta else None
    if offset + 4 > len(data):
        raise CheckpointError("truncated checkpoint")
    (crc,) = struct.unpack_from("<I", data, offset)
    if crc != zlib.crc32(bytes(data[start:offset])):
        raise CheckpointError("checkpoint CRC mismatch")
    return model, offset + 4

