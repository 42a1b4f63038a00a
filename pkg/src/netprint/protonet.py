"""One-class prototypical network over ConvLSTM encodings.

Two classes only: the target device and a Null class built from all-NUL
packets. Distances are squared Euclidean; posteriors are a two-way softmax
over negative distances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Var

TARGET = "TARGET"
NULL = "NULL"
POSITIVE = "POSITIVE"
NEGATIVE = "NEGATIVE"


@dataclass(frozen=True)
class EmbedConfig:
    embed_dim: int = 32
    channels: int = 16
    kernel: int = 3

    def __post_init__(self):
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")


@dataclass(frozen=True, eq=False)
class Prototype:
    vector: np.ndarray
    class_id: str
    support_count: int


@dataclass(frozen=True)
class Posterior:
    p_target: float
    p_null: float


def init_embedder(hidden_channels: int, cfg: EmbedConfig, seed: int) -> ParamStore:
    store = ParamStore(seed)
    store.add("emb.W_conv", (cfg.kernel, hidden_channels, cfg.channels))
    store.add("emb.b_conv", (cfg.channels,), "zeros")
    store.add("emb.W_out", (cfg.channels, cfg.embed_dim))
    return store


def embed(enc, phi: Mapping) -> Var:
    """``[..., L, Hc] -> [..., E]``: conv, tanh, mean over positions, dense.

    The output layer has no bias: distances are translation invariant, so it
    would never receive a gradient.
    """
    h = dc.tanh(dc.conv1d(enc, phi["emb.W_conv"], phi["emb.b_conv"]))
    return dc.dense(dc.mean_pool(h), phi["emb.W_out"])


def centroid(embeddings) -> Var:
    """Differentiable mean over the support axis: ``[..., S, E] -> [..., E]``."""
    if dc.value(embeddings).shape[-2] == 0:
        raise dc.ShapeError("prototype needs at least one support embedding")
    return dc.mean(embeddings, axis=-2)


def prototype(embeddings, class_id: str) -> Prototype:
    """Class prototype from ``[S, E]`` support embeddings (or a list of ``[E]``)."""
    if isinstance(embeddings, (list, tuple)):
        if not embeddings:
            raise dc.ShapeError("prototype needs at least one support embedding")
        embeddings = np.stack([dc.value(e) for e in embeddings])
    arr = dc.value(embeddings)
    return Prototype(dc.value(centroid(arr)), class_id, arr.shape[-2])


def _vec(x):
    return x.vector if isinstance(x, Prototype) else x


def log_posterior(q, c_t, c_n) -> Var:
    """``[..., 2]`` log-probabilities (target, null) of query embeddings."""
    logits = dc.stack([dc.neg(dc.sq_dist(q, _vec(c_t))), dc.neg(dc.sq_dist(q, _vec(c_n)))], axis=-1)
    return dc.log_softmax(logits, axis=-1)


def posterior(q, c_t, c_n) -> Posterior:
    logp = dc.value(log_posterior(q, c_t, c_n))
    return Posterior(float(np.exp(logp[..., 0])), float(np.exp(logp[..., 1])))


def posterior_target(q, c_t, c_n) -> np.ndarray:
    """Vectorized ``p_target`` for query embeddings ``[..., E]``."""
    return np.exp(dc.value(log_posterior(q, c_t, c_n))[..., 0])


_LABEL_INDEX = {TARGET: 0, NULL: 1}


def proto_loss(q, c_t, c_n, label) -> Var:
    """Mean negative log posterior of the true labels.

    ``label`` is TARGET/NULL, or an array of 0 (target) / 1 (null) per query.
    """
    logp = log_posterior(q, c_t, c_n)
    if isinstance(label, str):
        onehot = np.zeros(2)
        onehot[_LABEL_INDEX[label]] = 1.0
    else:
        onehot = np.eye(2)[np.asarray(label, dtype=np.int64)]
    picked = dc.reduce_sum(dc.mul(logp, onehot), axis=-1)
    return dc.neg(dc.mean(picked))


def pair_loss(target_embs, null_embs, query_emb, pair_kind) -> Var:
    """Cross-entropy over positive/negative pairs.

    ``target_embs[..., W, E]`` and ``null_embs[W, E]`` are support embeddings;
    positive pairs should land on the target prototype, negative pairs on the
    null prototype. ``pair_kind`` is POSITIVE/NEGATIVE or a sequence of them.
    """
    c_t = centroid(target_embs)
    c_n = centroid(null_embs)
    if isinstance(pair_kind, str):
        label = TARGET if pair_kind == POSITIVE else NULL
    else:
        label = np.array([0 if k == POSITIVE else 1 for k in pair_kind])
    return proto_loss(query_emb, c_t, c_n, label)


CHANCE_LOSS = math.log(2.0)
