"""Attention primitives shared by the encoder and decoder stacks.

A block is post-norm: the sub-layer output is the layer-normalized sum
of a position-wise feed-forward applied to the attention result and the
block's query input.  Stacks are built by feeding each round's output
back in as the next round's query, with distinct parameters per round.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError


@dataclass
class MultiHeadParams:
    """Projection matrices for one multi-head attention layer, all (d, d)."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    def __post_init__(self):
        d = self.w_q.values.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).values.shape != (d, d):
                raise ShapeError(f"{name} must be ({d}, {d}), got {getattr(self, name).shape}")
        if self.heads < 1 or d % self.heads != 0:
            raise ShapeError(f"width {d} is not divisible into {self.heads} heads")

    @property
    def d(self) -> int:
        return self.w_q.values.shape[0]


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class AttentionBlockParams:
    """One attention block: attention, feed-forward, and the closing norm."""

    mha: MultiHeadParams
    ff: FeedForwardParams
    ln_gain: Tensor
    ln_bias: Tensor


def multi_head_attention(
    z1: Tensor,
    z2: Tensor,
    params: MultiHeadParams,
    key_mask: Optional[np.ndarray] = None,
    causal: bool = False,
    weights_out: Optional[list] = None,
) -> Tensor:
    """Attend from z1 (L1, d) onto z2 (L2, d), returning (L1, d).

    key_mask is a boolean keep-mask over z2 positions.  causal=True
    additionally restricts row i to keys j <= i and requires L1 == L2.
    Pass a list as weights_out to receive each head's (L1, L2) weight
    matrix (a test hook; values only, no gradients).
    """
    L1 = z1.values.shape[0]
    L2 = z2.values.shape[0]
    d = params.d
    if z1.values.shape[1] != d or z2.values.shape[1] != d:
        raise ShapeError(
            f"attention width mismatch: inputs {z1.shape}, {z2.shape} vs params d={d}"
        )
    if causal and L1 != L2:
        raise ShapeError(f"causal attention needs square weights, got {L1}x{L2}")

    mask = None
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        if km.shape != (L2,):
            raise ShapeError(f"key_mask shape {km.shape} != ({L2},)")
        mask = np.broadcast_to(km, (L1, L2)).copy()
    if causal:
        tri = np.tril(np.ones((L1, L2), dtype=bool))
        mask = tri if mask is None else (mask & tri)

    heads = params.heads
    dh = d // heads
    q = T.matmul(z1, params.w_q)
    k = T.matmul(z2, params.w_k)
    v = T.matmul(z2, params.w_v)
    outputs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        scores = T.scale(
            T.matmul(T.slice_cols(q, lo, hi), T.transpose(T.slice_cols(k, lo, hi))),
            1.0 / math.sqrt(dh),
        )
        att = T.softmax_rows(scores, mask)
        if weights_out is not None:
            weights_out.append(att.values.copy())
        outputs.append(T.matmul(att, T.slice_cols(v, lo, hi)))
    return T.matmul(T.concat_cols(outputs), params.w_o)


def feed_forward(
    x: Tensor,
    params: FeedForwardParams,
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Position-wise two-layer ReLU network, width preserved."""
    hidden = T.relu(T.add(T.matmul(x, params.w1), params.b1))
    hidden = T.dropout(hidden, dropout_rate, training, rng)
    return T.add(T.matmul(hidden, params.w2), params.b2)


def attention_block(
    z1: Tensor,
    z2: Tensor,
    params: AttentionBlockParams,
    key_mask: Optional[np.ndarray] = None,
    causal: bool = False,
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    weights_out: Optional[list] = None,
) -> Tensor:
    att = multi_head_attention(z1, z2, params.mha, key_mask, causal, weights_out)
    att = T.dropout(att, dropout_rate, training, rng)
    ff = feed_forward(att, params.ff, dropout_rate, training, rng)
    return T.layer_norm(T.add(ff, z1), params.ln_gain, params.ln_bias)


def progressive_rounds(
    initial: Tensor,
    step: Callable[[Tensor, int], Tensor],
    n_rounds: int,
) -> Tensor:
    """Apply step n_rounds times, feeding each output into the next round."""
    if n_rounds < 1:
        raise ValueError(f"n_rounds must be at least 1, got {n_rounds}")
    z = initial
    for r in range(n_rounds):
        z = step(z, r)
    return z


@functools.lru_cache(maxsize=64)
def positional_encoding(length: int, d: int) -> np.ndarray:
    """Sinusoidal position signal, shape (length, d).  Cached; treat as
    read-only."""
    positions = np.arange(length, dtype=np.float64)[:, None]
    dims = np.arange(d, dtype=np.float64)[None, :]
    angles = positions / np.power(10000.0, 2.0 * np.floor(dims / 2.0) / d)
    pe = np.empty((length, d))
    pe[:, 0::2] = np.sin(angles[:, 0::2])
    pe[:, 1::2] = np.cos(angles[:, 1::2])
    pe.setflags(write=False)
    return pe


def add_positions(x: Tensor) -> Tensor:
    L, d = x.values.shape
    return T.add(x, Tensor(positional_encoding(L, d)))
