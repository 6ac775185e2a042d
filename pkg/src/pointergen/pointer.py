"""Pointer-generator output head.

Three pointer distributions (history, summary, query) are built by
scoring decoder states against embedded source tokens, scattered onto
the vocabulary, and blended with the pure generation distribution by a
learned per-position mixture.  Disabling a pointer source removes its
mixture column before the softmax, so the remaining weights still sum
to one; with no sources enabled the output is exactly the generation
distribution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError, DegenerateRowError

# Mixture column layout: one score column per pointer source plus the
# generation column, fixed so checkpoints stay interpretable.
HIS_COL, CAP_COL, QUE_COL, GEN_COL = 0, 1, 2, 3
N_MIX_COLS = 4

# Map from configuration source names to (column, context slot).
SOURCE_COLUMNS = {"history": HIS_COL, "summary": CAP_COL, "query": QUE_COL}


@dataclass
class PointerDistribution:
    """Row-stochastic attention of output positions over source tokens."""

    probs: Tensor              # (L_Y, L_X)
    source_ids: np.ndarray     # (L_X,)


def pointer_distribution(
    z_dec: Tensor,
    z_src: Tensor,
    source_ids: np.ndarray,
    src_mask: Optional[np.ndarray] = None,
) -> PointerDistribution:
    """Score each output position against every source position.

    z_dec: (L_Y, d) decoder states.  z_src: (L_X, d) embedded source
    tokens.  src_mask marks real (non-padding) source positions.
    """
    ids = np.asarray(source_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size != z_src.values.shape[0]:
        raise ShapeError(
            f"pointer source has {z_src.values.shape[0]} rows but {ids.size} token ids"
        )
    if src_mask is not None and not np.asarray(src_mask, dtype=bool).any():
        raise DegenerateRowError("pointer source is entirely padding")
    logits = T.matmul(z_dec, T.transpose(z_src))
    mask = None
    if src_mask is not None:
        keep = np.asarray(src_mask, dtype=bool)
        if not keep.all():
            mask = np.broadcast_to(keep, logits.values.shape).copy()
    return PointerDistribution(T.softmax_rows(logits, mask), ids)


def scatter_to_vocab(ptr: PointerDistribution, vocab_size: int) -> Tensor:
    """Accumulate pointer mass onto the vocabulary ids of the source.

    Repeated source tokens sum their probabilities; every id outside
    the source keeps exactly zero mass, so rows stay stochastic.
    """
    if ptr.source_ids.size and (ptr.source_ids.min() < 0 or ptr.source_ids.max() >= vocab_size):
        raise ShapeError(f"source ids exceed vocabulary size {vocab_size}")
    return T.scatter_cols(ptr.probs, ptr.source_ids, vocab_size)


def generation_distribution(z_dec: Tensor, w_gen: Tensor) -> Tensor:
    """Vocabulary softmax of decoder states through the shared output map."""
    return T.softmax_rows(T.matmul(z_dec, w_gen))


def _expand(z: Tensor, length: int) -> Tensor:
    """Mean-pool a source representation over its length and broadcast
    the pooled row to every output position."""
    return T.repeat_rows(T.mean_rows(z), length)


def mixture_scores(
    z_his: Tensor,
    z_que: Tensor,
    z_cap: Tensor,
    z_res: Tensor,
    z_dec: Tensor,
    w_ctx: Tensor,
    active_columns: Sequence[int] = (HIS_COL, CAP_COL, QUE_COL, GEN_COL),
) -> Tensor:
    """Per-position mixing weights over the active output routes.

    The context is the concatenation of pooled history/query/summary
    representations with the response embedding and the decoder output,
    (L_Y, 5d), scored against the selected columns of w_ctx and
    normalized across them.
    """
    length = z_dec.values.shape[0]
    z_ctx = T.concat_cols([
        _expand(z_his, length),
        _expand(z_que, length),
        _expand(z_cap, length),
        z_res,
        z_dec,
    ])
    if w_ctx.values.shape != (z_ctx.values.shape[1], N_MIX_COLS):
        raise ShapeError(
            f"w_ctx must be ({z_ctx.values.shape[1]}, {N_MIX_COLS}), got {w_ctx.shape}"
        )
    cols = list(active_columns)
    w = w_ctx if cols == list(range(N_MIX_COLS)) else T.gather_cols(w_ctx, cols)
    return T.softmax_rows(T.matmul(z_ctx, w))


def mix_distributions(distributions: Sequence[Tensor], scores: Tensor) -> Tensor:
    """Blend vocabulary distributions with one score column each."""
    if scores.values.shape[1] != len(distributions):
        raise ShapeError(
            f"{len(distributions)} distributions need {len(distributions)} score "
            f"columns, got {scores.values.shape[1]}"
        )
    total = None
    for k, dist in enumerate(distributions):
        term = T.mul(dist, T.slice_cols(scores, k, k + 1))
        total = term if total is None else T.add(total, term)
    return total


def compose_output_distribution(
    z_dec: Tensor,
    z_res: Tensor,
    source_reps: dict,
    source_ids: dict,
    pointer_sources: Sequence[str],
    w_gen: Tensor,
    w_ctx: Tensor,
    vocab_size: int,
    source_masks: Optional[dict] = None,
) -> Tensor:
    """Full output head: pointers for the enabled sources mixed with the
    generation head.  source_reps/source_ids are keyed by source name
    ("history", "summary", "query") and must cover all three names; the
    mixture context always sees every text stream even when its pointer
    is disabled.
    """
    for name in SOURCE_COLUMNS:
        if name not in source_reps or name not in source_ids:
            raise ShapeError(f"missing source stream {name!r}")
    unknown = set(pointer_sources) - set(SOURCE_COLUMNS)
    if unknown:
        raise ValueError(f"unknown pointer sources {sorted(unknown)}")

    p_gen = generation_distribution(z_dec, w_gen)
    if not pointer_sources:
        return p_gen

    masks = source_masks or {}
    columns: list[int] = []
    dists: list[Tensor] = []
    for name, col in SOURCE_COLUMNS.items():
        if name in pointer_sources:
            ptr = pointer_distribution(z_dec, source_reps[name], source_ids[name],
                                       masks.get(name))
            columns.append(col)
            dists.append(scatter_to_vocab(ptr, vocab_size))
    columns.append(GEN_COL)
    dists.append(p_gen)

    scores = mixture_scores(
        source_reps["history"], source_reps["query"], source_reps["summary"],
        z_res, z_dec, w_ctx, active_columns=columns,
    )
    return mix_distributions(dists, scores)
