"""Beam-search decoding and model ensembling.

A hypothesis carries its emitted token ids (including the end marker
once it finishes), its raw log probability, and a finished flag.  While
searching, hypotheses compete on raw log probability; finished ones stay
in the beam unextended, so a width-1 beam is exactly greedy decoding.
The final ranking divides log probability by length**length_penalty,
with ties broken by lexicographic token order.

Ensembles average the per-step output distributions of several models
over a shared vocabulary, then decode the averaged distribution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from . import tensor as T
from .tensor import LOG_FLOOR
from .data import START_ID, EncodedExample
from .model import ModelParams, encode_example, forward

StepFn = Callable[[tuple], np.ndarray]


@dataclass(frozen=True)
class BeamHypothesis:
    """One decode candidate.  ``ids`` include the end marker when
    ``finished``; ``log_prob`` includes the end marker's term."""

    ids: tuple
    log_prob: float
    finished: bool

    def score(self, length_penalty: float) -> float:
        return self.log_prob / (len(self.ids) ** length_penalty)


@dataclass
class DecodeResult:
    """Best decode for one example, with the end marker stripped."""

    ids: np.ndarray
    finished: bool
    log_prob: float
    score: float


def _check_decode_args(beam_size: int, max_len: int, length_penalty: float) -> None:
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    if length_penalty < 0:
        raise ValueError(f"length_penalty must be >= 0, got {length_penalty}")


def beam_search(step_fn: StepFn, end_id: int, beam_size: int, max_len: int,
                length_penalty: float = 1.0) -> list[BeamHypothesis]:
    """All surviving hypotheses after at most max_len steps, best first.

    step_fn maps a tuple of already-emitted ids (no start marker) to the
    next-token probability row.  Each round extends every unfinished
    hypothesis by every token, carries finished ones through unchanged,
    and keeps the beam_size best by raw log probability (ties to the
    lexicographically smallest ids).  Emitting end_id finishes a
    hypothesis; hitting max_len leaves it unfinished.
    """
    _check_decode_args(beam_size, max_len, length_penalty)
    beam = [BeamHypothesis(ids=(), log_prob=0.0, finished=False)]
    for _ in range(max_len):
        if all(h.finished for h in beam):
            break
        candidates = []
        for hyp in beam:
            if hyp.finished:
                candidates.append(hyp)
                continue
            row = np.asarray(step_fn(hyp.ids), dtype=np.float64)
            logs = np.log(np.maximum(row, LOG_FLOOR))
            for tok in range(row.size):
                candidates.append(BeamHypothesis(
                    ids=hyp.ids + (tok,),
                    log_prob=hyp.log_prob + float(logs[tok]),
                    finished=tok == end_id,
                ))
        candidates.sort(key=lambda h: (-h.log_prob, h.ids))
        beam = candidates[:beam_size]
    beam.sort(key=lambda h: (-h.score(length_penalty), h.ids))
    return beam


def greedy_decode(step_fn: StepFn, end_id: int, max_len: int) -> BeamHypothesis:
    """Argmax decoding, written independently of beam_search so the two
    can check each other."""
    _check_decode_args(1, max_len, 0.0)
    ids: tuple = ()
    log_prob = 0.0
    for _ in range(max_len):
        row = np.asarray(step_fn(ids), dtype=np.float64)
        tok = int(np.argmax(row))
        log_prob += float(np.log(max(row[tok], LOG_FLOOR)))
        ids = ids + (tok,)
        if tok == end_id:
            return BeamHypothesis(ids=ids, log_prob=log_prob, finished=True)
    return BeamHypothesis(ids=ids, log_prob=log_prob, finished=False)


def combine_distributions(rows: Sequence[np.ndarray]) -> np.ndarray:
    """Average several distributions over the same vocabulary: sum the
    rows and renormalize."""
    if not rows:
        raise ValueError("need at least one distribution to combine")
    first = np.asarray(rows[0], dtype=np.float64)
    total = np.zeros_like(first)
    for row in rows:
        row = np.asarray(row, dtype=np.float64)
        if row.shape != first.shape:
            raise T.ShapeError(f"distribution shapes differ: {row.shape} vs {first.shape}")
        if np.any(row < 0):
            raise ValueError("distributions must be non-negative")
        total += row
    mass = total.sum()
    if mass <= 0:
        raise ValueError("combined distribution has no mass")
    return total / mass


def _as_model_list(models: Union[ModelParams, Sequence[ModelParams]]) -> list[ModelParams]:
    models = [models] if isinstance(models, ModelParams) else list(models)
    if not models:
        raise ValueError("need at least one model")
    vocab = models[0].config.vocab_size
    for p in models[1:]:
        if p.config.vocab_size != vocab:
            raise ValueError(
                f"ensemble members must share a vocabulary: "
                f"{p.config.vocab_size} != {vocab}")
    return models


def make_step_fn(example: EncodedExample,
                 models: Union[ModelParams, Sequence[ModelParams]]) -> StepFn:
    """Next-token distribution for one example under one model or an
    ensemble.  Encoder passes run once here and are reused every step."""
    models = _as_model_list(models)
    with T.no_grad():
        encs = [encode_example(example, p) for p in models]

    def step(prefix: tuple) -> np.ndarray:
        dec_input = np.concatenate([
            np.array([START_ID], dtype=np.int64),
            np.asarray(prefix, dtype=np.int64).reshape(-1),
        ])
        rows = []
        with T.no_grad():
            for params, enc in zip(models, encs):
                out = forward(example, params, prefix_ids=dec_input, enc=enc,
                              with_qae=False)
                rows.append(out.p_vocab.values[-1])
        return rows[0] if len(rows) == 1 else combine_distributions(rows)

    return step


def generate_response(
    example: EncodedExample,
    models: Union[ModelParams, Sequence[ModelParams]],
    end_id: int,
    beam_size: int = 5,
    max_len: int = 20,
    length_penalty: float = 1.0,
) -> DecodeResult:
    """Decode one example with beam search and strip the end marker."""
    step_fn = make_step_fn(example, models)
    best = beam_search(step_fn, end_id=end_id, beam_size=beam_size,
                       max_len=max_len, length_penalty=length_penalty)[0]
    ids = best.ids[:-1] if best.finished else best.ids
    return DecodeResult(
        ids=np.asarray(ids, dtype=np.int64),
        finished=best.finished,
        log_prob=best.log_prob,
        score=best.score(length_penalty),
    )


def batch_generate(
    examples: Sequence[EncodedExample],
    models: Union[ModelParams, Sequence[ModelParams]],
    end_id: int,
    beam_size: int = 5,
    max_len: int = 20,
    length_penalty: float = 1.0,
) -> list[DecodeResult]:
    return [
        generate_response(ex, models, end_id=end_id, beam_size=beam_size,
                          max_len=max_len, length_penalty=length_penalty)
        for ex in examples
    ]
