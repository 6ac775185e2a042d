"""Shared fixtures-by-hand for the model-level test modules."""

from __future__ import annotations

import numpy as np

from pointergen import data as D
from pointergen.model import ModelConfig, init_params


def micro_config(**overrides) -> ModelConfig:
    """The smallest full-featured configuration used in gradient and
    decoding tests: d=8, 2 heads, 1 round, 12-token vocabulary, narrow
    feature widths so end-to-end finite differences stay cheap."""
    base = dict(
        vocab_size=12, d=8, heads=2, rounds=1, d_ff=16,
        d_vis=5, d_aud=3, dropout=0.0,
        pointer_sources=("summary", "query"), features=("visual", "audio"),
    )
    base.update(overrides)
    return ModelConfig(**base)


def micro_example(rng: np.random.Generator, config: ModelConfig,
                  n_features: int = 3) -> D.EncodedExample:
    """A random encoded example consistent with ``config``."""
    def ids(lo, hi, size):
        return rng.integers(lo, hi, size=size).astype(np.int64)

    content_lo = 5
    vocab = config.vocab_size
    target = np.concatenate([
        ids(content_lo, vocab, rng.integers(1, 4)),
        np.array([D.END_ID], dtype=np.int64),
    ])
    return D.EncodedExample(
        dialog_id="t0",
        turn=1,
        history=ids(content_lo, vocab, rng.integers(1, 5)),
        query=ids(content_lo, vocab, rng.integers(1, 4)),
        summary=ids(content_lo, vocab, rng.integers(1, 5)),
        target=target,
        visual=rng.standard_normal((n_features, config.d_vis)).astype(np.float32)
        if "visual" in config.features else None,
        audio=rng.standard_normal((n_features, config.d_aud)).astype(np.float32)
        if "audio" in config.features else None,
    )


def micro_model(seed: int = 0, **overrides):
    config = micro_config(**overrides)
    return config, init_params(config, seed)
