"""Scikit-learn style facade over the dialog-response generator.

DialogResponseGenerator wraps vocabulary construction, encoding,
training, and beam-search decoding behind fit/predict/score with the
usual get_params/set_params/clone contract: constructor arguments are
stored verbatim and all fitted state lands in trailing-underscore
attributes.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import data as data_mod
from .data import DialogExample, build_vocab, detokenize, encode_corpus
from .decoding import batch_generate
from .model import ModelConfig
from .training import TrainConfig, train

ALL_FEATURES = ("visual", "audio")


def split_validation(examples: Sequence, validation_fraction: float,
                     seed: int) -> tuple:
    """Deterministic (fit_split, validation_split) partition: a seeded
    permutation with at least one example on each side."""
    if not (0.0 < validation_fraction < 1.0):
        raise ValueError("validation_fraction must be in (0, 1), "
                         f"got {validation_fraction}")
    if len(examples) < 2:
        raise ValueError("need at least two examples to hold out validation data")
    order = np.random.default_rng(seed).permutation(len(examples))
    n_val = min(max(1, round(len(examples) * validation_fraction)),
                len(examples) - 1)
    val = [examples[i] for i in order[:n_val]]
    fit_split = [examples[i] for i in order[n_val:]]
    return fit_split, val


def validate_examples(
    examples: Sequence[DialogExample],
    features: Sequence[str] = ALL_FEATURES,
    require_answers: bool = True,
) -> list:
    """Check a corpus is usable: DialogExample entries, consistent
    feature availability and widths for each enabled modality, and
    (when training) non-empty answers.  Returns the corpus as a list."""
    examples = list(examples)
    if not examples:
        raise ValueError("need at least one example")
    widths = {}
    for i, ex in enumerate(examples):
        if not isinstance(ex, DialogExample):
            raise TypeError(f"example {i} is {type(ex).__name__}, expected DialogExample")
        if not data_mod.tokenize(ex.query):
            raise ValueError(f"example {i} has an empty query")
        if not data_mod.tokenize(ex.summary):
            raise ValueError(f"example {i} has an empty summary")
        if require_answers and not data_mod.tokenize(ex.answer):
            raise ValueError(f"example {i} has an empty answer")
        for name in features:
            arr = getattr(ex, name)
            if arr is None:
                raise ValueError(f"example {i} lacks {name} features but "
                                 f"the {name} modality is enabled")
            if name in widths and arr.shape[1] != widths[name]:
                raise ValueError(
                    f"example {i} has {name} width {arr.shape[1]}, "
                    f"expected {widths[name]}")
            widths[name] = arr.shape[1]
    return examples


class DialogResponseGenerator(BaseEstimator):
    """Multimodal dialog-response generator with pointer-based copying.

    fit() builds a vocabulary from the training split, trains with
    validation-based model selection, and keeps the best parameters;
    predict() beam-decodes response strings; score() reports the
    longest-common-subsequence F-measure of predictions against the
    reference answers.
    """

    def __init__(
        self,
        d: int = 64,
        heads: int = 4,
        rounds: int = 2,
        d_ff: Optional[int] = None,
        dropout: float = 0.2,
        pointer_sources: tuple = ("summary", "query"),
        features: tuple = ALL_FEATURES,
        epochs: int = 20,
        batch_size: int = 16,
        warmup_steps: int = 400,
        label_smoothing: float = 0.1,
        alpha: float = 1.0,
        beta: float = 1.0,
        beam_size: int = 5,
        length_penalty: float = 1.0,
        max_len: int = 20,
        validation_fraction: float = 0.1,
        min_count: int = 1,
        seed: int = 0,
    ):
        self.d = d
        self.heads = heads
        self.rounds = rounds
        self.d_ff = d_ff
        self.dropout = dropout
        self.pointer_sources = pointer_sources
        self.features = features
        self.epochs = epochs
        self.batch_size = batch_size
        self.warmup_steps = warmup_steps
        self.label_smoothing = label_smoothing
        self.alpha = alpha
        self.beta = beta
        self.beam_size = beam_size
        self.length_penalty = length_penalty
        self.max_len = max_len
        self.validation_fraction = validation_fraction
        self.min_count = min_count
        self.seed = seed

    # -- fitting ------------------------------------------------------------

    def fit(self, X: Sequence[DialogExample], y=None,
            progress: Optional[callable] = None):
        examples = validate_examples(X, features=self.features)
        fit_split, val = split_validation(examples, self.validation_fraction,
                                          self.seed)
        vocab = build_vocab(
            [t for ex in fit_split
             for t in (ex.summary, ex.query, ex.answer, *ex.history)],
            min_count=self.min_count,
        )
        config = ModelConfig(
            vocab_size=len(vocab),
            d=self.d,
            heads=self.heads,
            rounds=self.rounds,
            d_ff=4 * self.d if self.d_ff is None else self.d_ff,
            d_vis=fit_split[0].visual.shape[1] if "visual" in self.features else 0,
            d_aud=fit_split[0].audio.shape[1] if "audio" in self.features else 0,
            dropout=self.dropout,
            pointer_sources=tuple(self.pointer_sources),
            features=tuple(self.features),
        )
        train_cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            warmup_steps=self.warmup_steps,
            label_smoothing=self.label_smoothing,
            alpha=self.alpha,
            beta=self.beta,
            seed=self.seed,
        )
        result = train(config, train_cfg, encode_corpus(fit_split, vocab),
                       encode_corpus(val, vocab), progress=progress)
        self.vocab_ = vocab
        self.config_ = config
        self.params_ = result.params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.best_val_loss_ = result.best_val_loss
        return self

    # -- inference ----------------------------------------------------------

    def predict(self, X: Sequence[DialogExample]) -> list:
        """Beam-decoded response strings, one per example."""
        check_is_fitted(self, "params_")
        examples = validate_examples(X, features=self.features,
                                     require_answers=False)
        encoded = encode_corpus(examples, self.vocab_)
        results = batch_generate(
            encoded, self.params_, end_id=data_mod.END_ID,
            beam_size=self.beam_size, max_len=self.max_len,
            length_penalty=self.length_penalty,
        )
        return [detokenize(self.vocab_.decode(res.ids)) for res in results]

    def score(self, X: Sequence[DialogExample], y=None) -> float:
        """Longest-common-subsequence F-measure of predictions against
        the examples' reference answers (higher is better, max 1.0)."""
        from .metrics import EvalPair, rouge_l

        check_is_fitted(self, "params_")
        examples = validate_examples(X, features=self.features)
        predictions = self.predict(examples)
        pairs = [
            EvalPair(data_mod.tokenize(pred), [data_mod.tokenize(ex.answer)])
            for pred, ex in zip(predictions, examples)
        ]
        return rouge_l(pairs)
