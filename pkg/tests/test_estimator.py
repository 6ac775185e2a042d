"""Estimator-facade contract: params round trips, validation, and the
fit/predict/score lifecycle on a tiny corpus."""

from __future__ import annotations

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pointergen import data as D
from pointergen.estimator import DialogResponseGenerator, validate_examples


def tiny_estimator(**overrides):
    kwargs = dict(d=8, heads=2, rounds=1, d_ff=16, dropout=0.0, epochs=2,
                  batch_size=3, warmup_steps=4, beam_size=2, max_len=6,
                  validation_fraction=0.25, seed=0)
    kwargs.update(overrides)
    return DialogResponseGenerator(**kwargs)


def tiny_corpus(seed=0, n=8):
    return D.synth_copy_corpus(seed, n, vocab_size=20, f_range=(2, 3),
                               d_vis=4, d_aud=3)


class TestValidateExamples:
    def test_passes_clean_corpus_through(self):
        corpus = tiny_corpus()
        assert validate_examples(corpus) == corpus

    def test_rejects_empty_list_and_wrong_types(self):
        with pytest.raises(ValueError):
            validate_examples([])
        with pytest.raises(TypeError):
            validate_examples([{"query": "hi"}])

    def test_rejects_missing_enabled_features(self):
        corpus = tiny_corpus()
        broken = D.DialogExample(
            dialog_id="x", turn=1, history=[], query="q words",
            summary="s words", answer="a", visual=None, audio=corpus[0].audio)
        with pytest.raises(ValueError, match="visual"):
            validate_examples([broken])
        validate_examples([broken], features=("audio",))

    def test_rejects_inconsistent_feature_widths(self):
        corpus = tiny_corpus()
        rows = corpus[0].audio.shape[0]
        narrow = D.DialogExample(
            dialog_id="x", turn=1, history=[], query="q words",
            summary="s words", answer="a",
            visual=np.zeros((rows, 7), dtype=np.float32), audio=corpus[0].audio)
        with pytest.raises(ValueError, match="width"):
            validate_examples([corpus[0], narrow])

    def test_answer_requirement_toggles(self):
        ex = tiny_corpus()[0]
        silent = D.DialogExample(
            dialog_id=ex.dialog_id, turn=ex.turn, history=ex.history,
            query=ex.query, summary=ex.summary, answer="",
            visual=ex.visual, audio=ex.audio)
        with pytest.raises(ValueError, match="answer"):
            validate_examples([silent])
        validate_examples([silent], require_answers=False)


class TestParamsContract:
    def test_get_params_round_trip_and_clone(self):
        est = tiny_estimator(beam_size=7, dropout=0.3)
        params = est.get_params()
        rebuilt = DialogResponseGenerator(**params)
        assert rebuilt.get_params() == params
        assert clone(est).get_params() == params

    def test_fit_does_not_mutate_init_params(self):
        est = tiny_estimator()
        before = est.get_params()
        est.fit(tiny_corpus())
        assert est.get_params() == before

    def test_predict_before_fit_raises(self):
        with pytest.raises(NotFittedError):
            tiny_estimator().predict(tiny_corpus())


class TestFitPredictScore:
    def test_lifecycle_produces_strings_and_bounded_score(self):
        corpus = tiny_corpus()
        est = tiny_estimator().fit(corpus)
        assert len(est.vocab_) == 20
        assert est.config_.d_ff == 16
        assert len(est.history_) == 2
        assert est.best_epoch_ in (1, 2)
        preds = est.predict(corpus)
        assert len(preds) == len(corpus)
        assert all(isinstance(p, str) for p in preds)
        for pred in preds:
            for tok in D.tokenize(pred):
                assert tok in est.vocab_.index
        score = est.score(corpus)
        assert 0.0 <= score <= 1.0

    def test_default_d_ff_is_four_times_width(self):
        est = tiny_estimator(d_ff=None).fit(tiny_corpus())
        assert est.config_.d_ff == 4 * est.d

    def test_same_seed_reproduces_predictions(self):
        corpus = tiny_corpus(seed=3)
        a = tiny_estimator().fit(corpus).predict(corpus)
        b = tiny_estimator().fit(corpus).predict(corpus)
        assert a == b

    def test_disabled_features_train_without_arrays(self):
        corpus = [
            D.DialogExample(dialog_id=ex.dialog_id, turn=ex.turn,
                            history=ex.history, query=ex.query,
                            summary=ex.summary, answer=ex.answer)
            for ex in tiny_corpus()
        ]
        est = tiny_estimator(features=()).fit(corpus)
        assert est.config_.features == ()
        assert est.predict(corpus)

    def test_needs_two_examples_and_valid_fraction(self):
        corpus = tiny_corpus()
        with pytest.raises(ValueError):
            tiny_estimator().fit(corpus[:1])
        with pytest.raises(ValueError):
            tiny_estimator(validation_fraction=1.5).fit(corpus)
