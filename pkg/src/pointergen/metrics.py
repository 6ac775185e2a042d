"""Corpus-level response-quality metrics.

Three families: clipped n-gram precision with a brevity penalty
(reported at orders one through four), longest-common-subsequence
F-measure, and consensus TF-IDF n-gram similarity with a length
penalty.  All scores are computed over a corpus of hypothesis/reference
pairs; a token-level accuracy helper supports copy-task evaluation.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Sequence

METRIC_ORDER = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider")


@dataclass
class EvalPair:
    """One hypothesis with its reference answers, both tokenized."""

    hypothesis: list
    references: list

    def __post_init__(self):
        if isinstance(self.hypothesis, str):
            raise TypeError("hypothesis must be a token list, not a string")
        if not self.references:
            raise ValueError("need at least one reference")
        for ref in self.references:
            if isinstance(ref, str):
                raise TypeError("references must be token lists, not strings")
            if not ref:
                raise ValueError("references must be non-empty")


def _require_pairs(pairs: Sequence[EvalPair]) -> None:
    if not pairs:
        raise ValueError("cannot score an empty corpus")


def _ngram_counts(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# n-gram precision


def corpus_bleu(pairs: Sequence[EvalPair], n: int = 4) -> float:
    """Geometric mean of corpus-pooled clipped n-gram precisions up to
    order ``n``, scaled by the brevity penalty.  Zero if any order has
    zero matches.  Reference length is the closest to each hypothesis,
    ties going to the shorter reference."""
    _require_pairs(pairs)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    matched = [0] * n
    possible = [0] * n
    hyp_len = 0
    ref_len = 0
    for pair in pairs:
        hyp = pair.hypothesis
        hyp_len += len(hyp)
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in pair.references)[1]
        for k in range(1, n + 1):
            counts = _ngram_counts(hyp, k)
            if not counts:
                continue
            best = Counter()
            for ref in pair.references:
                for gram, c in _ngram_counts(ref, k).items():
                    if c > best[gram]:
                        best[gram] = c
            matched[k - 1] += sum(min(c, best[gram]) for gram, c in counts.items())
            possible[k - 1] += max(len(hyp) - k + 1, 0)
    if hyp_len == 0 or any(m == 0 or p == 0 for m, p in zip(matched, possible)):
        return 0.0
    log_precision = sum(math.log(m / p) for m, p in zip(matched, possible)) / n
    brevity = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return brevity * math.exp(log_precision)


# ---------------------------------------------------------------------------
# longest common subsequence


def _lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(pairs: Sequence[EvalPair], beta: float = 1.2) -> float:
    """Mean over pairs of the best reference LCS F-measure, recall
    weighted by beta**2."""
    _require_pairs(pairs)
    beta2 = beta * beta
    total = 0.0
    for pair in pairs:
        best = 0.0
        for ref in pair.references:
            lcs = _lcs_length(pair.hypothesis, ref)
            if lcs == 0:
                continue
            recall = lcs / len(ref)
            precision = lcs / len(pair.hypothesis)
            f = ((1 + beta2) * recall * precision) / (recall + beta2 * precision)
            best = max(best, f)
        total += best
    return total / len(pairs)


# ---------------------------------------------------------------------------
# consensus TF-IDF similarity


def cider(pairs: Sequence[EvalPair], n_max: int = 4, sigma: float = 6.0) -> float:
    """Consensus similarity: per-order TF-IDF vectors with hypothesis
    counts clipped to the reference, cosine-normalized, downweighted by
    a gaussian on the bigram-length gap, averaged over orders and
    references, scaled by ten.  Document frequency counts each pair's
    reference set once; the IDF log base length is log(#pairs)."""
    _require_pairs(pairs)
    doc_freq: dict = defaultdict(float)
    for pair in pairs:
        seen = set()
        for ref in pair.references:
            for n in range(1, n_max + 1):
                seen.update(_ngram_counts(ref, n))
        for gram in seen:
            doc_freq[gram] += 1.0
    log_pairs = math.log(float(len(pairs)))

    def tfidf(tokens):
        vecs = []
        norms = []
        for n in range(1, n_max + 1):
            vec = {
                gram: c * (log_pairs - math.log(max(1.0, doc_freq[gram])))
                for gram, c in _ngram_counts(tokens, n).items()
            }
            vecs.append(vec)
            norms.append(math.sqrt(sum(w * w for w in vec.values())))
        length = max(len(tokens) - 1, 0)
        return vecs, norms, length

    total = 0.0
    for pair in pairs:
        h_vecs, h_norms, h_len = tfidf(pair.hypothesis)
        pair_score = 0.0
        for ref in pair.references:
            r_vecs, r_norms, r_len = tfidf(ref)
            penalty = math.exp(-((h_len - r_len) ** 2) / (2.0 * sigma * sigma))
            for n in range(n_max):
                if h_norms[n] == 0.0 or r_norms[n] == 0.0:
                    continue
                dot = sum(min(w, r_vecs[n].get(gram, 0.0)) * r_vecs[n].get(gram, 0.0)
                          for gram, w in h_vecs[n].items())
                pair_score += penalty * dot / (h_norms[n] * r_norms[n])
        total += pair_score / (n_max * len(pair.references)) * 10.0
    return total / len(pairs)


# ---------------------------------------------------------------------------
# aggregation


def exact_token_accuracy(hypotheses: Sequence[Sequence],
                         references: Sequence[Sequence]) -> float:
    """Position-wise match rate: matches at aligned positions summed over
    the corpus, divided by the summed longer length of each pair, so
    both missing and extra tokens count as errors."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("cannot score an empty corpus")
    matches = 0
    denom = 0
    for hyp, ref in zip(hypotheses, references):
        matches += sum(1 for h, r in zip(hyp, ref) if h == r)
        denom += max(len(hyp), len(ref))
    if denom == 0:
        raise ValueError("all pairs are empty")
    return matches / denom


def evaluate_corpus(pairs: Sequence[EvalPair]) -> dict:
    """All supported metrics for one corpus, in reporting order."""
    _require_pairs(pairs)
    return {
        "bleu1": corpus_bleu(pairs, 1),
        "bleu2": corpus_bleu(pairs, 2),
        "bleu3": corpus_bleu(pairs, 3),
        "bleu4": corpus_bleu(pairs, 4),
        "rouge_l": rouge_l(pairs),
        "cider": cider(pairs),
    }


def format_report(scores: dict) -> str:
    """Aligned name/value lines, known metrics first in reporting order,
    any extra keys after in sorted order."""
    keys = [k for k in METRIC_ORDER if k in scores]
    keys += sorted(k for k in scores if k not in METRIC_ORDER)
    width = max(len(k) for k in keys)
    return "\n".join(f"{k:<{width}}  {scores[k]:.4f}" for k in keys)
