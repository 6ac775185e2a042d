"""Corpus handling: vocabulary, tokenization, file formats, batching,
and the synthetic copy-task generator used for desk-scale experiments.

Dialog corpora are JSON-lines files, one example per line.  Feature
matrices live in separate binary files referenced from the dialog
lines.  All randomness is driven by explicit seeds so that two runs
with the same arguments produce byte-identical files.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

RESERVED_TOKENS = ("<pad>", "<s>", "</s>", "<unk>", "<sep>")
PAD_ID, START_ID, END_ID, UNK_ID, SEP_ID = range(5)

FEATURE_MAGIC = b"MTNFEAT1"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class FeatureFileError(ValueError):
    """A feature file failed structural validation."""


class CorpusError(ValueError):
    """A dialog corpus file failed structural validation."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation boundaries."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


class Vocab:
    """Bidirectional token/id map with five reserved leading ids."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise CorpusError("vocabulary must start with the reserved tokens")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise CorpusError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.index.get(t, UNK_ID) for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


def build_vocab(texts: Iterable[str], min_count: int = 1) -> Vocab:
    """Count tokens over the given texts and keep those seen at least
    min_count times.  Ordering is frequency-descending with ties broken
    lexicographically, so rebuilds are stable."""
    counts: dict[str, int] = {}
    for text in texts:
        for tok in tokenize(text):
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_count and tok not in RESERVED_TOKENS),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocab(list(RESERVED_TOKENS) + kept)


# ---------------------------------------------------------------------------
# dialog examples


@dataclass
class DialogExample:
    """One dialog turn: context texts, the query, and its reference answer."""

    dialog_id: str
    turn: int
    history: list[str]
    query: str
    summary: str
    answer: str
    visual: Optional[np.ndarray] = None
    audio: Optional[np.ndarray] = None
    vis_file: Optional[str] = None
    aud_file: Optional[str] = None

    def __post_init__(self):
        if self.turn < 1:
            raise CorpusError(f"turn index must be >= 1, got {self.turn}")
        if not self.query.strip() or not self.summary.strip():
            raise CorpusError(f"{self.dialog_id} turn {self.turn}: query and summary must be non-empty")
        if self.visual is not None and self.audio is not None:
            if self.visual.shape[0] != self.audio.shape[0]:
                raise CorpusError(
                    f"{self.dialog_id} turn {self.turn}: feature row counts disagree "
                    f"({self.visual.shape[0]} visual vs {self.audio.shape[0]} audio)"
                )


def write_features(path, features: np.ndarray) -> None:
    """Binary feature matrix: magic, two little-endian uint32 dims, then
    row-major float32 values."""
    arr = np.asarray(features, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise FeatureFileError(f"feature matrix must be 2-d with at least one row, got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.astype("<f4").tobytes(order="C"))


def load_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < len(FEATURE_MAGIC) + 8:
        raise FeatureFileError(f"{path}: truncated header")
    if raw[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {raw[:8]!r}")
    rows, dim = struct.unpack("<II", raw[len(FEATURE_MAGIC):len(FEATURE_MAGIC) + 8])
    payload = raw[len(FEATURE_MAGIC) + 8:]
    expected = rows * dim * 4
    if len(payload) != expected:
        raise FeatureFileError(
            f"{path}: payload holds {len(payload)} bytes, header promises {expected} "
            f"({rows} rows x {dim} dims)"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(rows, dim).copy()


_DIALOG_FIELDS = {"dialog_id", "turn", "history", "query", "summary", "answer",
                  "vis_file", "aud_file"}


def save_dialogs(path, examples: Sequence[DialogExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            record = {
                "dialog_id": ex.dialog_id,
                "turn": ex.turn,
                "history": ex.history,
                "query": ex.query,
                "summary": ex.summary,
                "answer": ex.answer,
            }
            if ex.vis_file is not None:
                record["vis_file"] = ex.vis_file
            if ex.aud_file is not None:
                record["aud_file"] = ex.aud_file
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_dialogs(path, load_feature_files: bool = True) -> list[DialogExample]:
    """Read a JSON-lines dialog corpus.  Feature file references are
    resolved relative to the corpus file's directory."""
    base = Path(path).parent
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: not valid JSON ({exc})") from None
            missing = {"dialog_id", "turn", "history", "query", "summary", "answer"} - record.keys()
            if missing:
                raise CorpusError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            unknown = record.keys() - _DIALOG_FIELDS
            if unknown:
                raise CorpusError(f"{path}:{lineno}: unknown fields {sorted(unknown)}")
            ex = DialogExample(
                dialog_id=str(record["dialog_id"]),
                turn=int(record["turn"]),
                history=[str(h) for h in record["history"]],
                query=str(record["query"]),
                summary=str(record["summary"]),
                answer=str(record["answer"]),
                vis_file=record.get("vis_file"),
                aud_file=record.get("aud_file"),
            )
            if load_feature_files:
                if ex.vis_file:
                    ex.visual = load_features(base / ex.vis_file)
                if ex.aud_file:
                    ex.audio = load_features(base / ex.aud_file)
            examples.append(ex)
    return examples


# ---------------------------------------------------------------------------
# encoding and batching


@dataclass
class EncodedExample:
    """Token-id view of one example, true lengths, no padding."""

    dialog_id: str
    turn: int
    history: np.ndarray
    query: np.ndarray
    summary: np.ndarray
    target: np.ndarray          # answer ids followed by the end marker
    visual: Optional[np.ndarray] = None
    audio: Optional[np.ndarray] = None


def flatten_history(history: Sequence[str], vocab: Vocab) -> np.ndarray:
    """Join utterances with the separator id.  An empty history becomes
    a single separator so downstream attention always has a key."""
    if not history:
        return np.array([SEP_ID], dtype=np.int64)
    parts = []
    for i, utt in enumerate(history):
        if i:
            parts.append(np.array([SEP_ID], dtype=np.int64))
        parts.append(vocab.encode(tokenize(utt)))
    return np.concatenate(parts) if parts else np.array([SEP_ID], dtype=np.int64)


def encode_example(ex: DialogExample, vocab: Vocab) -> EncodedExample:
    answer_ids = vocab.encode(tokenize(ex.answer))
    return EncodedExample(
        dialog_id=ex.dialog_id,
        turn=ex.turn,
        history=flatten_history(ex.history, vocab),
        query=vocab.encode(tokenize(ex.query)),
        summary=vocab.encode(tokenize(ex.summary)),
        target=np.concatenate([answer_ids, np.array([END_ID], dtype=np.int64)]),
        visual=ex.visual,
        audio=ex.audio,
    )


def encode_corpus(examples: Sequence[DialogExample], vocab: Vocab) -> list[EncodedExample]:
    return [encode_example(ex, vocab) for ex in examples]


@dataclass
class Batch:
    """A batch of encoded examples plus padded id/mask views.

    The padded arrays are (B, L_max) with PAD_ID fill; masks are True on
    real positions.  ``examples`` keeps the unpadded originals in the
    same order.
    """

    examples: list[EncodedExample]
    history: np.ndarray
    history_mask: np.ndarray
    query: np.ndarray
    query_mask: np.ndarray
    summary: np.ndarray
    summary_mask: np.ndarray
    target: np.ndarray
    target_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.examples)


def _pad_stack(rows: list[np.ndarray], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    width = max(r.size for r in rows)
    ids = np.full((len(rows), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, : r.size] = r
        mask[i, : r.size] = True
    return ids, mask


def make_batches(examples: Sequence[EncodedExample], batch_size: int,
                 pad_id: int = PAD_ID) -> list[Batch]:
    """Group examples in their given order into padded batches."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    batches = []
    for lo in range(0, len(examples), batch_size):
        chunk = list(examples[lo:lo + batch_size])
        his, his_m = _pad_stack([e.history for e in chunk], pad_id)
        que, que_m = _pad_stack([e.query for e in chunk], pad_id)
        summ, sum_m = _pad_stack([e.summary for e in chunk], pad_id)
        tgt, tgt_m = _pad_stack([e.target for e in chunk], pad_id)
        batches.append(Batch(chunk, his, his_m, que, que_m, summ, sum_m, tgt, tgt_m))
    return batches


def strip_padding(ids: np.ndarray, pad_id: int = PAD_ID) -> np.ndarray:
    """Drop a trailing pad run.  Interior padding is a corpus bug."""
    ids = np.asarray(ids, dtype=np.int64)
    pads = np.flatnonzero(ids == pad_id)
    if pads.size == 0:
        return ids
    first = int(pads[0])
    if not (ids[first:] == pad_id).all():
        raise CorpusError("padding appears before real tokens")
    return ids[:first]


# ---------------------------------------------------------------------------
# synthetic copy task


MARK_WORD = "mm"
MODE_WORDS = {"query": "qq", "summary": "ss"}


def synth_copy_corpus(
    seed: int,
    n_examples: int,
    vocab_size: int = 100,
    answer_mode: str = "mixed",
    f_range: tuple[int, int] = (2, 8),
    d_vis: int = 2048,
    d_aud: int = 128,
) -> list[DialogExample]:
    """Generate a seeded copy-task corpus.

    Each example has a summary of seven random content words and a
    query built from a marked subset of three of those words plus two
    distractor words that do not appear in the summary.  Marking is
    explicit on both sides: every marked word is immediately preceded
    by ``mm`` in the summary and in the query, and the query's first
    word names the answer pattern (``qq`` or ``ss``).  Layout is fixed
    and aligned on both sides — marked words sit at summary positions
    1, 2, and 3, and the query holds its three ``mm``-word pairs first
    and the two distractors last, so both sources carry the marked
    words at the same token slots — but the marked words are randomly
    permuted among the query's pair slots, so query order and summary
    order disagree on most examples.  The answer copies exactly the
    marked words:

    * ``query`` mode (``qq``): marked words in query order, which only
      the query exhibits.
    * ``summary`` mode (``ss``): marked words in summary order, which
      only the summary exhibits.
    * ``mixed`` mode: each example draws one of the two patterns.

    Solving both patterns therefore requires choosing the copy source
    per example from the mode word.  Every answer token appears in
    both summary and query.  Dialogs run one to three turns; later
    turns see earlier turns as history.  Visual/audio features are
    seeded noise with a shared row count per example.
    """
    if answer_mode not in ("summary", "query", "mixed"):
        raise ValueError(f"unknown answer_mode {answer_mode!r}")
    n_regular = vocab_size - len(RESERVED_TOKENS) - 1 - len(MODE_WORDS)
    if n_regular < 12:
        raise ValueError(f"vocab_size {vocab_size} leaves too few content words")
    words = [f"w{i:03d}" for i in range(n_regular)]
    rng = np.random.default_rng(seed)

    examples: list[DialogExample] = []
    dialog_idx = 0
    while len(examples) < n_examples:
        dialog_id = f"d{dialog_idx:05d}"
        dialog_idx += 1
        n_turns = int(rng.integers(1, 4))
        history: list[str] = []
        for turn in range(1, n_turns + 1):
            if len(examples) >= n_examples:
                break
            summary_words = [words[i] for i in rng.choice(n_regular, size=7, replace=False)]
            marked_pos = (1, 2, 3)
            marked = [summary_words[i] for i in marked_pos]
            summary_tokens = [
                tok
                for i, w in enumerate(summary_words)
                for tok in ((MARK_WORD, w) if i in marked_pos else (w,))
            ]
            outside = [w for w in words if w not in summary_words]
            distractors = [outside[i] for i in rng.choice(len(outside), size=2, replace=False)]
            query_marked = [marked[i] for i in rng.permutation(len(marked))]

            if answer_mode == "mixed":
                mode = "query" if rng.random() < 0.5 else "summary"
            else:
                mode = answer_mode
            query_words = [MODE_WORDS[mode]]
            for w in query_marked:
                query_words += [MARK_WORD, w]
            query_words += distractors
            answer_words = query_marked if mode == "query" else marked

            rows = int(rng.integers(f_range[0], f_range[1] + 1))
            visual = rng.standard_normal((rows, d_vis)).astype(np.float32)
            audio = rng.standard_normal((rows, d_aud)).astype(np.float32)
            ex = DialogExample(
                dialog_id=dialog_id,
                turn=turn,
                history=list(history),
                query=" ".join(query_words),
                summary=" ".join(summary_tokens),
                answer=" ".join(answer_words),
                visual=visual,
                audio=audio,
            )
            examples.append(ex)
            history.append(ex.query)
            history.append(ex.answer)
    return examples
