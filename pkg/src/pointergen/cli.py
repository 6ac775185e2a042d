"""Command-line operator surface.

Five subcommands cover the whole workflow: ``synth-data`` writes a
seeded copy-task corpus, ``train`` fits a model and writes a checkpoint,
``generate`` beam-decodes responses (several checkpoints form an
ensemble), ``evaluate`` scores responses against references, and
``ablate`` trains the seven pointer-source variants and tabulates their
metrics.

Settings resolve as flags > config file > desk defaults; the config file
is a JSON object whose keys are checked against a schema.  Every command
exits nonzero with a single-line ``error:`` diagnostic on malformed
input, and all randomness descends from the one ``--seed`` value.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import (
    CorpusError,
    END_ID,
    FeatureFileError,
    Vocab,
    encode_corpus,
    load_dialogs,
    save_dialogs,
    synth_copy_corpus,
    tokenize,
    write_features,
)
from .decoding import batch_generate
from .estimator import DialogResponseGenerator, split_validation, validate_examples
from .metrics import EvalPair, evaluate_corpus, format_report
from .model import CheckpointError, load_checkpoint, save_checkpoint


class CliError(Exception):
    """User-facing command-line failure; rendered as one stderr line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# Desk-scale defaults: small enough that the full ablation finishes on a
# laptop, large enough for the copy task to train cleanly.
DEFAULTS = {
    "d": 64,
    "heads": 4,
    "rounds": 2,
    "d_ff": None,
    "dropout": 0.2,
    "pointer_sources": "summary,query",
    "features": "visual,audio",
    "epochs": 20,
    "batch_size": 16,
    "warmup_steps": 400,
    "label_smoothing": 0.1,
    "alpha": 1.0,
    "beta": 1.0,
    "seed": 0,
    "beam_size": 5,
    "length_penalty": 1.0,
    "max_len": 20,
    "val_fraction": 0.1,
    "n": 200,
    "vocab_size": 100,
    "answer_mode": "mixed",
    "f_min": 2,
    "f_max": 8,
    "d_vis": 2048,
    "d_aud": 128,
}

_SCHEMA = {
    "d": int, "heads": int, "rounds": int, "d_ff": int, "dropout": float,
    "pointer_sources": str, "features": str, "epochs": int, "batch_size": int,
    "warmup_steps": int, "label_smoothing": float, "alpha": float,
    "beta": float, "seed": int, "beam_size": int, "length_penalty": float,
    "max_len": int, "val_fraction": float, "n": int, "vocab_size": int,
    "answer_mode": str, "f_min": int, "f_max": int, "d_vis": int,
    "d_aud": int, "data": str, "out": str, "vocab": str, "checkpoints": str,
    "responses": str, "references": str,
}

VARIANTS = (
    ("Summary+Query", ("summary", "query")),
    ("History+Query", ("history", "query")),
    ("Summary+History+Query", ("summary", "history", "query")),
    ("Summary", ("summary",)),
    ("Query", ("query",)),
    ("History", ("history",)),
    ("None", ()),
)

ABLATION_COLUMNS = ("variant", "bleu1", "bleu2", "bleu3", "bleu4",
                    "meteor", "rouge_l", "cider")


# ---------------------------------------------------------------------------
# settings resolution


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        record = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(record, dict):
        raise CliError(f"{path}: config must be a JSON object")
    for key, value in record.items():
        if key not in _SCHEMA:
            raise CliError(f"{path}: unknown config key {key!r}")
        if value is not None and not isinstance(value, (str, int, float, bool)):
            raise CliError(f"{path}: config key {key!r} must be a scalar")
    return record


def _resolve(args, config: dict, key: str):
    """flags > config file > defaults."""
    value = getattr(args, key, None)
    if value is None:
        value = config.get(key, DEFAULTS.get(key))
    if value is None:
        return None
    caster = _SCHEMA[key]
    try:
        return caster(value)
    except (TypeError, ValueError):
        raise CliError(f"bad value for {key}: {value!r}") from None


def _require(args, config: dict, key: str):
    value = _resolve(args, config, key)
    if value is None:
        raise CliError(f"missing required setting: {key} "
                       f"(pass --{key.replace('_', '-')} or set it in --config)")
    return value


def _parse_name_list(raw: str, allowed: tuple, what: str) -> tuple:
    """Comma lists like "summary,query"; "none" or "" mean empty."""
    raw = raw.strip().lower()
    if raw in ("none", ""):
        return ()
    names = [part.strip() for part in raw.split(",")]
    for name in names:
        if name not in allowed:
            raise CliError(f"unknown {what} {name!r} (choose from "
                           f"{', '.join(allowed)} or 'none')")
    if len(set(names)) != len(names):
        raise CliError(f"duplicate {what} in {raw!r}")
    return tuple(name for name in allowed if name in names)


def _estimator_from(args, config: dict, pointer_sources=None) -> DialogResponseGenerator:
    sources = (_parse_name_list(_resolve(args, config, "pointer_sources"),
                                ("history", "summary", "query"), "pointer source")
               if pointer_sources is None else pointer_sources)
    return DialogResponseGenerator(
        d=_resolve(args, config, "d"),
        heads=_resolve(args, config, "heads"),
        rounds=_resolve(args, config, "rounds"),
        d_ff=_resolve(args, config, "d_ff"),
        dropout=_resolve(args, config, "dropout"),
        pointer_sources=sources,
        features=_parse_name_list(_resolve(args, config, "features"),
                                  ("visual", "audio"), "feature"),
        epochs=_resolve(args, config, "epochs"),
        batch_size=_resolve(args, config, "batch_size"),
        warmup_steps=_resolve(args, config, "warmup_steps"),
        label_smoothing=_resolve(args, config, "label_smoothing"),
        alpha=_resolve(args, config, "alpha"),
        beta=_resolve(args, config, "beta"),
        beam_size=_resolve(args, config, "beam_size"),
        length_penalty=_resolve(args, config, "length_penalty"),
        max_len=_resolve(args, config, "max_len"),
        validation_fraction=_resolve(args, config, "val_fraction"),
        seed=_resolve(args, config, "seed"),
    )


# ---------------------------------------------------------------------------
# response files


def save_responses(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_responses(path) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CliError(f"{path}:{lineno}: not valid JSON ({exc})") from None
            if set(record) != {"dialog_id", "turn", "response"}:
                raise CliError(f"{path}:{lineno}: expected exactly the fields "
                               "dialog_id, turn, response")
            rows.append({"dialog_id": str(record["dialog_id"]),
                         "turn": int(record["turn"]),
                         "response": str(record["response"])})
    if not rows:
        raise CliError(f"{path}: no responses found")
    return rows


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    config = _load_config(args.config)
    out = Path(_require(args, config, "out"))
    n = _require(args, config, "n")
    f_min = _resolve(args, config, "f_min")
    f_max = _resolve(args, config, "f_max")
    corpus = synth_copy_corpus(
        seed=_resolve(args, config, "seed"),
        n_examples=n,
        vocab_size=_resolve(args, config, "vocab_size"),
        answer_mode=_resolve(args, config, "answer_mode"),
        f_range=(f_min, f_max),
        d_vis=_resolve(args, config, "d_vis"),
        d_aud=_resolve(args, config, "d_aud"),
    )
    (out / "features").mkdir(parents=True, exist_ok=True)
    for ex in corpus:
        stem = f"{ex.dialog_id}_t{ex.turn}"
        ex.vis_file = f"features/{stem}.vis"
        ex.aud_file = f"features/{stem}.aud"
        write_features(out / ex.vis_file, ex.visual)
        write_features(out / ex.aud_file, ex.audio)
    save_dialogs(out / "dialogs.jsonl", corpus)
    print(f"wrote {len(corpus)} examples to {out / 'dialogs.jsonl'}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    data_path = _require(args, config, "data")
    out = Path(_require(args, config, "out"))
    corpus = load_dialogs(data_path)
    estimator = _estimator_from(args, config)
    estimator.fit(corpus, progress=lambda s: print(s.format_line()))
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.bin", estimator.params_)
    estimator.vocab_.save(out / "vocab.txt")
    lines = ["epoch\ttrain_loss\tval_loss\tlr"]
    lines += [s.format_line() for s in estimator.history_]
    (out / "train_log.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"best epoch {estimator.best_epoch_} "
          f"(val loss {estimator.best_val_loss_:.8f}); "
          f"checkpoint written to {out / 'checkpoint.bin'}")
    return 0


def _load_models(raw: str) -> list:
    paths = [part.strip() for part in raw.split(",") if part.strip()]
    if not paths:
        raise CliError("no checkpoint paths given")
    return [load_checkpoint(p) for p in paths]


def _decode_corpus(corpus, vocab, models, beam_size, max_len, length_penalty):
    needed = tuple(dict.fromkeys(
        f for params in models for f in params.config.features))
    validate_examples(corpus, features=needed, require_answers=False)
    encoded = encode_corpus(corpus, vocab)
    results = batch_generate(encoded, models, end_id=END_ID,
                             beam_size=beam_size, max_len=max_len,
                             length_penalty=length_penalty)
    return [
        {"dialog_id": ex.dialog_id, "turn": ex.turn,
         "response": " ".join(vocab.decode(res.ids))}
        for ex, res in zip(corpus, results)
    ]


def cmd_generate(args) -> int:
    config = _load_config(args.config)
    models = _load_models(_require(args, config, "checkpoints"))
    vocab = Vocab.load(_require(args, config, "vocab"))
    for i, params in enumerate(models):
        if params.config.vocab_size != len(vocab):
            raise CliError(f"checkpoint {i} was trained with vocabulary size "
                           f"{params.config.vocab_size}, file has {len(vocab)}")
    corpus = load_dialogs(_require(args, config, "data"))
    rows = _decode_corpus(
        corpus, vocab, models,
        beam_size=_resolve(args, config, "beam_size"),
        max_len=_resolve(args, config, "max_len"),
        length_penalty=_resolve(args, config, "length_penalty"),
    )
    out = Path(_require(args, config, "out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    save_responses(out, rows)
    print(f"wrote {len(rows)} responses to {out}")
    return 0


def _paired_scores(responses, references) -> dict:
    ref_map = {}
    for ex in references:
        key = (ex.dialog_id, ex.turn)
        if key in ref_map:
            raise CliError(f"duplicate reference for dialog {key[0]} turn {key[1]}")
        ref_map[key] = ex.answer
    pairs = []
    for row in responses:
        key = (row["dialog_id"], row["turn"])
        if key not in ref_map:
            raise CliError(f"no reference for dialog {key[0]} turn {key[1]}")
        pairs.append(EvalPair(tokenize(row["response"]), [tokenize(ref_map[key])]))
    return evaluate_corpus(pairs)


def cmd_evaluate(args) -> int:
    config = _load_config(args.config)
    responses = load_responses(_require(args, config, "responses"))
    references = load_dialogs(_require(args, config, "references"),
                              load_feature_files=False)
    scores = _paired_scores(responses, references)
    report = (json.dumps(scores, sort_keys=True) if args.json
              else format_report(scores))
    print(f"pairs  {len(responses)}")
    print(report)
    out = _resolve(args, config, "out")
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(report + "\n", encoding="utf-8")
    return 0


def _format_table(rows) -> str:
    widths = [max(len(str(row[i])) for row in rows) for i in range(len(rows[0]))]
    return "\n".join(
        "  ".join(f"{str(cell):<{w}}" for cell, w in zip(row, widths)).rstrip()
        for row in rows
    )


def cmd_ablate(args) -> int:
    config = _load_config(args.config)
    data_path = _require(args, config, "data")
    out = Path(_require(args, config, "out"))
    corpus = load_dialogs(data_path)
    table = [list(ABLATION_COLUMNS)]
    for name, sources in VARIANTS:
        estimator = _estimator_from(args, config, pointer_sources=sources)
        estimator.fit(corpus)
        # The split is a pure function of the shared seed, so every
        # variant is scored on the same held-out examples.
        _, val = split_validation(corpus, estimator.validation_fraction,
                                  estimator.seed)
        rows = _decode_corpus(val, estimator.vocab_, [estimator.params_],
                              beam_size=estimator.beam_size,
                              max_len=estimator.max_len,
                              length_penalty=estimator.length_penalty)
        scores = _paired_scores(rows, val)
        slug = name.lower().replace("+", "_")
        variant_dir = out / slug
        variant_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(variant_dir / "checkpoint.bin", estimator.params_)
        estimator.vocab_.save(variant_dir / "vocab.txt")
        save_responses(variant_dir / "responses.jsonl", rows)
        table.append([
            name,
            f"{scores['bleu1']:.4f}", f"{scores['bleu2']:.4f}",
            f"{scores['bleu3']:.4f}", f"{scores['bleu4']:.4f}",
            "-",
            f"{scores['rouge_l']:.4f}", f"{scores['cider']:.4f}",
        ])
        print(f"{name}: bleu1={scores['bleu1']:.4f} rouge_l={scores['rouge_l']:.4f}")
    tsv = "\n".join("\t".join(row) for row in table) + "\n"
    (out / "ablation.tsv").write_text(tsv, encoding="utf-8")
    print(_format_table(table))
    print(f"table written to {out / 'ablation.tsv'}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(parser) -> None:
    parser.add_argument("--config", help="JSON settings file")
    parser.add_argument("--seed", type=int)


def _add_model_flags(parser) -> None:
    parser.add_argument("--d", type=int)
    parser.add_argument("--heads", type=int)
    parser.add_argument("--rounds", type=int)
    parser.add_argument("--d-ff", dest="d_ff", type=int)
    parser.add_argument("--dropout", type=float)
    parser.add_argument("--pointer-sources", dest="pointer_sources",
                        help="comma list from {history,summary,query}, or 'none'")
    parser.add_argument("--features",
                        help="comma list from {visual,audio}, or 'none'")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    parser.add_argument("--label-smoothing", dest="label_smoothing", type=float)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--val-fraction", dest="val_fraction", type=float)


def _add_decode_flags(parser) -> None:
    parser.add_argument("--beam-size", dest="beam_size", type=int)
    parser.add_argument("--length-penalty", dest="length_penalty", type=float)
    parser.add_argument("--max-len", dest="max_len", type=int)


def build_parser() -> _Parser:
    parser = _Parser(prog="pointergen",
                     description="Multimodal dialog-response generator "
                                 "with pointer-based copying.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth-data", help="write a seeded copy-task corpus")
    _add_common(p)
    p.add_argument("--out")
    p.add_argument("--n", type=int)
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--answer-mode", dest="answer_mode",
                   choices=("summary", "query", "mixed"))
    p.add_argument("--f-min", dest="f_min", type=int)
    p.add_argument("--f-max", dest="f_max", type=int)
    p.add_argument("--d-vis", dest="d_vis", type=int)
    p.add_argument("--d-aud", dest="d_aud", type=int)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="fit a model and write a checkpoint")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--out")
    _add_model_flags(p)
    _add_decode_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="beam-decode responses "
                                        "(several checkpoints form an ensemble)")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoints", help="comma list of checkpoint files")
    p.add_argument("--vocab")
    p.add_argument("--out")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score responses against references")
    _add_common(p)
    p.add_argument("--responses")
    p.add_argument("--references")
    p.add_argument("--out", help="also write the report to this file")
    p.add_argument("--json", action="store_true",
                   help="emit the report as a JSON object")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train the seven pointer-source "
                                      "variants and tabulate their metrics")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--out")
    _add_model_flags(p)
    _add_decode_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            raise CliError("choose a command: synth-data, train, generate, "
                           "evaluate, ablate")
        return args.func(args)
    except (CliError, CorpusError, FeatureFileError, CheckpointError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
