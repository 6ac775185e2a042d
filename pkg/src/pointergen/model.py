"""Model assembly: configuration, parameters, the query-guided encoder,
the six-stage decoder cascade, auxiliary query reconstruction heads,
and checkpoint serialization.

The encoder runs one stream per enabled feature modality.  Each round
applies query self-attention and then cross-attention onto the
projected modality features, with the round's output feeding the next
round.  The decoder applies, per round, causal self-attention over the
response followed by cross-attention onto history, summary, query, and
the two query-guided modality summaries in that order; disabled
modalities simply drop their stage and their parameters.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError
from .attention import (
    AttentionBlockParams,
    FeedForwardParams,
    MultiHeadParams,
    add_positions,
    attention_block,
    progressive_rounds,
)
from .data import END_ID, PAD_ID, START_ID, EncodedExample, strip_padding
from .pointer import compose_output_distribution

POINTER_SOURCE_NAMES = ("history", "summary", "query")
FEATURE_NAMES = ("visual", "audio")

CHECKPOINT_MAGIC = b"MTNCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file failed structural validation."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.  Parameter shapes and counts are a
    pure function of this record."""

    vocab_size: int
    d: int = 512
    heads: int = 16
    rounds: int = 6
    d_ff: Optional[int] = None
    d_vis: int = 2048
    d_aud: int = 128
    dropout: float = 0.5
    pointer_sources: tuple = ("summary", "query")
    features: tuple = ("visual", "audio")

    def __post_init__(self):
        if self.vocab_size <= 5:
            raise ValueError(f"vocab_size must exceed the reserved ids, got {self.vocab_size}")
        if self.d < 2 or self.heads < 1 or self.d % self.heads != 0:
            raise ValueError(f"width {self.d} is not divisible into {self.heads} heads")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        object.__setattr__(self, "pointer_sources", tuple(self.pointer_sources))
        object.__setattr__(self, "features", tuple(self.features))
        unknown = set(self.pointer_sources) - set(POINTER_SOURCE_NAMES)
        if unknown:
            raise ValueError(f"unknown pointer sources {sorted(unknown)}")
        if len(set(self.pointer_sources)) != len(self.pointer_sources):
            raise ValueError("duplicate pointer sources")
        unknown = set(self.features) - set(FEATURE_NAMES)
        if unknown:
            raise ValueError(f"unknown feature modalities {sorted(unknown)}")
        if len(set(self.features)) != len(self.features):
            raise ValueError("duplicate feature modalities")

    @property
    def ff_width(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d

    def feature_width(self, modality: str) -> int:
        return self.d_vis if modality == "visual" else self.d_aud


def decoder_stages(config: ModelConfig) -> list[str]:
    """Cross-attention cascade order for one decoder round."""
    stages = ["res2res", "res2his", "res2cap", "res2que"]
    if "audio" in config.features:
        stages.append("res2aud")
    if "visual" in config.features:
        stages.append("res2vis")
    return stages


def enabled_modalities(config: ModelConfig) -> list[str]:
    # Fixed registry order regardless of how the config lists them.
    return [m for m in FEATURE_NAMES if m in config.features]


class ModelParams:
    """All learnable tensors of one model, iterable in registry order."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.embed: Tensor = None
        self.feature_proj: dict = {}        # modality -> (w, b)
        self.encoder: dict = {}             # modality -> [(self_block, cross_block)]
        self.decoder: list = []             # round -> {stage: block}
        self.w_gen: Tensor = None
        self.w_ctx: Tensor = None

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "embed", self.embed
        for modality in enabled_modalities(self.config):
            w, b = self.feature_proj[modality]
            yield f"{modality}_proj.w", w
            yield f"{modality}_proj.b", b
        for modality in enabled_modalities(self.config):
            for r, (self_block, cross_block) in enumerate(self.encoder[modality]):
                yield from _named_block(f"enc.{modality}.r{r}.self", self_block)
                yield from _named_block(f"enc.{modality}.r{r}.cross", cross_block)
        for r, stages in enumerate(self.decoder):
            for stage in decoder_stages(self.config):
                yield from _named_block(f"dec.r{r}.{stage}", stages[stage])
        yield "w_gen", self.w_gen
        yield "w_ctx", self.w_ctx

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.values.size for t in self.tensors())

    def copy_values(self) -> dict:
        return {name: t.values.copy() for name, t in self.named_parameters()}

    def load_values(self, values: dict) -> None:
        names = [name for name, _ in self.named_parameters()]
        missing = set(names) - values.keys()
        extra = values.keys() - set(names)
        if missing or extra:
            raise CheckpointError(
                f"parameter names do not match the configuration "
                f"(missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]})"
            )
        for name, t in self.named_parameters():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != t.values.shape:
                raise CheckpointError(
                    f"parameter {name}: shape {arr.shape} does not match {t.values.shape}"
                )
            t.values = arr.copy()


def _named_block(prefix: str, block: AttentionBlockParams):
    yield f"{prefix}.wq", block.mha.w_q
    yield f"{prefix}.wk", block.mha.w_k
    yield f"{prefix}.wv", block.mha.w_v
    yield f"{prefix}.wo", block.mha.w_o
    yield f"{prefix}.ff.w1", block.ff.w1
    yield f"{prefix}.ff.b1", block.ff.b1
    yield f"{prefix}.ff.w2", block.ff.w2
    yield f"{prefix}.ff.b2", block.ff.b2
    yield f"{prefix}.ln.gain", block.ln_gain
    yield f"{prefix}.ln.bias", block.ln_bias


def _uniform_fan(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    limit = math.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-limit, limit, size=(rows, cols)), requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def _ones(n: int) -> Tensor:
    return Tensor(np.ones(n), requires_grad=True)


def _init_block(rng: np.random.Generator, d: int, heads: int, d_ff: int) -> AttentionBlockParams:
    return AttentionBlockParams(
        mha=MultiHeadParams(
            w_q=_uniform_fan(rng, d, d),
            w_k=_uniform_fan(rng, d, d),
            w_v=_uniform_fan(rng, d, d),
            w_o=_uniform_fan(rng, d, d),
            heads=heads,
        ),
        ff=FeedForwardParams(
            w1=_uniform_fan(rng, d, d_ff),
            b1=_zeros(d_ff),
            w2=_uniform_fan(rng, d_ff, d),
            b2=_zeros(d),
        ),
        ln_gain=_ones(d),
        ln_bias=_zeros(d),
    )


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Draw all weight matrices from the fan-scaled uniform distribution
    in registry order, so the same seed always yields the same model."""
    rng = np.random.default_rng(seed)
    d, heads, d_ff = config.d, config.heads, config.ff_width
    params = ModelParams(config)
    params.embed = _uniform_fan(rng, config.vocab_size, d)
    for modality in enabled_modalities(config):
        params.feature_proj[modality] = (
            _uniform_fan(rng, config.feature_width(modality), d),
            _zeros(d),
        )
    for modality in enabled_modalities(config):
        params.encoder[modality] = [
            (_init_block(rng, d, heads, d_ff), _init_block(rng, d, heads, d_ff))
            for _ in range(config.rounds)
        ]
    params.decoder = [
        {stage: _init_block(rng, d, heads, d_ff) for stage in decoder_stages(config)}
        for _ in range(config.rounds)
    ]
    params.w_gen = _uniform_fan(rng, d, config.vocab_size)
    params.w_ctx = _uniform_fan(rng, 5 * d, 4)
    return params


# ---------------------------------------------------------------------------
# forward passes


@dataclass
class EncoderOutputs:
    """Text embeddings plus the query-guided modality summaries."""

    z_que: Tensor
    z_his: Tensor
    z_cap: Tensor
    z_que2vis: Optional[Tensor] = None
    z_que2aud: Optional[Tensor] = None


@dataclass
class ForwardOutputs:
    p_vocab: Tensor                     # (L_Y, vocab) mixed output rows
    p_qae_vis: Optional[Tensor] = None  # (L_que, vocab)
    p_qae_aud: Optional[Tensor] = None


def embed_text(ids: np.ndarray, params: ModelParams, dropout_rate: float = 0.0,
               training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Token embedding plus the position signal.

    Embeddings are deliberately not magnified before the position
    signal is added: these rows double as pointer keys, so any
    multiplier lands inside the decoder-state/key dot product and
    saturates the pointer softmax at initialization, which stalls
    pointer training.
    """
    emb = T.embedding_lookup(params.embed, ids)
    return T.dropout(add_positions(emb), dropout_rate, training, rng)


def encode_query_guided(
    z_que: Tensor,
    features: dict,
    params: ModelParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> dict:
    """Per enabled modality, progressively refine the query against the
    projected features.  Returns modality name -> (L_que, d)."""
    config = params.config
    outputs = {}
    for modality in enabled_modalities(config):
        feats = features.get(modality)
        if feats is None:
            raise ShapeError(f"configuration enables {modality} features but none were given")
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != config.feature_width(modality):
            raise ShapeError(
                f"{modality} features must be (F, {config.feature_width(modality)}), got {feats.shape}"
            )
        w, b = params.feature_proj[modality]
        z_mod = T.add(T.matmul(Tensor(feats), w), b)
        blocks = params.encoder[modality]

        def step(z, r, z_mod=z_mod, blocks=blocks):
            z = attention_block(z, z, blocks[r][0], dropout_rate=config.dropout,
                                training=training, rng=rng)
            return attention_block(z, z_mod, blocks[r][1], dropout_rate=config.dropout,
                                   training=training, rng=rng)

        outputs[modality] = progressive_rounds(z_que, step, config.rounds)
    return outputs


def encode_example(
    example: EncodedExample,
    params: ModelParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> EncoderOutputs:
    config = params.config
    que_ids = strip_padding(example.query)
    his_ids = strip_padding(example.history)
    cap_ids = strip_padding(example.summary)
    if que_ids.size == 0:
        raise ShapeError("cannot encode a zero-length query")
    if cap_ids.size == 0:
        raise ShapeError("cannot encode a zero-length summary")
    z_que = embed_text(que_ids, params, config.dropout, training, rng)
    z_his = embed_text(his_ids, params, config.dropout, training, rng)
    z_cap = embed_text(cap_ids, params, config.dropout, training, rng)
    enc = EncoderOutputs(z_que=z_que, z_his=z_his, z_cap=z_cap)
    if enabled_modalities(config):
        guided = encode_query_guided(
            z_que, {"visual": example.visual, "audio": example.audio}, params,
            training, rng,
        )
        enc.z_que2vis = guided.get("visual")
        enc.z_que2aud = guided.get("audio")
    return enc


def decode_responses(
    z_res: Tensor,
    enc: EncoderOutputs,
    params: ModelParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Run the decoder cascade over an embedded response prefix."""
    config = params.config
    streams = {
        "res2his": enc.z_his,
        "res2cap": enc.z_cap,
        "res2que": enc.z_que,
        "res2aud": enc.z_que2aud,
        "res2vis": enc.z_que2vis,
    }
    stages = decoder_stages(config)

    def step(z, r):
        for stage in stages:
            source = z if stage == "res2res" else streams[stage]
            z = attention_block(
                z, source, params.decoder[r][stage],
                causal=(stage == "res2res"),
                dropout_rate=config.dropout, training=training, rng=rng,
            )
        return z

    return progressive_rounds(z_res, step, config.rounds)


def qae_distributions(enc: EncoderOutputs, params: ModelParams) -> tuple:
    """Query reconstruction distributions through the shared output map."""
    p_vis = p_aud = None
    if enc.z_que2vis is not None:
        p_vis = T.softmax_rows(T.matmul(enc.z_que2vis, params.w_gen))
    if enc.z_que2aud is not None:
        p_aud = T.softmax_rows(T.matmul(enc.z_que2aud, params.w_gen))
    return p_vis, p_aud


def decoder_input_ids(target: np.ndarray) -> np.ndarray:
    """Teacher-forced decoder input: start marker, then all but the last
    target token (the end marker)."""
    target = strip_padding(target)
    return np.concatenate([np.array([START_ID], dtype=np.int64), target[:-1]])


def forward(
    example: EncodedExample,
    params: ModelParams,
    prefix_ids: Optional[np.ndarray] = None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    enc: Optional[EncoderOutputs] = None,
    with_qae: bool = True,
) -> ForwardOutputs:
    """Full pass from one example to output-row distributions.

    With prefix_ids=None the decoder is teacher-forced on the example's
    target; otherwise prefix_ids (starting with the start marker) drive
    incremental decoding.  Pointer keys and mixture context use plain
    embedded source tokens, kept outside dropout: the output head is a
    generator-side layer.
    """
    config = params.config
    if enc is None:
        enc = encode_example(example, params, training, rng)
    if prefix_ids is None:
        dec_input = decoder_input_ids(example.target)
    else:
        dec_input = np.asarray(prefix_ids, dtype=np.int64)
        if dec_input.size == 0 or dec_input[0] != START_ID:
            raise ShapeError("decoder prefix must begin with the start marker")
    z_res = embed_text(dec_input, params, config.dropout, training, rng)
    z_dec = decode_responses(z_res, enc, params, training, rng)

    source_ids = {
        "history": strip_padding(example.history),
        "summary": strip_padding(example.summary),
        "query": strip_padding(example.query),
    }
    source_reps = {name: embed_text(ids, params) for name, ids in source_ids.items()}
    p_vocab = compose_output_distribution(
        z_dec, z_res, source_reps, source_ids, config.pointer_sources,
        params.w_gen, params.w_ctx, config.vocab_size,
    )
    p_vis = p_aud = None
    if with_qae:
        p_vis, p_aud = qae_distributions(enc, params)
    return ForwardOutputs(p_vocab=p_vocab, p_qae_vis=p_vis, p_qae_aud=p_aud)


# ---------------------------------------------------------------------------
# checkpoints


def _config_to_dict(config: ModelConfig) -> dict:
    return {
        "vocab_size": config.vocab_size,
        "d": config.d,
        "heads": config.heads,
        "rounds": config.rounds,
        "d_ff": config.d_ff,
        "d_vis": config.d_vis,
        "d_aud": config.d_aud,
        "dropout": config.dropout,
        "pointer_sources": list(config.pointer_sources),
        "features": list(config.features),
    }


def config_from_dict(record: dict) -> ModelConfig:
    record = dict(record)
    record["pointer_sources"] = tuple(record.get("pointer_sources", ()))
    record["features"] = tuple(record.get("features", ()))
    return ModelConfig(**record)


def save_checkpoint(path, params: ModelParams) -> None:
    """Self-describing binary checkpoint: magic, version byte, a JSON
    config echo, then named float64 tensors, all little-endian."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<B", CHECKPOINT_VERSION))
    blob = json.dumps(_config_to_dict(params.config), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    named = list(params.named_parameters())
    buf.write(struct.pack("<I", len(named)))
    for name, t in named:
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        shape = t.values.shape
        buf.write(struct.pack("<B", len(shape)))
        for dim in shape:
            buf.write(struct.pack("<I", dim))
        buf.write(t.values.astype("<f8").tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    view = io.BytesIO(raw)

    def read(n: int, what: str) -> bytes:
        chunk = view.read(n)
        if len(chunk) != n:
            raise CheckpointError(f"{path}: truncated while reading {what}")
        return chunk

    if read(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a model checkpoint")
    (version,) = struct.unpack("<B", read(1, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (blob_len,) = struct.unpack("<I", read(4, "config length"))
    try:
        config = config_from_dict(json.loads(read(blob_len, "config").decode("utf-8")))
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid config echo ({exc})") from None
    (count,) = struct.unpack("<I", read(4, "tensor count"))
    values = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", read(2, "name length"))
        name = read(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", read(1, "rank"))
        shape = tuple(struct.unpack("<I", read(4, "dim"))[0] for _ in range(ndim))
        n_values = int(np.prod(shape)) if shape else 1
        data = read(8 * n_values, f"values of {name}")
        values[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    if view.read(1):
        raise CheckpointError(f"{path}: trailing bytes after the last tensor")
    params = init_params(config, seed=0)
    params.load_values(values)
    return params
