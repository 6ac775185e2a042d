"""Losses, the optimizer, and the training loop.

The objective is the generation loss over mixed output distributions
plus weighted auxiliary query-reconstruction losses, one per enabled
modality.  All losses are averaged per token so batch composition does
not rescale the learning rate.  Training is fully deterministic given
TrainConfig.seed: it drives parameter initialization, epoch shuffling,
and dropout through independent spawned streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import LOG_FLOOR, Tensor
from .data import PAD_ID, EncodedExample, make_batches, strip_padding
from .model import (
    ForwardOutputs,
    ModelConfig,
    ModelParams,
    forward,
    init_params,
)


@dataclass
class TrainConfig:
    """Optimization settings.  Defaults follow the reference protocol;
    desk-scale runs override warmup and batch size from the CLI."""

    epochs: int = 50
    batch_size: int = 32
    warmup_steps: int = 13000
    label_smoothing: float = 0.1
    alpha: float = 1.0          # visual query-reconstruction weight
    beta: float = 1.0           # audio query-reconstruction weight
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.epochs <= 50):
            raise ValueError(f"epochs must be in [1, 50], got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")


# ---------------------------------------------------------------------------
# losses


def smoothed_targets(target_ids: np.ndarray, vocab_size: int, eps: float,
                     pad_id: int = PAD_ID) -> np.ndarray:
    """Row-stochastic target matrix: 1-eps on the gold id, eps spread
    uniformly over every other non-pad id."""
    ids = np.asarray(target_ids, dtype=np.int64)
    if eps > 0 and vocab_size < 3:
        raise ValueError("label smoothing needs at least one non-gold, non-pad id")
    q = np.zeros((ids.size, vocab_size))
    if eps > 0:
        q[:] = eps / (vocab_size - 2)
        q[:, pad_id] = 0.0
    q[np.arange(ids.size), ids] = 1.0 - eps
    return q


def cross_entropy(p: Tensor, targets: np.ndarray) -> Tensor:
    """Mean per-row cross entropy between row-stochastic targets and a
    predicted distribution, with the log floored for stability."""
    rows = p.values.shape[0]
    if targets.shape != p.values.shape:
        raise T.ShapeError(f"targets shape {targets.shape} != predictions {p.values.shape}")
    log_p = T.log(T.clamp_min(p, LOG_FLOOR))
    return T.scale(T.sum_all(T.mul(log_p, Tensor(targets))), -1.0 / rows)


def generation_loss(p_vocab: Tensor, target_ids: np.ndarray, eps: float,
                    vocab_size: int) -> Tensor:
    """Label-smoothed cross entropy of the mixed output rows against the
    gold response tokens."""
    ids = strip_padding(np.asarray(target_ids, dtype=np.int64))
    return cross_entropy(p_vocab, smoothed_targets(ids, vocab_size, eps))


def qae_loss(p: Optional[Tensor], query_ids: np.ndarray, vocab_size: int) -> Optional[Tensor]:
    """Plain cross entropy for reconstructing the query; None when the
    modality is disabled."""
    if p is None:
        return None
    ids = strip_padding(np.asarray(query_ids, dtype=np.int64))
    return cross_entropy(p, smoothed_targets(ids, vocab_size, eps=0.0))


def joint_loss(l_gen: Tensor, l_vis: Optional[Tensor], l_aud: Optional[Tensor],
               alpha: float, beta: float) -> Tensor:
    """Generation loss plus weighted auxiliaries; a disabled modality
    contributes exactly zero."""
    total = l_gen
    if l_vis is not None:
        total = T.add(total, T.scale(l_vis, alpha))
    if l_aud is not None:
        total = T.add(total, T.scale(l_aud, beta))
    return total


def example_loss(out: ForwardOutputs, example: EncodedExample, config: ModelConfig,
                 train_cfg: TrainConfig) -> Tensor:
    l_gen = generation_loss(out.p_vocab, example.target, train_cfg.label_smoothing,
                            config.vocab_size)
    l_vis = qae_loss(out.p_qae_vis, example.query, config.vocab_size)
    l_aud = qae_loss(out.p_qae_aud, example.query, config.vocab_size)
    return joint_loss(l_gen, l_vis, l_aud, train_cfg.alpha, train_cfg.beta)


# ---------------------------------------------------------------------------
# optimizer


def noam_lr(step: int, d: int, warmup_steps: int) -> float:
    """Inverse-sqrt schedule with linear warmup, peaking at warmup_steps."""
    if step < 1:
        raise ValueError(f"schedule steps start at 1, got {step}")
    return d ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


@dataclass
class OptimizerState:
    """Adam moment estimates keyed by parameter name."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_optimizer(params: ModelParams) -> OptimizerState:
    state = OptimizerState()
    for name, t in params.named_parameters():
        state.m[name] = np.zeros_like(t.values)
        state.v[name] = np.zeros_like(t.values)
    return state


def adam_step(params: ModelParams, state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9) -> None:
    """One bias-corrected Adam update from the accumulated gradients.
    Parameters whose gradient is unset are treated as zero-gradient."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.named_parameters():
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        p.values = p.values - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float

    def format_line(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.8f}\t{self.val_loss:.8f}\t{self.lr:.8e}"


@dataclass
class TrainResult:
    params: ModelParams
    history: list
    best_epoch: int
    best_val_loss: float

    def log_lines(self) -> list[str]:
        header = "epoch\ttrain_loss\tval_loss\tlr"
        return [header] + [s.format_line() for s in self.history]


def evaluate_loss(params: ModelParams, examples: Sequence[EncodedExample],
                  config: ModelConfig, train_cfg: TrainConfig) -> float:
    """Average per-example joint loss with dropout disabled."""
    if not examples:
        raise ValueError("cannot evaluate on an empty example list")
    total = 0.0
    with T.no_grad():
        for ex in examples:
            out = forward(ex, params, training=False)
            total += example_loss(out, ex, config, train_cfg).item()
    return total / len(examples)


def train(
    config: ModelConfig,
    train_cfg: TrainConfig,
    train_examples: Sequence[EncodedExample],
    val_examples: Sequence[EncodedExample],
    progress: Optional[Callable[[EpochStats], None]] = None,
) -> TrainResult:
    """Train from scratch, selecting the epoch with the lowest validation
    loss (earliest wins ties).  Returns the selected parameters.

    One optimizer step per batch; the gradient is the batch mean of
    per-example joint losses.  ``progress``, when given, receives each
    EpochStats as it is produced.
    """
    if not train_examples:
        raise ValueError("cannot train on an empty corpus")
    root = np.random.SeedSequence(train_cfg.seed)
    init_ss, shuffle_ss, dropout_ss = root.spawn(3)
    params = init_params(config, seed=init_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)
    opt = init_optimizer(params)

    tensors = params.tensors()
    history: list[EpochStats] = []
    best_val = np.inf
    best_values = None
    best_epoch = -1
    step = 0
    lr = 0.0
    for epoch in range(1, train_cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_examples))
        shuffled = [train_examples[i] for i in order]
        loss_sum = 0.0
        for batch in make_batches(shuffled, train_cfg.batch_size):
            T.zero_grads(tensors)
            inv = 1.0 / len(batch)
            for ex in batch.examples:
                out = forward(ex, params, training=True, rng=dropout_rng)
                loss = example_loss(out, ex, config, train_cfg)
                T.backward(T.scale(loss, inv))
                loss_sum += loss.item()
            step += 1
            lr = noam_lr(step, config.d, train_cfg.warmup_steps)
            adam_step(params, opt, lr)
        train_loss = loss_sum / len(train_examples)
        val_loss = evaluate_loss(params, val_examples, config, train_cfg)
        stats = EpochStats(epoch=epoch, train_loss=train_loss, val_loss=val_loss, lr=lr)
        history.append(stats)
        if progress is not None:
            progress(stats)
        if val_loss < best_val:
            best_val = val_loss
            best_values = params.copy_values()
            best_epoch = epoch
    params.load_values(best_values)
    T.zero_grads(tensors)
    return TrainResult(params=params, history=history, best_epoch=best_epoch,
                       best_val_loss=best_val)
