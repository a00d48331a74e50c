"""SFT, ORPO, DPO, and KTO objectives over a tabular autoregressive toy model.

The toy model maps a fixed-width context window to next-symbol logits, so
sequence log-likelihoods and their exact parameter gradients are cheap. All
preference math lives in log space: odds are computed with a stable
log(1 - exp(x)) complement and -log(sigmoid(x)) via the softplus identity, so
nothing overflows even for log-probabilities in the hundreds.
"""

from __future__ import annotations

import math
import random
import warnings
from dataclasses import dataclass

import numpy as np

PAD_CONTEXT_WIDTH = 2
MAX_VOCAB = 64


def log1mexp(x: float) -> float:
    """log(1 - exp(x)) for x < 0, stable across both regimes."""
    if x >= 0:
        raise ValueError(f"log1mexp requires x < 0: {x}")
    if x > -math.log(2):
        return math.log(-math.expm1(x))
    return math.log1p(-math.exp(x))


def softplus(x: float) -> float:
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def odds_from_logprob(logp: float) -> float:
    """Log-odds log(P / (1-P)) from a log-probability; requires logp < 0."""
    if logp >= 0:
        raise ValueError(f"odds are defined only for log-probabilities < 0: {logp}")
    return logp - log1mexp(logp)


def _odds_slope(logp: float) -> float:
    """d(log-odds)/d(logp) = 1 / (1 - exp(logp))."""
    return 1.0 / -math.expm1(logp)


class ToyModel:
    """Tabular next-symbol model: (context window, symbol) -> logit.

    Contexts are tuples of `width` ids over the vocabulary plus one padding id
    (= vocab_size) used to left-pad short histories.
    """

    def __init__(self, vocab_size: int, width: int = PAD_CONTEXT_WIDTH, params: np.ndarray | None = None):
        if not 2 <= vocab_size <= MAX_VOCAB:
            raise ValueError(f"vocab_size must be within [2, {MAX_VOCAB}]: {vocab_size}")
        if width < 1:
            raise ValueError(f"context width must be >= 1: {width}")
        self.vocab_size = vocab_size
        self.width = width
        self.pad_id = vocab_size
        n_contexts = (vocab_size + 1) ** width
        if params is None:
            params = np.zeros((n_contexts, vocab_size))
        if params.shape != (n_contexts, vocab_size):
            raise ValueError(f"params must have shape {(n_contexts, vocab_size)}: {params.shape}")
        self.params = np.asarray(params, dtype=np.float64)

    @classmethod
    def uniform(cls, vocab_size: int, width: int = PAD_CONTEXT_WIDTH) -> "ToyModel":
        return cls(vocab_size, width)

    @classmethod
    def random(cls, vocab_size: int, width: int = PAD_CONTEXT_WIDTH, seed: int = 0, scale: float = 1.0) -> "ToyModel":
        rng = np.random.default_rng(seed)
        n_contexts = (vocab_size + 1) ** width
        return cls(vocab_size, width, rng.normal(0.0, scale, size=(n_contexts, vocab_size)))

    def copy(self) -> "ToyModel":
        return ToyModel(self.vocab_size, self.width, self.params.copy())

    def zero_grad(self) -> np.ndarray:
        return np.zeros_like(self.params)

    def context_index(self, context) -> int:
        index = 0
        for symbol in context:
            if not 0 <= symbol <= self.pad_id:
                raise ValueError(f"symbol {symbol} outside vocabulary+pad range")
            index = index * (self.vocab_size + 1) + symbol
        return index

    def next_distribution(self, context) -> np.ndarray:
        row = self.params[self.context_index(context)]
        shifted = row - row.max()
        e = np.exp(shifted)
        return e / e.sum()

    def _validate_sequence(self, seq, name: str):
        for symbol in seq:
            if not 0 <= symbol < self.vocab_size:
                raise ValueError(f"{name} symbol {symbol} outside the vocabulary")


def seq_logprob(
    model: ToyModel, context, target, normalize: bool = True
) -> tuple[float, np.ndarray]:
    """Sequence log-likelihood of `target` given `context`, with its gradient.

    With normalize the sum of next-symbol log-probabilities is divided by the
    target length. An empty target scores 0 by convention.
    """
    model._validate_sequence(context, "context")
    model._validate_sequence(target, "target")
    grad = model.zero_grad()
    if len(target) == 0:
        warnings.warn("seq_logprob of an empty target is 0 by convention", stacklevel=2)
        return 0.0, grad
    history = [model.pad_id] * model.width + list(context)
    total = 0.0
    for symbol in target:
        window = tuple(history[-model.width:])
        idx = model.context_index(window)
        row = model.params[idx]
        shifted = row - row.max()
        log_z = math.log(np.exp(shifted).sum()) + row.max()
        total += row[symbol] - log_z
        probs = np.exp(row - log_z)
        grad[idx] -= probs
        grad[idx, symbol] += 1.0
        history.append(symbol)
    if normalize:
        total /= len(target)
        grad /= len(target)
    return total, grad


@dataclass(frozen=True)
class LossConfig:
    orpo_weight: float = 1.0
    beta: float = 0.1
    length_normalize: bool = True
    desirable_weight: float = 1.0
    undesirable_weight: float = 1.0

    def __post_init__(self):
        if self.orpo_weight < 0:
            raise ValueError(f"orpo_weight must be >= 0: {self.orpo_weight}")
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0: {self.beta}")


@dataclass(frozen=True)
class SequenceRecord:
    context: tuple[int, ...]
    target: tuple[int, ...]


@dataclass(frozen=True)
class PreferenceRecord:
    context: tuple[int, ...]
    chosen: tuple[int, ...]
    rejected: tuple[int, ...]


@dataclass(frozen=True)
class LabeledRecord:
    context: tuple[int, ...]
    target: tuple[int, ...]
    desirable: bool


def sft_loss(model: ToyModel, record: SequenceRecord, config: LossConfig) -> tuple[float, np.ndarray]:
    logp, grad = seq_logprob(model, record.context, record.target, config.length_normalize)
    return -logp, -grad


def log_odds_ratio(model: ToyModel, record: PreferenceRecord, config: LossConfig) -> float:
    lp_c, _ = seq_logprob(model, record.context, record.chosen, config.length_normalize)
    lp_r, _ = seq_logprob(model, record.context, record.rejected, config.length_normalize)
    return odds_from_logprob(lp_c) - odds_from_logprob(lp_r)


def orpo_loss(model: ToyModel, record: PreferenceRecord, config: LossConfig) -> tuple[float, np.ndarray]:
    """SFT loss on the chosen sequence plus the weighted odds-ratio penalty."""
    lp_c, g_c = seq_logprob(model, record.context, record.chosen, config.length_normalize)
    lp_r, g_r = seq_logprob(model, record.context, record.rejected, config.length_normalize)
    ratio = odds_from_logprob(lp_c) - odds_from_logprob(lp_r)
    penalty = softplus(-ratio)
    value = -lp_c + config.orpo_weight * penalty
    d_ratio = -sigmoid(-ratio)
    grad = -g_c + config.orpo_weight * d_ratio * (
        _odds_slope(lp_c) * g_c - _odds_slope(lp_r) * g_r
    )
    return value, grad


def dpo_loss(
    model: ToyModel, reference: ToyModel, record: PreferenceRecord, config: LossConfig
) -> tuple[float, np.ndarray]:
    lp_c, g_c = seq_logprob(model, record.context, record.chosen, config.length_normalize)
    lp_r, g_r = seq_logprob(model, record.context, record.rejected, config.length_normalize)
    ref_c, _ = seq_logprob(reference, record.context, record.chosen, config.length_normalize)
    ref_r, _ = seq_logprob(reference, record.context, record.rejected, config.length_normalize)
    delta = (lp_c - ref_c) - (lp_r - ref_r)
    value = softplus(-config.beta * delta)
    grad = -config.beta * sigmoid(-config.beta * delta) * (g_c - g_r)
    return value, grad


def kto_loss(
    model: ToyModel,
    reference: ToyModel,
    records,
    config: LossConfig,
    reference_point: float | None = None,
) -> tuple[float, np.ndarray]:
    """Mean Kahneman-Tversky loss. The reference point defaults to the
    batch-mean reward and is a constant with respect to the gradient (a
    stop-gradient), so finite-difference checks must hold it fixed."""
    records = list(records)
    if not records:
        raise ValueError("kto_loss requires a non-empty batch")
    rewards = []
    grads = []
    for record in records:
        lp, g = seq_logprob(model, record.context, record.target, config.length_normalize)
        ref, _ = seq_logprob(reference, record.context, record.target, config.length_normalize)
        rewards.append(lp - ref)
        grads.append(g)
    z0 = reference_point if reference_point is not None else sum(rewards) / len(rewards)
    total = 0.0
    grad = model.zero_grad()
    for record, reward, g in zip(records, rewards, grads):
        if record.desirable:
            u = config.beta * (reward - z0)
            total += config.desirable_weight * (1.0 - sigmoid(u))
            slope = -config.desirable_weight * config.beta * sigmoid(u) * (1.0 - sigmoid(u))
        else:
            u = config.beta * (z0 - reward)
            total += config.undesirable_weight * (1.0 - sigmoid(u))
            slope = config.undesirable_weight * config.beta * sigmoid(u) * (1.0 - sigmoid(u))
        grad += slope * g
    n = len(records)
    return total / n, grad / n


@dataclass(frozen=True)
class TraceEntry:
    step: int
    loss: float
    mean_log_odds_ratio: float | None


def _batch_loss(model, reference, records, objective, config):
    if objective == "kto":
        return kto_loss(model, reference, records, config)
    total = 0.0
    grad = model.zero_grad()
    for record in records:
        if objective == "sft":
            value, g = sft_loss(model, record, config)
        elif objective == "orpo":
            value, g = orpo_loss(model, record, config)
        elif objective == "dpo":
            value, g = dpo_loss(model, reference, record, config)
        else:
            raise ValueError(f"unknown objective {objective!r}")
        total += value
        grad += g
    n = len(records)
    return total / n, grad / n


def train_toy(
    model: ToyModel,
    records,
    objective: str,
    steps: int,
    step_size: float,
    config: LossConfig | None = None,
) -> tuple[ToyModel, list[TraceEntry]]:
    """Full-batch gradient descent; the trace holds pre-update loss per step."""
    records = list(records)
    if not records:
        raise ValueError("training requires at least one record")
    config = config if config is not None else LossConfig()
    model = model.copy()
    reference = model.copy() if objective in ("dpo", "kto") else None
    preference_batch = all(isinstance(r, PreferenceRecord) for r in records)
    trace = []
    for step in range(steps):
        value, grad = _batch_loss(model, reference, records, objective, config)
        ratio = None
        if preference_batch:
            ratio = sum(log_odds_ratio(model, r, config) for r in records) / len(records)
        trace.append(TraceEntry(step=step, loss=value, mean_log_odds_ratio=ratio))
        model.params -= step_size * grad
    return model, trace


def ranking_accuracy(model: ToyModel, records, config: LossConfig | None = None) -> float:
    """Fraction of preference pairs whose chosen side scores strictly higher."""
    config = config if config is not None else LossConfig()
    records = list(records)
    if not records:
        raise ValueError("ranking_accuracy requires at least one record")
    wins = 0
    for record in records:
        lp_c, _ = seq_logprob(model, record.context, record.chosen, config.length_normalize)
        lp_r, _ = seq_logprob(model, record.context, record.rejected, config.length_normalize)
        if lp_c > lp_r:
            wins += 1
    return wins / len(records)


def synthetic_preference_corpus(
    seed: int,
    n_train: int = 64,
    n_heldout: int = 64,
    vocab_size: int = 8,
    width: int = PAD_CONTEXT_WIDTH,
) -> tuple[list[PreferenceRecord], list[PreferenceRecord]]:
    """Preference pairs from one fixed rule: chosen sequences draw from the lower
    half of the vocabulary, rejected from the upper half. Shared random contexts."""
    rng = random.Random(seed)
    half = vocab_size // 2

    def one() -> PreferenceRecord:
        context = tuple(rng.randrange(vocab_size) for _ in range(rng.randint(0, width)))
        length = rng.randint(3, 6)
        chosen = tuple(rng.randrange(half) for _ in range(length))
        rejected = tuple(rng.randrange(half, vocab_size) for _ in range(length))
        return PreferenceRecord(context=context, chosen=chosen, rejected=rejected)

    return [one() for _ in range(n_train)], [one() for _ in range(n_heldout)]
