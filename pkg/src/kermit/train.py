"""Contrastive training of the query/entity encoder pair.

Each batch pairs ``B`` queries with their answer entities; the other ``B - 1``
answers in the batch act as negatives.  The objective is InfoNCE over cosine
scores with an additive margin ``gamma`` and temperature ``tau``.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoder import (BASELINE, EncoderModel, Featurizer, SequenceBatch, Vocabulary,
                      corpus_texts, save_checkpoint)
from .exceptions import BatchError, ConfigError, NumericError

logger = logging.getLogger(__name__)

MARGIN_MODES = ("positive_only", "literal")


@dataclass(frozen=True)
class LossConfig:
    """``margin_mode="literal"`` subtracts ``gamma`` from every logit, which
    cancels inside the softmax; ``"positive_only"`` subtracts it from the
    positive logit only.
    """

    gamma: float = 0.02
    tau: float = 0.05
    margin_mode: str = "positive_only"

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not self.gamma >= 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.margin_mode not in MARGIN_MODES:
            raise ConfigError(f"margin_mode must be one of {MARGIN_MODES}")


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    max_len: int = 64
    pooling: str = "mean"
    n_layers: int = 0
    position: str = "learned"
    init_std: float = 0.1
    min_freq: int = 2


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    epochs: int = 50
    batch_size: int = 256
    seed: int = 0
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.weight_decay < 0 or self.warmup_steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("weight_decay, warmup_steps and checkpoint_every must be >= 0")


@dataclass(frozen=True)
class TrainBatch:
    queries: SequenceBatch
    entities: SequenceBatch
    answers: np.ndarray

    def __post_init__(self):
        if len(self.queries) != len(self.entities):
            raise BatchError("query and entity batches differ in size")
        if len(self.queries) < 2:
            raise BatchError(f"batch size must be >= 2, got {len(self.queries)}")
        if len(np.unique(self.answers)) != len(self.answers):
            raise BatchError("duplicate answer entity inside a batch")


def _cosine_matrix(q, e):
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    en = np.linalg.norm(e, axis=1, keepdims=True)
    if np.any(qn == 0) or np.any(en == 0):
        raise NumericError("zero-norm pooled embedding")
    qh, eh = q / qn, e / en
    return np.clip(qh @ eh.T, -1.0, 1.0), (qh, eh, qn, en)


def score_batch(q_model: EncoderModel, e_model: EncoderModel, batch: TrainBatch) -> np.ndarray:
    """``B x B`` cosine scores; positives sit on the diagonal."""
    q = q_model.encode_batch(batch.queries)
    e = e_model.encode_batch(batch.entities)
    return _cosine_matrix(q, e)[0]


def _margin(shape, cfg: LossConfig):
    if cfg.margin_mode == "literal":
        return np.full(shape, cfg.gamma)
    return np.eye(shape[0], shape[1]) * cfg.gamma


def _loss_and_grad(scores: np.ndarray, cfg: LossConfig):
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite score")
    B = scores.shape[0]
    z = (scores - _margin(scores.shape, cfg)) / cfg.tau
    z_max = z.max(axis=1, keepdims=True)
    ez = np.exp(z - z_max)
    lse = np.log(ez.sum(axis=1)) + z_max[:, 0]
    diag = np.arange(B)
    loss = float(np.mean(lse - z[diag, diag]))
    softmax = ez / ez.sum(axis=1, keepdims=True)
    d_scores = softmax.copy()
    d_scores[diag, diag] -= 1.0
    d_scores /= B * cfg.tau
    return loss, d_scores


def info_nce_loss(scores, cfg: LossConfig) -> float:
    """Mean over rows of ``-log softmax(z_i)_i`` with ``z_ij = (s_ij - gamma*m_ij) / tau``."""
    return _loss_and_grad(scores, cfg)[0]


def compute_gradients(q_model: EncoderModel, e_model: EncoderModel, batch: TrainBatch,
                      cfg: LossConfig):
    """Loss and exact gradients for both towers.

    Returns ``(loss, {"query": {...}, "entity": {...}})``.
    """
    _, q, q_cache = q_model.forward(batch.queries)
    _, e, e_cache = e_model.forward(batch.entities)
    scores, (qh, eh, qn, en) = _cosine_matrix(q, e)
    loss, g = _loss_and_grad(scores, cfg)
    # clip() only binds on rounding noise, so it is treated as identity here
    d_qh = g @ eh
    d_eh = g.T @ qh
    d_q = (d_qh - qh * (qh * d_qh).sum(axis=1, keepdims=True)) / qn
    d_e = (d_eh - eh * (eh * d_eh).sum(axis=1, keepdims=True)) / en
    return loss, {"query": q_model.backward(q_cache, d_q),
                  "entity": e_model.backward(e_cache, d_e)}


class AdamW:
    """Adam with decoupled weight decay over a dict of parameter arrays."""

    def __init__(self, params: dict, names, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.names = list(names)
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(params[k]) for k in self.names}
        self.v = {k: np.zeros_like(params[k]) for k in self.names}
        self.t = 0

    def step(self, grads: dict, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k in self.names:
            g = grads[k]
            self.m[k] *= b1
            self.m[k] += (1 - b1) * g
            self.v[k] *= b2
            self.v[k] += (1 - b2) * g * g
            p = self.params[k]
            p -= lr * self.weight_decay * p
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def linear_schedule(step: int, total: int, base_lr: float, warmup: int = 0) -> float:
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    return base_lr * max(0.0, 1.0 - (step - warmup) / max(1, total - warmup))


def epoch_batches(answers, batch_size: int, seed: int, epoch: int):
    """Shuffled index batches for one epoch; a pure function of ``(seed, epoch)``.

    Within a batch only the first query per answer entity is kept; batches
    left with fewer than two queries are skipped.
    """
    answers = np.asarray(answers)
    order = np.random.default_rng([seed, epoch]).permutation(len(answers))
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        _, first = np.unique(answers[chunk], return_index=True)
        keep = chunk[np.sort(first)]
        if len(keep) >= 2:
            batches.append(keep)
    return batches


@dataclass
class FitResult:
    q_model: EncoderModel
    e_model: EncoderModel
    vocab: Vocabulary
    featurizer: Featurizer
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def _check_training_inputs(queries, mode, graph, descriptions):
    if not queries:
        raise ConfigError("no training queries")
    for q in queries:
        if q.answer is None:
            raise ConfigError(f"training query {q} has no answer")
    if mode != BASELINE:
        from .describe import description_text
        for q in queries:
            description_text(descriptions, q, graph)


def fit(graph, queries, descriptions, train_cfg: TrainConfig = TrainConfig(),
        loss_cfg: LossConfig = LossConfig(), mode: str = "full",
        encoder_cfg: EncoderConfig = EncoderConfig(), vocab: Vocabulary | None = None,
        out_dir=None) -> FitResult:
    """Train a fresh query/entity encoder pair on ``queries``.

    Both towers start from the same initial weights and never share
    parameters afterwards.  Optimisation is AdamW with linear learning-rate
    decay; everything random is derived from ``train_cfg.seed``.  With
    ``out_dir`` set, checkpoints and ``run.json`` are written there.
    """
    queries = list(queries)
    _check_training_inputs(queries, mode, graph, descriptions)
    if vocab is None:
        texts = corpus_texts(graph, queries, mode, descriptions)
        vocab = Vocabulary.build(texts, min_freq=encoder_cfg.min_freq)
    feat = Featurizer(vocab, mode=mode, max_len=encoder_cfg.max_len)
    q_model = EncoderModel.initialize(len(vocab), encoder_cfg.dim, encoder_cfg.max_len,
                                      encoder_cfg.pooling, encoder_cfg.n_layers,
                                      encoder_cfg.position, encoder_cfg.init_std,
                                      seed=train_cfg.seed)
    e_model = q_model.copy()

    q_all = feat.queries(queries, graph, descriptions)
    answers = np.array([q.answer for q in queries])
    e_all = feat.entities(range(len(graph.entities)), graph)

    B = min(train_cfg.batch_size, len(queries))
    if B < 2:
        raise ConfigError("need at least two training queries")
    steps_per_epoch = math.ceil(len(queries) / B)
    total = steps_per_epoch * train_cfg.epochs
    opts = [AdamW(m.params, m.trainable(), train_cfg.beta1, train_cfg.beta2, train_cfg.eps,
                  train_cfg.weight_decay) for m in (q_model, e_model)]

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = FitResult(q_model, e_model, vocab, feat)
    started = time.perf_counter()
    step = 0
    for epoch in range(train_cfg.epochs):
        losses = []
        for idx in epoch_batches(answers, B, train_cfg.seed, epoch):
            batch = TrainBatch(q_all[idx], e_all[answers[idx]], answers[idx])
            loss, grads = compute_gradients(q_model, e_model, batch, loss_cfg)
            lr = linear_schedule(step, total, train_cfg.lr, train_cfg.warmup_steps)
            opts[0].step(grads["query"], lr)
            opts[1].step(grads["entity"], lr)
            losses.append(loss)
            step += 1
        mean_loss = math.fsum(losses) / len(losses) if losses else float("nan")
        result.history.append(mean_loss)
        logger.info("epoch %d/%d loss %.6f", epoch + 1, train_cfg.epochs, mean_loss)
        if out is not None and train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
            path = out / f"epoch_{epoch + 1:04d}.ckpt"
            save_checkpoint(path, q_model, e_model, mode)
            result.checkpoints.append(path)

    if out is not None:
        path = out / "model.ckpt"
        save_checkpoint(path, q_model, e_model, mode)
        vocab.save(out / "vocab.tsv")
        result.checkpoints.append(path)
        meta = {
            "mode": mode,
            "seed": train_cfg.seed,
            "train": asdict(train_cfg),
            "loss": asdict(loss_cfg),
            "encoder": asdict(encoder_cfg),
            "effective_batch_size": B,
            "n_queries": len(queries),
            "epoch_loss": result.history,
            "wall_time_s": time.perf_counter() - started,
        }
        (out / "run.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return result
