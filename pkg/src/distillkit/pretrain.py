"""Masked-LM pretraining of the teacher on a synthetic corpus."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .data import CorpusSpec, iterate_batches, mask_batch
from .distill import Adam, DivergenceError, RunMetrics, lr_at
from .model import ConfigError, ModelConfig, TransformerWeights, forward, init_weights, mlm_loss


@dataclass
class PretrainConfig:
    lr: float = 1e-3
    warmup: float = 0.05
    batch_size: int = 32
    epochs: int = 3
    seed: int = 0
    init_std: float = 0.02
    eval_sequences: int = 512
    dtype: str = "float32"
    record_wallclock: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("pretrain needs batch_size >= 1, epochs >= 0, lr > 0")
        if not 0.0 <= self.warmup < 1.0:
            raise ConfigError("pretrain warmup must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def mlm_eval(config: ModelConfig, weights: TransformerWeights, sequences: np.ndarray,
             spec: CorpusSpec, seed: int, batch_size: int = 128) -> float:
    """Mean masked-LM loss over fixed masks (weighted by masked-token count)."""
    total, count = 0.0, 0
    for b, s in enumerate(range(0, len(sequences), batch_size)):
        batch = mask_batch(sequences[s:s + batch_size], spec, [seed, 7, b])
        trace = forward(config, weights, batch.input_ids)
        loss = mlm_loss(trace, weights, batch.masked_positions, batch.target_ids)
        total += float(loss.data) * len(batch.target_ids)
        count += len(batch.target_ids)
    return total / count


def pretrain_teacher(config: ModelConfig, spec: CorpusSpec, train_seqs: np.ndarray,
                     settings: PretrainConfig, heldout: np.ndarray | None = None, log=None):
    """Returns (weights, RunMetrics); held-out MLM loss is logged once per epoch."""
    if config.vocab_size != spec.vocab_size or config.max_seq_len < spec.seq_len:
        raise ConfigError("teacher vocab/sequence length do not match the corpus")
    dtype = np.dtype(settings.dtype)
    weights = init_weights(config, np.random.default_rng([settings.seed, 0]), settings.init_std, dtype)
    weights.set_requires_grad(True)
    params = weights.parameters()
    opt = Adam(params, eps=1e-6)
    steps_per_epoch = len(train_seqs) // settings.batch_size
    total = steps_per_epoch * settings.epochs
    metrics = RunMetrics(steps_per_epoch=steps_per_epoch, total_steps=total)
    dropout_rng = np.random.default_rng([settings.seed, 3]) if config.dropout > 0 else None
    start = time.perf_counter()
    step = 0
    for epoch in range(settings.epochs):
        order_rng = np.random.default_rng([settings.seed, 1, epoch])
        for idx in iterate_batches(len(train_seqs), settings.batch_size, order_rng):
            batch = mask_batch(train_seqs[idx], spec, [settings.seed, 5, step])
            lr = lr_at(step, total, settings.lr, settings.warmup)
            try:
                with ad.Tape() as tape:
                    trace = forward(config, weights, batch.input_ids, rng=dropout_rng)
                    loss = mlm_loss(trace, weights, batch.masked_positions, batch.target_ids)
                opt.zero_grad()
                tape.backward(loss)
            except ad.NonFiniteError as exc:
                raise DivergenceError(f"teacher pretraining diverged at step {step}: {exc}", step) from exc
            opt.step(lr)
            step += 1
            metrics.steps.append(step)
            metrics.loss.append(float(loss.data))
            metrics.lr.append(lr)
            metrics.wallclock_ms.append(int((time.perf_counter() - start) * 1000) if settings.record_wallclock else 0)
        if heldout is not None:
            val = mlm_eval(config, weights, heldout, spec, settings.seed)
            metrics.eval_steps.append(step)
            metrics.eval_loss.append(val)
            if log:
                log(f"epoch {epoch + 1}/{settings.epochs} step {step} heldout_mlm {val:.4f}")
    metrics.epoch_steps = [e * steps_per_epoch for e in range(1, settings.epochs + 1)]
    weights.set_requires_grad(False)
    return weights, metrics
