"""First-order Taylor importance of FFN, head and hidden neurons.

The score of a neuron is the sum, over every token position of the
calibration set, of ``|dL/dx * x|`` where ``x`` is that neuron's activation
and ``L`` the teacher's masked-LM loss on the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .data import MLMBatch
from .model import ConfigError, ModelConfig, TransformerWeights, forward, mlm_loss


@dataclass
class ImportanceScores:
    ffn: np.ndarray               # (L, d_ff)
    head: np.ndarray              # (L, a, d_k)
    hidden_per_layer: np.ndarray  # (L + 1, d_h); row l scores H^l
    hidden_dim: np.ndarray        # (d_h,)
    token_count: int = 0

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ImportanceScores":
        L = config.num_layers
        return cls(np.zeros((L, config.ffn_size)),
                   np.zeros((L, config.num_heads, config.head_dim)),
                   np.zeros((L + 1, config.hidden_size)),
                   np.zeros(config.hidden_size), 0)

    @property
    def geometry(self) -> tuple:
        return self.ffn.shape, self.head.shape, self.hidden_per_layer.shape

    def copy(self) -> "ImportanceScores":
        return ImportanceScores(self.ffn.copy(), self.head.copy(), self.hidden_per_layer.copy(),
                                self.hidden_dim.copy(), self.token_count)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for l, row in enumerate(self.ffn):
            out[f"importance/ffn/{l}"] = row
        for l, heads in enumerate(self.head):
            for i, row in enumerate(heads):
                out[f"importance/head/{l}/{i}"] = row
        for l, row in enumerate(self.hidden_per_layer):
            out[f"importance/hidden_per_layer/{l}"] = row
        out["importance/hidden_dim"] = self.hidden_dim
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], token_count: int = 0) -> "ImportanceScores":
        def rows(prefix):
            keys = sorted((k for k in arrays if k.startswith(prefix)), key=lambda k: int(k[len(prefix):]))
            return np.stack([np.asarray(arrays[k], dtype=np.float64) for k in keys])

        ffn = rows("importance/ffn/")
        L = len(ffn)
        a = len([k for k in arrays if k.startswith("importance/head/0/")])
        head = np.stack([np.stack([np.asarray(arrays[f"importance/head/{l}/{i}"], dtype=np.float64)
                                   for i in range(a)]) for l in range(L)])
        return cls(ffn, head, rows("importance/hidden_per_layer/"),
                   np.asarray(arrays["importance/hidden_dim"], dtype=np.float64), token_count)


def _abs_sum(x: ad.Tensor, reduce_axes: tuple[int, ...]) -> np.ndarray:
    if x.grad is None:
        return np.zeros(tuple(s for i, s in enumerate(x.shape) if i not in reduce_axes))
    return np.abs(x.grad * x.data).sum(axis=reduce_axes)


def score_batch(config: ModelConfig, weights: TransformerWeights, batch: MLMBatch) -> ImportanceScores:
    """Scores from one forward/backward of the summed MLM loss on ``batch``.

    Teacher parameters are read only; gradients flow to activations alone.
    """
    frozen = TransformerWeights({k: ad.Tensor(t.data) for k, t in weights.tensors.items()})
    with ad.Tape() as tape:
        trace = forward(config, frozen, batch.input_ids, track_activations=True)
        loss = mlm_loss(trace, frozen, batch.masked_positions, batch.target_ids, reduction="sum")
    try:
        tape.backward(loss)
    except ad.NonFiniteError as exc:
        raise ad.NonFiniteError(f"importance scoring: {exc} (loss={float(loss.data)!r})") from exc

    scores = ImportanceScores.zeros(config)
    for l in range(config.num_layers):
        scores.ffn[l] = _abs_sum(trace.ffn_act[l], (0, 1))
        # head_out is (batch, head, seq, d_k)
        scores.head[l] = _abs_sum(trace.head_out[l], (0, 2))
    for l, h in enumerate(trace.hidden):
        scores.hidden_per_layer[l] = _abs_sum(h, (0, 1))
    for name, arr in (("ffn", scores.ffn), ("head", scores.head), ("hidden", scores.hidden_per_layer)):
        if not np.isfinite(arr).all():
            raise ad.NonFiniteError(f"importance scoring produced non-finite {name} scores")
    scores.token_count = int(np.asarray(batch.input_ids).size)
    aggregate_hidden(scores)
    return scores


def accumulate(a: ImportanceScores, b: ImportanceScores) -> ImportanceScores:
    if a.geometry != b.geometry:
        raise ConfigError(f"cannot accumulate scores of geometry {a.geometry} and {b.geometry}")
    out = ImportanceScores(a.ffn + b.ffn, a.head + b.head, a.hidden_per_layer + b.hidden_per_layer,
                           np.zeros_like(a.hidden_dim), a.token_count + b.token_count)
    return aggregate_hidden(out)


def aggregate_hidden(scores: ImportanceScores) -> ImportanceScores:
    """hidden_dim[j] = sum over l = 0..L of hidden_per_layer[l][j], in ascending l."""
    total = np.zeros(scores.hidden_per_layer.shape[1])
    for row in scores.hidden_per_layer:
        total = total + row
    scores.hidden_dim = total
    return scores


def score_calibration(config: ModelConfig, weights: TransformerWeights,
                      batches: Iterable[MLMBatch]) -> ImportanceScores:
    """Sequential fixed-order accumulation over a calibration stream."""
    total = ImportanceScores.zeros(config)
    for batch in batches:
        total = accumulate(total, score_batch(config, weights, batch))
    return total
