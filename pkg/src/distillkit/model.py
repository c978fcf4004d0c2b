"""BERT-style encoder: embeddings, post-LN transformer layers, MLM head.

Weights live in a flat, ordered name -> Tensor mapping so checkpointing and
extraction can address every array by a stable name.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigError(ValueError):
    """Invalid or mutually inconsistent configuration."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_size: int
    num_heads: int
    head_dim: int
    ffn_size: int
    vocab_size: int
    max_seq_len: int
    layer_norm_eps: float = 1e-12
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("num_layers", "hidden_size", "num_heads", "head_dim", "ffn_size", "vocab_size", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.head_dim * self.num_heads != self.hidden_size:
            raise ConfigError(
                f"head_dim * num_heads must equal hidden_size: "
                f"{self.head_dim} * {self.num_heads} != {self.hidden_size}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.layer_norm_eps <= 0:
            raise ConfigError("layer_norm_eps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def layer_param_names(l: int) -> list[str]:
    p = f"layers.{l}."
    return [p + n for n in (
        "attn.query.weight", "attn.query.bias",
        "attn.key.weight", "attn.key.bias",
        "attn.value.weight", "attn.value.bias",
        "attn.output.weight", "attn.output.bias",
        "attn.ln.gain", "attn.ln.bias",
        "ffn.in.weight", "ffn.in.bias",
        "ffn.out.weight", "ffn.out.bias",
        "ffn.ln.gain", "ffn.ln.bias",
    )]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map, in serialization order."""
    d, f, v = config.hidden_size, config.ffn_size, config.vocab_size
    shapes = {
        "embeddings.token": (v, d),
        "embeddings.position": (config.max_seq_len, d),
        "embeddings.ln.gain": (d,),
        "embeddings.ln.bias": (d,),
    }
    for l in range(config.num_layers):
        for name in layer_param_names(l):
            short = name.split(".", 2)[2]
            if short.endswith("ffn.in.weight"):
                shapes[name] = (d, f)
            elif short.endswith("ffn.in.bias"):
                shapes[name] = (f,)
            elif short.endswith("ffn.out.weight"):
                shapes[name] = (f, d)
            elif short.endswith("weight"):
                shapes[name] = (d, d)
            else:
                shapes[name] = (d,)
    shapes["mlm.weight"] = (d, v)
    shapes["mlm.bias"] = (v,)
    return shapes


@dataclass
class TransformerWeights:
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def parameters(self, exclude_prefix: tuple[str, ...] = ()) -> list[Tensor]:
        return [t for k, t in self.tensors.items() if not k.startswith(exclude_prefix)]

    def copy(self, dtype=None, requires_grad: bool | None = None) -> "TransformerWeights":
        out = {}
        for k, t in self.tensors.items():
            arr = t.data.astype(dtype if dtype is not None else t.data.dtype, copy=True)
            out[k] = Tensor(arr, requires_grad=t.requires_grad if requires_grad is None else requires_grad, name=k)
        return TransformerWeights(out)

    def set_requires_grad(self, flag: bool, exclude_prefix: tuple[str, ...] = ()) -> None:
        for k, t in self.tensors.items():
            t.requires_grad = flag and not k.startswith(exclude_prefix)
            t.grad = None

    def check(self, config: ModelConfig) -> None:
        expected = param_shapes(config)
        if list(expected) != list(self.tensors):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            raise ConfigError(f"weight names do not match config (missing={sorted(missing)}, extra={sorted(extra)})")
        for k, shape in expected.items():
            if self.tensors[k].shape != shape:
                raise ConfigError(f"tensor {k} has shape {self.tensors[k].shape}, expected {shape}")

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], requires_grad: bool = False) -> "TransformerWeights":
        return cls({k: Tensor(np.asarray(v), requires_grad=requires_grad, name=k) for k, v in arrays.items()})


def init_weights(config: ModelConfig, rng: np.random.Generator, std: float = 0.02,
                 dtype=np.float64) -> TransformerWeights:
    """Normal(0, std) matrices, zero biases, unit layer-norm gains."""
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            arrays[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".bias"):
            arrays[name] = np.zeros(shape, dtype=dtype)
        else:
            arrays[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return TransformerWeights.from_arrays(arrays)


def init_mlm_head(config: ModelConfig, rng: np.random.Generator, std: float = 0.02, dtype=np.float64):
    d, v = config.hidden_size, config.vocab_size
    return (rng.standard_normal((d, v)) * std).astype(dtype), np.zeros(v, dtype=dtype)


@dataclass
class ForwardTrace:
    """Everything a forward pass exposes to scoring and distillation.

    ``hidden[l]`` is H^l (``hidden[0]`` the embedding output). Per-layer lists
    are indexed by 0-based layer; attention tensors are (batch, head, seq, seq)
    and head outputs (batch, head, seq, head_dim).
    """

    hidden: list[Tensor] = field(default_factory=list)
    attn_logits: list[Tensor] = field(default_factory=list)
    attn_probs: list[Tensor] = field(default_factory=list)
    head_out: list[Tensor] = field(default_factory=list)
    mha_out: list[Tensor] = field(default_factory=list)
    ffn_act: list[Tensor] = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.attn_logits)

    def attention(self, layer: int, head: int, post_softmax: bool = False) -> np.ndarray:
        src = self.attn_probs if post_softmax else self.attn_logits
        return src[layer].data[:, head]

    def head_activation(self, layer: int, head: int) -> np.ndarray:
        return self.head_out[layer].data[:, head]

    @property
    def last_hidden(self) -> Tensor:
        return self.hidden[-1]


def _check_ids(config: ModelConfig, token_ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise ValueError(f"token_ids must be (batch, seq), got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError("token_ids must be integers")
    if ids.shape[1] > config.max_seq_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError(f"token id out of range [0, {config.vocab_size})")
    return ids


def embed(config: ModelConfig, weights: TransformerWeights, token_ids) -> Tensor:
    ids = _check_ids(config, token_ids)
    tok = ad.take_rows(weights["embeddings.token"], ids)
    pos = ad.take_rows(weights["embeddings.position"], np.arange(ids.shape[1]))
    return ad.layer_norm(tok + pos, weights["embeddings.ln.gain"], weights["embeddings.ln.bias"],
                         config.layer_norm_eps)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.matmul(x, w) + b


def mha_forward(h: Tensor, weights: TransformerWeights, layer: int, config: ModelConfig,
                head_mask: np.ndarray | None = None, rng: np.random.Generator | None = None):
    """Returns (H_MHA, pre-softmax logits, probabilities, head outputs)."""
    p = f"layers.{layer}.attn."
    B, T, _ = h.shape
    a, dk = config.num_heads, config.head_dim

    def split(x):
        return ad.transpose(ad.reshape(x, (B, T, a, dk)), (0, 2, 1, 3))

    q = split(_linear(h, weights[p + "query.weight"], weights[p + "query.bias"]))
    k = split(_linear(h, weights[p + "key.weight"], weights[p + "key.bias"]))
    v = split(_linear(h, weights[p + "value.weight"], weights[p + "value.bias"]))
    logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    probs = ad.softmax_rows(logits)
    heads = ad.matmul(ad.dropout(probs, config.dropout, rng), v)
    if head_mask is not None:
        m = np.asarray(head_mask, dtype=heads.dtype)
        # (a, d_k) masks every position; (T, a, d_k) masks positions individually
        m = m.reshape(1, a, 1, dk) if m.ndim == 2 else np.transpose(m, (1, 0, 2))[None]
        heads = ad.mul(heads, Tensor(m))
    concat = ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (B, T, a * dk))
    out = ad.dropout(_linear(concat, weights[p + "output.weight"], weights[p + "output.bias"]), config.dropout, rng)
    h_mha = ad.layer_norm(h + out, weights[p + "ln.gain"], weights[p + "ln.bias"], config.layer_norm_eps)
    return h_mha, logits, probs, heads


def ffn_forward(h_mha: Tensor, weights: TransformerWeights, layer: int, config: ModelConfig,
                ffn_mask: np.ndarray | None = None, rng: np.random.Generator | None = None):
    """Returns (H^{l+1}, post-GeLU intermediate activation)."""
    p = f"layers.{layer}.ffn."
    act = ad.gelu(_linear(h_mha, weights[p + "in.weight"], weights[p + "in.bias"]))
    if ffn_mask is not None:
        act = ad.mul(act, Tensor(np.asarray(ffn_mask, dtype=act.dtype)))
    out = ad.dropout(_linear(act, weights[p + "out.weight"], weights[p + "out.bias"]), config.dropout, rng)
    h_next = ad.layer_norm(h_mha + out, weights[p + "ln.gain"], weights[p + "ln.bias"], config.layer_norm_eps)
    return h_next, act


def forward(config: ModelConfig, weights: TransformerWeights, token_ids, *,
            track_activations: bool = False,
            ffn_masks: dict[int, np.ndarray] | None = None,
            head_masks: dict[int, np.ndarray] | None = None,
            rng: np.random.Generator | None = None) -> ForwardTrace:
    """Run the encoder and keep every intermediate the toolkit needs.

    ``track_activations`` marks H^0 as requiring a gradient so that, on an
    active tape, activation gradients flow even when no parameter is trainable.
    ``ffn_masks``/``head_masks`` multiply individual neurons, either at every
    position ((d_ff,) / (a, d_k)) or per position ((T, d_ff) / (T, a, d_k));
    used by the leave-one-out oracle. ``rng`` enables dropout at ``config.dropout``.
    """
    trace = ForwardTrace()
    h = embed(config, weights, token_ids)
    if track_activations:
        h.requires_grad = True
    h = ad.dropout(h, config.dropout, rng)
    trace.hidden.append(h)
    for l in range(config.num_layers):
        h_mha, logits, probs, heads = mha_forward(
            h, weights, l, config, None if head_masks is None else head_masks.get(l), rng)
        h, act = ffn_forward(h_mha, weights, l, config, None if ffn_masks is None else ffn_masks.get(l), rng)
        trace.attn_logits.append(logits)
        trace.attn_probs.append(probs)
        trace.head_out.append(heads)
        trace.mha_out.append(h_mha)
        trace.ffn_act.append(act)
        trace.hidden.append(h)
    return trace


def mlm_logits(trace: ForwardTrace, weights: TransformerWeights, masked_positions) -> Tensor:
    pos = np.asarray(masked_positions, dtype=np.int64).reshape(-1, 2)
    last = trace.last_hidden
    B, T, d = last.shape
    rows = ad.take_rows(ad.reshape(last, (B * T, d)), pos[:, 0] * T + pos[:, 1])
    return _linear(rows, weights["mlm.weight"], weights["mlm.bias"])


def mlm_loss(trace: ForwardTrace, weights: TransformerWeights, masked_positions, target_ids,
             reduction: str = "mean") -> Tensor:
    """Cross-entropy over masked (batch, position) pairs; ``sum`` keeps scores additive over batches."""
    pos = np.asarray(masked_positions, dtype=np.int64).reshape(-1, 2)
    if len(pos) == 0:
        raise ValueError("mlm_loss needs at least one masked position")
    return ad.cross_entropy(mlm_logits(trace, weights, pos), np.asarray(target_ids).reshape(-1), reduction)
