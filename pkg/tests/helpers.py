"""Shared oracles and model builders for the test suite."""

from __future__ import annotations

import numpy as np
from scipy import stats

from distillkit import autodiff as ad
from distillkit.model import ModelConfig, TransformerWeights, init_weights, layer_param_names


def tiny_config(**kw) -> ModelConfig:
    base = dict(num_layers=2, hidden_size=8, num_heads=2, head_dim=4, ffn_size=16, vocab_size=11, max_seq_len=6)
    base.update(kw)
    return ModelConfig(**base)


def random_weights(config: ModelConfig, seed: int = 0, std: float = 0.3) -> TransformerWeights:
    """Weights with non-trivial biases and gains so no term is accidentally inert."""
    rng = np.random.default_rng(seed)
    w = init_weights(config, rng, std=std)
    for name, t in w.tensors.items():
        if name.endswith(".bias"):
            t.data[...] = rng.standard_normal(t.shape) * 0.1
        elif name.endswith(".gain"):
            t.data[...] = 1.0 + rng.standard_normal(t.shape) * 0.1
    return w


def central_difference(f, x: np.ndarray, index, h: float = 1e-5) -> float:
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * h)


def rel_err(auto: float, fd: float) -> float:
    return abs(auto - fd) / (abs(fd) + 1e-8)


def permute_hidden(config: ModelConfig, weights: TransformerWeights, perm: np.ndarray) -> TransformerWeights:
    """Apply one permutation to every hidden-indexed axis."""
    A = {k: v.copy() for k, v in weights.arrays().items()}
    for k in ("embeddings.token", "embeddings.position"):
        A[k] = A[k][:, perm]
    for k in ("embeddings.ln.gain", "embeddings.ln.bias"):
        A[k] = A[k][perm]
    for l in range(config.num_layers):
        p = f"layers.{l}."
        for proj in ("query", "key", "value"):
            A[p + f"attn.{proj}.weight"] = A[p + f"attn.{proj}.weight"][perm, :]
        A[p + "attn.output.weight"] = A[p + "attn.output.weight"][:, perm]
        A[p + "ffn.in.weight"] = A[p + "ffn.in.weight"][perm, :]
        A[p + "ffn.out.weight"] = A[p + "ffn.out.weight"][:, perm]
        for k in ("attn.output.bias", "attn.ln.gain", "attn.ln.bias", "ffn.out.bias", "ffn.ln.gain", "ffn.ln.bias"):
            A[p + k] = A[p + k][perm]
    A["mlm.weight"] = A["mlm.weight"][perm, :]
    return TransformerWeights.from_arrays(A)


def permute_within_head(config: ModelConfig, weights: TransformerWeights, layer: int, head: int,
                        perm: np.ndarray) -> TransformerWeights:
    A = {k: v.copy() for k, v in weights.arrays().items()}
    dk = config.head_dim
    cols = np.arange(config.hidden_size)
    cols[head * dk:(head + 1) * dk] = head * dk + perm
    p = f"layers.{layer}.attn."
    for proj in ("query", "key", "value"):
        A[p + f"{proj}.weight"] = A[p + f"{proj}.weight"][:, cols]
        A[p + f"{proj}.bias"] = A[p + f"{proj}.bias"][cols]
    A[p + "output.weight"] = A[p + "output.weight"][cols, :]
    return TransformerWeights.from_arrays(A)


def permute_ffn(weights: TransformerWeights, layer: int, perm: np.ndarray) -> TransformerWeights:
    A = {k: v.copy() for k, v in weights.arrays().items()}
    p = f"layers.{layer}.ffn."
    A[p + "in.weight"] = A[p + "in.weight"][:, perm]
    A[p + "in.bias"] = A[p + "in.bias"][perm]
    A[p + "out.weight"] = A[p + "out.weight"][perm, :]
    return TransformerWeights.from_arrays(A)


def spearman(a, b) -> float:
    return float(stats.spearmanr(np.ravel(a), np.ravel(b)).statistic)


__all__ = ["ad", "gradcheck", "sym_rel_err", "tiny_config", "random_weights", "central_difference", "rel_err", "permute_hidden",
           "permute_within_head", "permute_ffn", "spearman", "layer_param_names"]


def gradcheck(fn, arrays, probes: int, rng: np.random.Generator, h: float = 1e-5):
    """Compare tape gradients of ``fn(*tensors)`` against central differences.

    Returns a list of (input index, flat index, analytic, numeric) for
    ``probes`` coordinates drawn uniformly over all inputs.
    """
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        out = fn(*tensors)
    tape.backward(out)
    sizes = np.array([a.size for a in arrays])
    rows = []
    for _ in range(probes):
        k = int(rng.choice(len(arrays), p=sizes / sizes.sum()))
        j = int(rng.integers(sizes[k]))
        flat = tensors[k].data.reshape(-1)

        def f():
            return float(fn(*[ad.Tensor(t.data) for t in tensors]).data)

        num = central_difference(f, flat, j, h)
        g = tensors[k].grad
        auto = 0.0 if g is None else float(np.asarray(g).reshape(-1)[j])
        rows.append((k, j, auto, num))
    return rows


def sym_rel_err(auto: float, num: float) -> float:
    denom = max(abs(auto), abs(num))
    return 0.0 if denom == 0 else abs(auto - num) / denom
