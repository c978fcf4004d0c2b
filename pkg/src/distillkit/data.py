"""Synthetic corpora and BERT-style masking.

Sequences are generated in fixed-size chunks, each chunk from its own
generator seeded by ``(seed, split, chunk)``. Sequence ``i`` of a split is
therefore a pure function of the spec, and splits never overlap because they
draw from disjoint seed streams.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .model import ConfigError

CHUNK = 1024
SPLITS = {"train": 0, "heldout": 1}


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 64
    seq_len: int = 32
    num_sequences: int = 50_000
    generator: str = "markov"
    order: int = 1
    concentration: float = 0.1
    seed: int = 1234
    mask_prob: float = 0.15
    pad_token_id: int = 0
    cls_token_id: int = 1
    mask_token_id: int = 2
    calibration_sequences: int = 2000
    heldout_sequences: int = 1024
    grammar_rules: dict | None = None

    def __post_init__(self):
        reserved = (self.pad_token_id, self.cls_token_id, self.mask_token_id)
        if len(set(reserved)) != 3:
            raise ConfigError(f"pad/cls/mask ids must be distinct, got {reserved}")
        if any(not 0 <= r < self.vocab_size for r in reserved):
            raise ConfigError(f"reserved ids {reserved} must be < vocab_size {self.vocab_size}")
        if self.vocab_size - 3 < 2:
            raise ConfigError("vocab_size leaves fewer than two ordinary tokens")
        if not 0.0 < self.mask_prob < 1.0:
            raise ConfigError(f"mask_prob must lie in (0, 1), got {self.mask_prob}")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be at least 2 (CLS plus one token)")
        if self.generator not in ("markov", "grammar"):
            raise ConfigError(f"unknown generator {self.generator!r}")
        if self.order < 1:
            raise ConfigError("markov order must be >= 1")
        if self.calibration_sequences > self.num_sequences:
            raise ConfigError("calibration split cannot exceed the training stream")

    @property
    def ordinary_tokens(self) -> np.ndarray:
        reserved = {self.pad_token_id, self.cls_token_id, self.mask_token_id}
        return np.array([t for t in range(self.vocab_size) if t not in reserved], dtype=np.int64)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        return cls(**d)


class MarkovGenerator:
    """Order-k chain over the ordinary tokens with Dirichlet-sparse rows."""

    def __init__(self, spec: CorpusSpec):
        self.spec = spec
        self.tokens = spec.ordinary_tokens
        n = len(self.tokens)
        rng = np.random.default_rng([spec.seed, 0xC0FFEE])
        self.num_states = n ** spec.order
        self.transition = rng.dirichlet(np.full(n, spec.concentration), size=self.num_states)
        self._cdf = np.cumsum(self.transition, axis=1)
        self._cdf[:, -1] = 1.0

    def _sample(self, rng, states: np.ndarray) -> np.ndarray:
        u = rng.random(len(states))
        cdf = self._cdf[states]
        return np.minimum((cdf < u[:, None]).sum(axis=1), len(self.tokens) - 1)

    def generate(self, rng: np.random.Generator, count: int) -> np.ndarray:
        spec, n = self.spec, len(self.tokens)
        body = spec.seq_len - 1
        out = np.empty((count, body), dtype=np.int64)
        # the first `order` symbols are uniform; later ones follow the chain
        out[:, : min(spec.order, body)] = rng.integers(0, n, size=(count, min(spec.order, body)))
        for t in range(spec.order, body):
            state = np.zeros(count, dtype=np.int64)
            for j in range(spec.order):
                state = state * n + out[:, t - spec.order + j]
            out[:, t] = self._sample(rng, state)
        seqs = np.empty((count, spec.seq_len), dtype=np.int64)
        seqs[:, 0] = spec.cls_token_id
        seqs[:, 1:] = self.tokens[out]
        return seqs


class GrammarGenerator:
    """Weighted context-free rules expanded left to right, truncated to length.

    ``rules`` maps a nonterminal name to a list of ``[weight, [symbols...]]``
    where each symbol is a nonterminal name or an ordinary-token index. With no
    rule set given, a small phrase grammar is drawn from the seed.
    """

    def __init__(self, spec: CorpusSpec):
        self.spec = spec
        self.tokens = spec.ordinary_tokens
        self.rules = spec.grammar_rules or self._default_rules(spec)
        if "S" not in self.rules:
            raise ConfigError("grammar rule set needs a start symbol 'S'")

    @staticmethod
    def _default_rules(spec: CorpusSpec) -> dict:
        rng = np.random.default_rng([spec.seed, 0x6A4])
        n = len(spec.ordinary_tokens)
        words = rng.permutation(n)
        groups = np.array_split(words, 4)
        rules = {"S": [[1.0, ["NP", "VP"]], [0.3, ["NP", "VP", "PP"]]],
                 "NP": [[1.0, ["D", "N"]], [0.5, ["D", "A", "N"]]],
                 "VP": [[1.0, ["V", "NP"]], [0.4, ["V"]]],
                 "PP": [[1.0, ["D", "NP"]]]}
        for name, group in zip(("D", "N", "V", "A"), groups):
            weights = rng.dirichlet(np.full(len(group), 0.5))
            rules[name] = [[float(w), [int(g)]] for w, g in zip(weights, group)]
        return rules

    def _expand(self, rng, symbol, out: list, limit: int) -> None:
        if len(out) >= limit:
            return
        if isinstance(symbol, int):
            out.append(symbol)
            return
        options = self.rules[symbol]
        w = np.array([o[0] for o in options], dtype=float)
        choice = options[int(rng.choice(len(options), p=w / w.sum()))][1]
        for s in choice:
            self._expand(rng, s, out, limit)

    def generate(self, rng: np.random.Generator, count: int) -> np.ndarray:
        spec = self.spec
        body = spec.seq_len - 1
        seqs = np.empty((count, spec.seq_len), dtype=np.int64)
        seqs[:, 0] = spec.cls_token_id
        for i in range(count):
            out: list[int] = []
            while len(out) < body:
                self._expand(rng, "S", out, body)
            seqs[i, 1:] = self.tokens[np.asarray(out[:body])]
        return seqs


def make_generator(spec: CorpusSpec):
    return MarkovGenerator(spec) if spec.generator == "markov" else GrammarGenerator(spec)


def generate_corpus(spec: CorpusSpec, split: str = "train", start: int = 0,
                    count: int | None = None, generator=None) -> np.ndarray:
    """Sequences ``[start, start + count)`` of a split as an (n, seq_len) array."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    if count is None:
        count = (spec.num_sequences if split == "train" else spec.heldout_sequences) - start
    gen = generator or make_generator(spec)
    if count <= 0:
        return np.empty((0, spec.seq_len), dtype=np.int64)
    first, last = start // CHUNK, (start + count - 1) // CHUNK
    parts = []
    for c in range(first, last + 1):
        rng = np.random.default_rng([spec.seed, SPLITS[split], c])
        parts.append(gen.generate(rng, CHUNK))
    block = np.concatenate(parts)
    offset = start - first * CHUNK
    return block[offset: offset + count]


def calibration_split(spec: CorpusSpec, generator=None) -> np.ndarray:
    return generate_corpus(spec, "train", 0, spec.calibration_sequences, generator)


@dataclass
class MLMBatch:
    input_ids: np.ndarray
    masked_positions: np.ndarray  # (n, 2) of (batch, position)
    target_ids: np.ndarray
    meta: dict = field(default_factory=dict)


def mask_batch(sequences: np.ndarray, spec: CorpusSpec, seed) -> MLMBatch:
    """Select positions with ``mask_prob``; of those 80% [MASK], 10% random, 10% kept."""
    seqs = np.asarray(sequences)
    if seqs.ndim != 2 or len(seqs) == 0:
        raise ValueError("mask_batch needs a nonempty (batch, seq) array")
    rng = np.random.default_rng(seed)
    eligible = (seqs != spec.cls_token_id) & (seqs != spec.pad_token_id)
    for _ in range(2):
        selected = (rng.random(seqs.shape) < spec.mask_prob) & eligible
        if selected.any():
            break
    else:
        raise ValueError("masking selected no positions twice in a row")
    roll = rng.random(seqs.shape)
    random_tokens = rng.choice(spec.ordinary_tokens, size=seqs.shape)
    inputs = seqs.copy()
    inputs[selected & (roll < 0.8)] = spec.mask_token_id
    swap = selected & (roll >= 0.8) & (roll < 0.9)
    inputs[swap] = random_tokens[swap]
    positions = np.argwhere(selected)
    return MLMBatch(inputs, positions, seqs[selected])


def iterate_batches(num_items: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Shuffled index batches for one epoch; the ragged tail is dropped."""
    order = rng.permutation(num_items)
    for b in range(num_items // batch_size):
        yield order[b * batch_size:(b + 1) * batch_size]


def export_corpus(path, sequences: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in np.asarray(sequences):
            fh.write(" ".join(str(int(t)) for t in row) + "\n")


def import_corpus(path) -> np.ndarray:
    with open(path) as fh:
        rows = [[int(t) for t in line.split()] for line in fh if line.strip()]
    if not rows:
        return np.empty((0, 0), dtype=np.int64)
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise ValueError(f"{path}: sequences have differing lengths {sorted(lengths)}")
    return np.asarray(rows, dtype=np.int64)
