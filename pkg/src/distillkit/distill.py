"""Task-agnostic transformer distillation.

Default objective matches the student's last-layer attention logits and
(projected) hidden states to the teacher's. The uniform layer mapping pairs
student layer k with teacher layer floor(k*N/M) and adds the embedding pair.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import iterate_batches
from .model import ConfigError, ForwardTrace, ModelConfig, TransformerWeights, forward


class Mapping(str, enum.Enum):
    LAST_LAYER = "last-layer"
    UNIFORM = "uniform"


class AttentionRepr(str, enum.Enum):
    PRE_SOFTMAX = "pre-softmax"
    POST_SOFTMAX = "post-softmax"


class DivergenceError(ad.NonFiniteError):
    def __init__(self, message, step, last_good=None):
        super().__init__(message)
        self.step = step
        self.last_good = last_good


@dataclass
class DistillConfig:
    mapping: Mapping = Mapping.LAST_LAYER
    attention_repr: AttentionRepr = AttentionRepr.PRE_SOFTMAX
    lr: float = 1e-4
    warmup: float = 0.10
    batch_size: int = 32
    epochs: int = 5
    seed: int = 0
    projection_init: str = "extraction"  # or "random"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-6
    evals_per_epoch: int = 10
    eval_batch_size: int = 256
    dtype: str = "float32"
    record_wallclock: bool = True
    teacher_cache_mb: float = 1536.0

    def __post_init__(self):
        self.mapping = Mapping(self.mapping)
        self.attention_repr = AttentionRepr(self.attention_repr)
        if not 0.0 <= self.warmup < 1.0:
            raise ConfigError(f"warmup fraction must lie in [0, 1), got {self.warmup}")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("batch_size >= 1, epochs >= 0 and lr > 0 are required")
        if self.projection_init not in ("extraction", "random"):
            raise ConfigError(f"projection_init must be 'extraction' or 'random', got {self.projection_init!r}")
        if self.evals_per_epoch < 1:
            raise ConfigError("evals_per_epoch must be >= 1")

    @property
    def post_softmax(self) -> bool:
        return self.attention_repr is AttentionRepr.POST_SOFTMAX

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mapping"] = self.mapping.value
        d["attention_repr"] = self.attention_repr.value
        return d


# losses ----------------------------------------------------------------------

def _attn(trace: ForwardTrace, layer: int, post_softmax: bool) -> Tensor:
    return (trace.attn_probs if post_softmax else trace.attn_logits)[layer]


def _as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def pair_loss(s_attn: Tensor | None, t_attn, s_hidden: Tensor, t_hidden, projection: Tensor) -> Tensor:
    """Head-averaged attention MSE plus projected hidden-state MSE.

    Every head contributes a mean over the same number of elements, so the
    average of per-head MSEs equals one MSE over the stacked heads.
    """
    hidden = ad.mse(ad.matmul(s_hidden, projection), _as_t(t_hidden))
    if s_attn is None:
        return hidden
    if s_attn.shape != _as_t(t_attn).shape:
        raise ConfigError(f"attention shapes differ: student {s_attn.shape}, teacher {_as_t(t_attn).shape}")
    return ad.mse(s_attn, _as_t(t_attn)) + hidden


def kd_loss_last_layer(student: ForwardTrace, teacher: ForwardTrace, projection: Tensor,
                       num_heads: int, post_softmax: bool = False) -> Tensor:
    s_attn = _attn(student, student.num_layers - 1, post_softmax)
    t_attn = _attn(teacher, teacher.num_layers - 1, post_softmax)
    if s_attn.shape[1] != num_heads or _as_t(t_attn).shape[1] != num_heads:
        raise ConfigError(f"head count mismatch: student {s_attn.shape[1]}, teacher {_as_t(t_attn).shape[1]}, "
                          f"expected {num_heads}")
    return pair_loss(s_attn, t_attn, student.hidden[-1], teacher.hidden[-1], projection)


def layer_mapping(num_teacher: int, num_student: int) -> list[tuple[int, int]]:
    """(student layer, teacher layer) pairs, 1-based, g(k) = floor(k*N/M)."""
    if not 1 <= num_student <= num_teacher:
        raise ConfigError(f"uniform mapping needs 1 <= M <= N, got M={num_student}, N={num_teacher}")
    return [(k, k * num_teacher // num_student) for k in range(1, num_student + 1)]


def kd_loss_uniform(student: ForwardTrace, teacher: ForwardTrace, projections: list[Tensor],
                    num_heads: int, post_softmax: bool = False, include_embedding: bool = True) -> Tensor:
    """Sum of per-pair losses; ``projections[k]`` serves student hidden state k."""
    pairs = layer_mapping(teacher.num_layers, student.num_layers)
    total = None
    if include_embedding:
        total = pair_loss(None, None, student.hidden[0], teacher.hidden[0], projections[0])
    for k, t in pairs:
        s_attn = _attn(student, k - 1, post_softmax)
        if s_attn.shape[1] != num_heads:
            raise ConfigError(f"head count mismatch: student {s_attn.shape[1]}, expected {num_heads}")
        term = pair_loss(s_attn, _attn(teacher, t - 1, post_softmax),
                         student.hidden[k], teacher.hidden[t], projections[k])
        total = term if total is None else total + term
    return total


def kd_loss(config: DistillConfig, student: ForwardTrace, teacher: ForwardTrace,
            projections: list[Tensor], num_heads: int) -> Tensor:
    if config.mapping is Mapping.LAST_LAYER:
        return kd_loss_last_layer(student, teacher, projections[-1], num_heads, config.post_softmax)
    return kd_loss_uniform(student, teacher, projections, num_heads, config.post_softmax)


# optimiser -------------------------------------------------------------------

class Adam:
    def __init__(self, params: list[Tensor], beta1=0.9, beta2=0.999, eps=1e-6):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        step = lr * math.sqrt(c2) / c1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (step * m / (np.sqrt(v) + self.eps * math.sqrt(c2))).astype(p.data.dtype)


def lr_at(step: int, total: int, peak: float, warmup: float) -> float:
    """Linear warmup over the first ``warmup`` fraction, then linear decay to 0."""
    n_warm = int(round(warmup * total))
    if step < n_warm:
        return peak * (step + 1) / n_warm
    return peak * max(total - step, 0) / max(total - n_warm, 1)


# metrics ---------------------------------------------------------------------

@dataclass
class RunMetrics:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    wallclock_ms: list[int] = field(default_factory=list)
    eval_steps: list[int] = field(default_factory=list)
    eval_loss: list[float] = field(default_factory=list)
    epoch_steps: list[int] = field(default_factory=list)
    steps_per_epoch: int = 0
    total_steps: int = 0

    def loss_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(header)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "lr", "wallclock_ms"])
        for row in zip(self.steps, self.loss, self.lr, self.wallclock_ms):
            w.writerow([row[0], repr(row[1]), repr(row[2]), row[3]])
        return buf.getvalue()

    def eval_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(header)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "eval_loss"])
        for s, l in zip(self.eval_steps, self.eval_loss):
            w.writerow([s, repr(l)])
        return buf.getvalue()

    def eval_at(self, step: int) -> float:
        return self.eval_loss[self.eval_steps.index(step)]

    def steps_to_threshold(self, threshold: float) -> int | None:
        """First evaluated step whose held-out loss is <= threshold."""
        for s, l in zip(self.eval_steps, self.eval_loss):
            if l <= threshold:
                return s
        return None

    @property
    def final_eval(self) -> float:
        return self.eval_loss[-1] if self.eval_loss else float("nan")

    def summary(self, thresholds: dict[str, float] | None = None) -> dict:
        out = {"final_loss": self.loss[-1] if self.loss else None,
               "final_eval_loss": self.eval_loss[-1] if self.eval_loss else None,
               "steps": self.total_steps, "steps_per_epoch": self.steps_per_epoch,
               "epoch_eval": {str(s): self.eval_at(s) for s in self.epoch_steps if s in self.eval_steps}}
        if thresholds:
            out["steps_to_threshold"] = {k: self.steps_to_threshold(v) for k, v in thresholds.items()}
        return out

    def to_dict(self) -> dict:
        return asdict(self)


# teacher targets -------------------------------------------------------------

class TeacherTargets:
    """Frozen-teacher outputs needed by the objective, computed on demand or cached.

    The last-layer objective only needs the final attention tensor and hidden
    state, so those are precomputed once per sequence when they fit in the
    configured memory budget; otherwise the teacher runs per batch.
    """

    def __init__(self, config: ModelConfig, weights: TransformerWeights, sequences: np.ndarray,
                 distill: DistillConfig, batch_size: int = 256):
        self.config, self.weights, self.sequences = config, weights, sequences
        self.post_softmax = distill.post_softmax
        self.cached = False
        n, T = sequences.shape
        per_seq = config.num_heads * T * T + T * config.hidden_size
        itemsize = weights["embeddings.token"].data.dtype.itemsize
        if distill.mapping is Mapping.LAST_LAYER and n * per_seq * itemsize <= distill.teacher_cache_mb * 2 ** 20:
            L = config.num_layers
            self._attn = np.empty((n, config.num_heads, T, T), dtype=weights["embeddings.token"].data.dtype)
            self._hidden = np.empty((n, T, config.hidden_size), dtype=self._attn.dtype)
            for s in range(0, n, batch_size):
                tr = forward(config, weights, sequences[s:s + batch_size])
                self._attn[s:s + batch_size] = _attn(tr, L - 1, self.post_softmax).data
                self._hidden[s:s + batch_size] = tr.hidden[-1].data
            self.cached = True

    def trace(self, idx: np.ndarray) -> ForwardTrace:
        if self.cached:
            a = Tensor(self._attn[idx])
            return ForwardTrace(hidden=[Tensor(self._hidden[idx])], attn_logits=[a], attn_probs=[a])
        return forward(self.config, self.weights, self.sequences[idx])


# training --------------------------------------------------------------------

@dataclass
class DistillResult:
    student: TransformerWeights
    projections: list[np.ndarray]
    metrics: RunMetrics


def init_projections(config: DistillConfig, student_cfg: ModelConfig, teacher_cfg: ModelConfig,
                     plan=None) -> list[np.ndarray]:
    """One projection per student hidden state (index M is the last layer)."""
    from .extraction import projection_init

    M = student_cfg.num_layers
    rng = np.random.default_rng([config.seed, 2])
    out = []
    for site in range(M + 1):
        if config.projection_init == "extraction" and plan is not None:
            out.append(projection_init(plan, student_cfg.hidden_size, teacher_cfg.hidden_size, site))
        else:
            out.append(rng.standard_normal((student_cfg.hidden_size, teacher_cfg.hidden_size))
                       / math.sqrt(student_cfg.hidden_size))
    return out


def _frozen(weights: TransformerWeights, dtype) -> TransformerWeights:
    return TransformerWeights({k: Tensor(t.data.astype(dtype, copy=False)) for k, t in weights.tensors.items()})


def eval_distill_loss(teacher_cfg: ModelConfig, teacher_w: TransformerWeights,
                      student_cfg: ModelConfig, student_w: TransformerWeights,
                      projections: list, sequences: np.ndarray, config: DistillConfig,
                      targets: TeacherTargets | None = None) -> float:
    """Mean objective over a held-out stream, both models frozen."""
    dtype = np.dtype(config.dtype)
    if targets is None:
        targets = TeacherTargets(teacher_cfg, _frozen(teacher_w, dtype), sequences, config)
    sw = _frozen(student_w, dtype)
    projs = [Tensor(np.asarray(p.data if isinstance(p, Tensor) else p, dtype=dtype)) for p in projections]
    total, count = 0.0, 0
    n = len(sequences)
    for s in range(0, n, config.eval_batch_size):
        idx = np.arange(s, min(s + config.eval_batch_size, n))
        st = forward(student_cfg, sw, sequences[idx])
        loss = kd_loss(config, st, targets.trace(idx), projs, student_cfg.num_heads)
        total += float(loss.data) * len(idx)
        count += len(idx)
    return total / count


def train_distill(teacher_cfg: ModelConfig, teacher_w: TransformerWeights,
                  student_cfg: ModelConfig, student_w: TransformerWeights,
                  train_seqs: np.ndarray, config: DistillConfig, *,
                  projections: list[np.ndarray] | None = None, plan=None,
                  heldout: np.ndarray | None = None,
                  train_targets: TeacherTargets | None = None,
                  heldout_targets: TeacherTargets | None = None,
                  log=None) -> DistillResult:
    """Adam over student parameters (MLM head excluded) and the projections."""
    if student_cfg.num_heads != teacher_cfg.num_heads:
        raise ConfigError("student and teacher must share the head count")
    dtype = np.dtype(config.dtype)
    teacher = _frozen(teacher_w, dtype)
    student = student_w.copy(dtype=dtype)
    student.set_requires_grad(True, exclude_prefix=("mlm.",))
    if projections is None:
        projections = init_projections(config, student_cfg, teacher_cfg, plan)
    projs = [Tensor(np.array(p, dtype=dtype), requires_grad=True, name=f"projection.{i}")
             for i, p in enumerate(projections)]
    used_projs = projs[-1:] if config.mapping is Mapping.LAST_LAYER else projs
    params = student.parameters(exclude_prefix=("mlm.",)) + used_projs
    opt = Adam(params, config.beta1, config.beta2, config.adam_eps)

    if train_targets is None:
        train_targets = TeacherTargets(teacher_cfg, teacher, train_seqs, config)
    if heldout is not None and heldout_targets is None:
        heldout_targets = TeacherTargets(teacher_cfg, teacher, heldout, config)

    steps_per_epoch = len(train_seqs) // config.batch_size
    total = steps_per_epoch * config.epochs
    metrics = RunMetrics(steps_per_epoch=steps_per_epoch, total_steps=total)
    eval_points = set()
    for e in range(config.epochs):
        for j in range(1, config.evals_per_epoch + 1):
            eval_points.add(e * steps_per_epoch + (j * steps_per_epoch) // config.evals_per_epoch)
    metrics.epoch_steps = [e * steps_per_epoch for e in range(1, config.epochs + 1)]

    def evaluate(step):
        if heldout is None:
            return
        try:
            val = eval_distill_loss(teacher_cfg, teacher, student_cfg, student, projs, heldout, config,
                                    heldout_targets)
        except ad.NonFiniteError as exc:
            raise DivergenceError(f"held-out evaluation diverged at step {step}: {exc}", step, last_good) from exc
        metrics.eval_steps.append(step)
        metrics.eval_loss.append(val)
        if log:
            log(f"step {step}/{total} eval_loss {val:.6f}")

    last_good = None
    evaluate(0)
    start = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, 1, epoch])
        for idx in iterate_batches(len(train_seqs), config.batch_size, rng):
            lr = lr_at(step, total, config.lr, config.warmup)
            t_trace = train_targets.trace(idx)
            try:
                with ad.Tape() as tape:
                    s_trace = forward(student_cfg, student, train_seqs[idx])
                    loss = kd_loss(config, s_trace, t_trace, projs, student_cfg.num_heads)
                opt.zero_grad()
                tape.backward(loss)
            except ad.NonFiniteError as exc:
                raise DivergenceError(f"distillation diverged at step {step}: {exc}", step, last_good) from exc
            opt.step(lr)
            step += 1
            metrics.steps.append(step)
            metrics.loss.append(float(loss.data))
            metrics.lr.append(lr)
            metrics.wallclock_ms.append(int((time.perf_counter() - start) * 1000) if config.record_wallclock else 0)
            if step in eval_points:
                evaluate(step)
                last_good = (student.copy(), [p.data.copy() for p in projs])
    student.set_requires_grad(False)
    return DistillResult(student, [p.data for p in projs], metrics)
