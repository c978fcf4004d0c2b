"""Width- and depth-wise parameter extraction from teacher to student.

A plan names, for every hidden-indexed axis, FFN layer and attention head,
which teacher indices survive, plus the layer set ``S`` (0 is the embedding).
Student layer ``k`` is initialised from teacher layer ``S[k + 1]``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .importance import ImportanceScores
from .model import ConfigError, ModelConfig, TransformerWeights, init_mlm_head


class WidthMode(str, enum.Enum):
    RAND = "rand"
    IMPT = "impt"
    IMPT_REV_FFN = "impt-rev-ffn"
    IMPT_REV_HEAD = "impt-rev-head"
    IMPT_REV_HIDDEN = "impt-rev-hidden"
    IMPT_REV_ALL = "impt-rev-all"
    WO_HIDDEN_CONSISTENCY = "wo-hidden-consistency"


class LayerMode(str, enum.Enum):
    UNIFORM = "uniform"
    TOP = "top"
    BOTTOM = "bottom"


@dataclass(frozen=True)
class Strategy:
    width_mode: WidthMode = WidthMode.IMPT
    layer_mode: LayerMode = LayerMode.UNIFORM

    def __post_init__(self):
        object.__setattr__(self, "width_mode", WidthMode(self.width_mode))
        object.__setattr__(self, "layer_mode", LayerMode(self.layer_mode))

    @property
    def needs_scores(self) -> bool:
        return self.width_mode is not WidthMode.RAND

    def reversed_families(self) -> set[str]:
        return {
            WidthMode.IMPT_REV_FFN: {"ffn"},
            WidthMode.IMPT_REV_HEAD: {"head"},
            WidthMode.IMPT_REV_HIDDEN: {"hidden"},
            WidthMode.IMPT_REV_ALL: {"ffn", "head", "hidden"},
        }.get(self.width_mode, set())

    def to_dict(self) -> dict:
        return {"width_mode": self.width_mode.value, "layer_mode": self.layer_mode.value}


def select_layers(num_teacher: int, num_student: int, mode: LayerMode | str) -> list[int]:
    N, M, mode = num_teacher, num_student, LayerMode(mode)
    if not 1 <= M <= N:
        raise ConfigError(f"student depth must satisfy 1 <= M <= N, got M={M}, N={N}")
    if mode is LayerMode.UNIFORM:
        return [0] + [k * N // M for k in range(1, M + 1)]
    if mode is LayerMode.TOP:
        return [0] + list(range(N - M + 1, N + 1))
    return list(range(0, M + 1))


@dataclass
class ExtractionPlan:
    layer_set: list[int]
    ffn_idx: list[list[int]]                # per student layer
    head_neuron_idx: list[list[list[int]]]  # per student layer, per head
    hidden_idx: list[int] | None            # shared by every site
    site_hidden_idx: list[list[int]] | None  # per entry of layer_set (no consistency)
    strategy: Strategy = field(default_factory=Strategy)
    seed: int = 0
    teacher_config: dict = field(default_factory=dict)
    student_config: dict = field(default_factory=dict)

    @property
    def consistent(self) -> bool:
        return self.hidden_idx is not None

    def hidden_for_site(self, site: int) -> list[int]:
        """Hidden indices at position ``site`` of the layer set (0 = embedding)."""
        return self.hidden_idx if self.consistent else self.site_hidden_idx[site]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.to_dict(),
            "seed": self.seed,
            "layer_set": self.layer_set,
            "hidden_idx": self.hidden_idx,
            "site_hidden_idx": self.site_hidden_idx,
            "ffn_idx": self.ffn_idx,
            "head_neuron_idx": self.head_neuron_idx,
            "teacher_config": self.teacher_config,
            "student_config": self.student_config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractionPlan":
        return cls(layer_set=list(d["layer_set"]), ffn_idx=d["ffn_idx"], head_neuron_idx=d["head_neuron_idx"],
                   hidden_idx=d["hidden_idx"], site_hidden_idx=d["site_hidden_idx"],
                   strategy=Strategy(**d["strategy"]), seed=d["seed"],
                   teacher_config=d.get("teacher_config", {}), student_config=d.get("student_config", {}))


def _pick(scores: np.ndarray, k: int, lowest: bool) -> list[int]:
    """Indices of the k highest (or lowest) scores; ties go to the lower index."""
    idx = np.arange(len(scores))
    key = scores if lowest else -scores
    order = np.lexsort((idx, key))
    return sorted(int(i) for i in order[:k])


def _draw(rng: np.random.Generator, n: int, k: int) -> list[int]:
    return sorted(int(i) for i in rng.choice(n, size=k, replace=False))


def check_geometry(teacher: ModelConfig, student: ModelConfig) -> None:
    problems = []
    if student.num_heads != teacher.num_heads:
        problems.append(f"student must keep the teacher's head count ({teacher.num_heads}), got {student.num_heads}")
    for name in ("hidden_size", "ffn_size", "head_dim", "num_layers"):
        if getattr(student, name) > getattr(teacher, name):
            problems.append(f"student {name}={getattr(student, name)} exceeds teacher {getattr(teacher, name)}")
    for name in ("vocab_size", "max_seq_len", "layer_norm_eps"):
        if getattr(student, name) != getattr(teacher, name):
            problems.append(f"student {name} must match the teacher")
    if problems:
        raise ConfigError("; ".join(problems))


def plan_width_extraction(scores: ImportanceScores | None, teacher: ModelConfig, student: ModelConfig,
                          strategy: Strategy, seed: int = 0) -> ExtractionPlan:
    check_geometry(teacher, student)
    S = select_layers(teacher.num_layers, student.num_layers, strategy.layer_mode)
    layers = [t - 1 for t in S[1:]]  # 0-based teacher layer for each student layer
    dh, dff, dk, a = student.hidden_size, student.ffn_size, student.head_dim, student.num_heads
    common = dict(layer_set=S, strategy=strategy, seed=seed,
                  teacher_config=teacher.to_dict(), student_config=student.to_dict())

    if strategy.width_mode is WidthMode.RAND:
        rng = np.random.default_rng(seed)
        hidden = _draw(rng, teacher.hidden_size, dh)
        ffn = [_draw(rng, teacher.ffn_size, dff) for _ in layers]
        heads = [[_draw(rng, teacher.head_dim, dk) for _ in range(a)] for _ in layers]
        return ExtractionPlan(ffn_idx=ffn, head_neuron_idx=heads, hidden_idx=hidden, site_hidden_idx=None, **common)

    if scores is None:
        raise ConfigError(f"width mode {strategy.width_mode.value!r} requires importance scores")
    expected = ((teacher.num_layers, teacher.ffn_size),
                (teacher.num_layers, teacher.num_heads, teacher.head_dim),
                (teacher.num_layers + 1, teacher.hidden_size))
    if scores.geometry != expected:
        raise ConfigError(f"scores geometry {scores.geometry} does not match teacher {expected}")
    rev = strategy.reversed_families()
    ffn = [_pick(scores.ffn[l], dff, "ffn" in rev) for l in layers]
    heads = [[_pick(scores.head[l, i], dk, "head" in rev) for i in range(a)] for l in layers]
    if strategy.width_mode is WidthMode.WO_HIDDEN_CONSISTENCY:
        # site 0 scores H^0; student layer k scores the output H^t of its teacher layer t
        sites = [_pick(scores.hidden_per_layer[t], dh, False) for t in S]
        return ExtractionPlan(ffn_idx=ffn, head_neuron_idx=heads, hidden_idx=None, site_hidden_idx=sites, **common)
    hidden = _pick(scores.hidden_dim, dh, "hidden" in rev)
    return ExtractionPlan(ffn_idx=ffn, head_neuron_idx=heads, hidden_idx=hidden, site_hidden_idx=None, **common)


def audit_plan(plan: ExtractionPlan, teacher: ModelConfig | None = None,
               student: ModelConfig | None = None) -> list[tuple[str, bool, str]]:
    """Structural checks as (name, ok, detail) rows."""
    teacher = teacher or ModelConfig.from_dict(plan.teacher_config)
    student = student or ModelConfig.from_dict(plan.student_config)
    rows = []

    def check(name, ok, detail=""):
        rows.append((name, bool(ok), detail))

    def valid(idx, n, k):
        return (len(idx) == k and all(0 <= i < n for i in idx)
                and all(x < y for x, y in zip(idx, idx[1:])))

    S = plan.layer_set
    M, N = student.num_layers, teacher.num_layers
    check("layer_set contains 0", len(S) > 0 and S[0] == 0, str(S))
    check("layer_set size is M+1", len(S) == M + 1, f"|S|={len(S)}, M={M}")
    check("layer_set strictly increasing within 0..N", valid(S, N + 1, M + 1), str(S))
    if plan.consistent:
        check("hidden_idx valid", valid(plan.hidden_idx, teacher.hidden_size, student.hidden_size),
              f"{len(plan.hidden_idx)} of {teacher.hidden_size}")
        check("hidden consistency (one shared index list)", plan.site_hidden_idx is None)
    else:
        sites = plan.site_hidden_idx or []
        check("site hidden lists valid", len(sites) == len(S) and all(
            valid(s, teacher.hidden_size, student.hidden_size) for s in sites))
        distinct = len({tuple(s) for s in sites})
        check("hidden consistency (one shared index list)", distinct <= 1,
              f"{distinct} distinct site lists; expected violation for wo-hidden-consistency"
              if plan.strategy.width_mode is WidthMode.WO_HIDDEN_CONSISTENCY else f"{distinct} distinct site lists")
    check("ffn_idx per student layer", len(plan.ffn_idx) == M and all(
        valid(f, teacher.ffn_size, student.ffn_size) for f in plan.ffn_idx))
    check("head_neuron_idx per layer per head", len(plan.head_neuron_idx) == M and all(
        len(hs) == teacher.num_heads and all(valid(h, teacher.head_dim, student.head_dim) for h in hs)
        for hs in plan.head_neuron_idx))
    check("head count preserved", student.num_heads == teacher.num_heads)
    return rows


def apply_plan(teacher_weights: TransformerWeights, teacher: ModelConfig, plan: ExtractionPlan,
               student: ModelConfig | None = None, rng: np.random.Generator | None = None
               ) -> tuple[TransformerWeights, ModelConfig]:
    """Slice teacher arrays into a student initialisation. The MLM head is fresh."""
    teacher_weights.check(teacher)
    first = plan.ffn_idx[0] if plan.ffn_idx else []
    heads0 = plan.head_neuron_idx[0] if plan.head_neuron_idx else [[]]
    if student is None:
        student = ModelConfig(
            num_layers=len(plan.layer_set) - 1, hidden_size=len(plan.hidden_for_site(0)),
            num_heads=teacher.num_heads, head_dim=len(heads0[0]),
            ffn_size=len(first) if plan.ffn_idx else teacher.ffn_size,
            vocab_size=teacher.vocab_size, max_seq_len=teacher.max_seq_len,
            layer_norm_eps=teacher.layer_norm_eps, dropout=teacher.dropout)
    check_geometry(teacher, student)
    failed = [name for name, ok, _ in audit_plan(plan, teacher, student)
              if not ok and name != "hidden consistency (one shared index list)"]
    if failed:
        raise ConfigError(f"plan does not fit teacher/student geometry: {failed}")

    T = teacher_weights.arrays()
    dk = teacher.head_dim
    out: dict[str, np.ndarray] = {}

    def take(name, rows=None, cols=None):
        arr = T[name]
        if arr.ndim == 1:
            return arr[np.asarray(rows)].copy()
        if rows is not None:
            arr = arr[np.asarray(rows)]
        if cols is not None:
            arr = arr[:, np.asarray(cols)]
        return np.ascontiguousarray(arr)

    h0 = plan.hidden_for_site(0)
    out["embeddings.token"] = take("embeddings.token", cols=h0)
    out["embeddings.position"] = take("embeddings.position", cols=h0)
    out["embeddings.ln.gain"] = take("embeddings.ln.gain", h0)
    out["embeddings.ln.bias"] = take("embeddings.ln.bias", h0)

    for k, t in enumerate(plan.layer_set[1:]):
        src, dst = f"layers.{t - 1}.", f"layers.{k}."
        hid = plan.hidden_for_site(k + 1)
        cols = [i * dk + j for i, hs in enumerate(plan.head_neuron_idx[k]) for j in hs]
        for proj in ("query", "key", "value"):
            out[dst + f"attn.{proj}.weight"] = take(src + f"attn.{proj}.weight", rows=hid, cols=cols)
            out[dst + f"attn.{proj}.bias"] = take(src + f"attn.{proj}.bias", cols)
        out[dst + "attn.output.weight"] = take(src + "attn.output.weight", rows=cols, cols=hid)
        out[dst + "attn.output.bias"] = take(src + "attn.output.bias", hid)
        out[dst + "attn.ln.gain"] = take(src + "attn.ln.gain", hid)
        out[dst + "attn.ln.bias"] = take(src + "attn.ln.bias", hid)
        ffn = plan.ffn_idx[k]
        out[dst + "ffn.in.weight"] = take(src + "ffn.in.weight", rows=hid, cols=ffn)
        out[dst + "ffn.in.bias"] = take(src + "ffn.in.bias", ffn)
        out[dst + "ffn.out.weight"] = take(src + "ffn.out.weight", rows=ffn, cols=hid)
        out[dst + "ffn.out.bias"] = take(src + "ffn.out.bias", hid)
        out[dst + "ffn.ln.gain"] = take(src + "ffn.ln.gain", hid)
        out[dst + "ffn.ln.bias"] = take(src + "ffn.ln.bias", hid)

    dtype = T["embeddings.token"].dtype
    w, b = init_mlm_head(student, rng if rng is not None else np.random.default_rng(plan.seed), dtype=dtype)
    out["mlm.weight"], out["mlm.bias"] = w, b
    weights = TransformerWeights.from_arrays(out)
    weights.check(student)
    return weights, student


def audit_extraction(teacher_weights: TransformerWeights, student_weights: TransformerWeights,
                     plan: ExtractionPlan) -> list[tuple[str, bool, str]]:
    """Verify every student tensor equals the teacher slice the plan names.

    Hidden-indexed axes are checked against the plan's hidden list for the
    tensor's site, so for consistent plans this confirms that every hidden
    axis in the student was cut with the same index list.
    """
    teacher = ModelConfig.from_dict(plan.teacher_config)
    T, St = teacher_weights.arrays(), student_weights.arrays()
    dk = teacher.head_dim
    rows = []
    sites = {"embeddings.": (None, 0)}
    for k, t in enumerate(plan.layer_set[1:]):
        sites[f"layers.{k}."] = (t - 1, k + 1)
    for name, arr in St.items():
        if name.startswith("mlm."):
            continue
        prefix = "embeddings." if name.startswith("embeddings.") else ".".join(name.split(".")[:2]) + "."
        tl, site = sites[prefix]
        hid = np.asarray(plan.hidden_for_site(site))
        src = T[name if tl is None else f"layers.{tl}." + name[len(prefix):]]
        short = name[len(prefix):]
        if tl is not None:
            k = site - 1
            cols = np.asarray([i * dk + j for i, hs in enumerate(plan.head_neuron_idx[k]) for j in hs])
            ffn = np.asarray(plan.ffn_idx[k])
        if name in ("embeddings.token", "embeddings.position"):
            expected = src[:, hid]
        elif short.startswith("attn.") and short.split(".")[1] in ("query", "key", "value"):
            expected = src[np.ix_(hid, cols)] if short.endswith("weight") else src[cols]
        elif short == "attn.output.weight":
            expected = src[np.ix_(cols, hid)]
        elif short == "ffn.in.weight":
            expected = src[np.ix_(hid, ffn)]
        elif short == "ffn.in.bias":
            expected = src[ffn]
        elif short == "ffn.out.weight":
            expected = src[np.ix_(ffn, hid)]
        else:
            expected = src[hid]
        ok = expected.shape == arr.shape and np.array_equal(expected.astype(arr.dtype), arr)
        rows.append((name, ok, f"site {site}"))
    return rows


def projection_init(plan: ExtractionPlan, student_hidden: int, teacher_hidden: int,
                    site: int | None = None) -> np.ndarray:
    """W[r, c] = 1 when student hidden dim r was cut from teacher dim c."""
    idx = plan.hidden_for_site(len(plan.layer_set) - 1 if site is None else site)
    W = np.zeros((student_hidden, teacher_hidden))
    W[np.arange(len(idx)), np.asarray(idx)] = 1.0
    return W
