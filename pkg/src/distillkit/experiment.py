"""Experiment configuration and the pipeline stages behind the CLI."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CorpusSpec, generate_corpus, make_generator, mask_batch
from .distill import DistillConfig, DistillResult, TeacherTargets, train_distill
from .extraction import (ExtractionPlan, Strategy, apply_plan, check_geometry,
                         plan_width_extraction)
from .importance import ImportanceScores, score_calibration
from .model import ConfigError, ModelConfig, TransformerWeights, init_weights
from .pretrain import PretrainConfig, pretrain_teacher
from .tensorio import config_hash

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/desk",
    "corpus": CorpusSpec().to_dict(),
    "teacher": {"num_layers": 4, "hidden_size": 64, "num_heads": 4, "head_dim": 16, "ffn_size": 256,
                "vocab_size": 64, "max_seq_len": 32, "layer_norm_eps": 1e-12, "dropout": 0.0},
    "pretrain": PretrainConfig().to_dict(),
    "student": {"num_layers": 2, "hidden_size": 32, "head_dim": 8, "ffn_size": 128},
    "strategy": Strategy().to_dict(),
    "distill": DistillConfig().to_dict(),
    "scoring": {"batch_size": 32, "dtype": "float64"},
    "ablation": {"seeds": [0, 1, 2], "cells": None, "jobs": 1},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in out:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict) and k != "grammar_rules":
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def apply_override(cfg: dict, assignment: str) -> dict:
    """Apply ``dotted.path=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like key.path=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    cfg = copy.deepcopy(cfg)
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value
    return cfg


@dataclass
class Experiment:
    raw: dict
    corpus: CorpusSpec
    teacher: ModelConfig
    student: ModelConfig
    pretrain: PretrainConfig
    strategy: Strategy
    distill: DistillConfig
    seed: int
    output_dir: Path
    scoring: dict = field(default_factory=dict)
    ablation: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def provenance(self, seed=None) -> dict:
        from . import __version__
        return {"config_hash": self.hash, "seed": self.seed if seed is None else seed, "tool_version": __version__}

    def csv_header(self, seed=None) -> str:
        p = self.provenance(seed)
        return f"# config_hash={p['config_hash']} seed={p['seed']} tool_version={p['tool_version']}\n"


def build_experiment(raw: dict | None = None, overrides: list[str] | None = None) -> Experiment:
    cfg = _merge(DEFAULTS, raw or {})
    for o in overrides or []:
        cfg = apply_override(cfg, o)
    try:
        corpus = CorpusSpec.from_dict(cfg["corpus"])
        teacher = ModelConfig.from_dict(cfg["teacher"])
        s = cfg["student"]
        student = ModelConfig(num_layers=s["num_layers"], hidden_size=s["hidden_size"],
                              num_heads=s.get("num_heads", teacher.num_heads), head_dim=s["head_dim"],
                              ffn_size=s["ffn_size"], vocab_size=teacher.vocab_size,
                              max_seq_len=teacher.max_seq_len, layer_norm_eps=teacher.layer_norm_eps,
                              dropout=0.0)
        pretrain = PretrainConfig(**cfg["pretrain"])
        strategy = Strategy(**cfg["strategy"])
        distill = DistillConfig(**cfg["distill"])
    except TypeError as exc:
        raise ConfigError(f"bad config field: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if teacher.vocab_size != corpus.vocab_size:
        raise ConfigError(f"teacher vocab_size {teacher.vocab_size} != corpus vocab_size {corpus.vocab_size}")
    if teacher.max_seq_len < corpus.seq_len:
        raise ConfigError(f"corpus seq_len {corpus.seq_len} exceeds teacher max_seq_len {teacher.max_seq_len}")
    check_geometry(teacher, student)
    return Experiment(cfg, corpus, teacher, student, pretrain, strategy, distill, int(cfg["seed"]),
                      Path(cfg["output_dir"]), cfg["scoring"], cfg["ablation"])


def load_experiment(path, overrides: list[str] | None = None) -> Experiment:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return build_experiment(raw, overrides)


# stages ----------------------------------------------------------------------

class Corpus:
    """Materialised train / calibration / held-out splits for one experiment."""

    def __init__(self, spec: CorpusSpec):
        self.spec = spec
        self.generator = make_generator(spec)
        self.train = generate_corpus(spec, "train", generator=self.generator)
        self.calibration = self.train[: spec.calibration_sequences]
        self.heldout = generate_corpus(spec, "heldout", generator=self.generator)


def run_pretrain(exp: Experiment, corpus: Corpus, log=None):
    return pretrain_teacher(exp.teacher, exp.corpus, corpus.train, exp.pretrain, corpus.heldout, log=log)


def run_scoring(exp: Experiment, teacher_w: TransformerWeights, corpus: Corpus) -> ImportanceScores:
    dtype = np.dtype(exp.scoring.get("dtype", "float64"))
    w = teacher_w.copy(dtype=dtype, requires_grad=False)
    bs = int(exp.scoring.get("batch_size", 32))
    calib = corpus.calibration

    def batches():
        for b, s in enumerate(range(0, len(calib), bs)):
            yield mask_batch(calib[s:s + bs], exp.corpus, [exp.seed, 9, b])

    return score_calibration(exp.teacher, w, batches())


def random_student(exp: Experiment, seed: int) -> TransformerWeights:
    return init_weights(exp.student, np.random.default_rng([seed, 11]), exp.pretrain.init_std)


def extract_student(exp: Experiment, teacher_w: TransformerWeights, scores: ImportanceScores | None,
                    strategy: Strategy, seed: int) -> tuple[ExtractionPlan, TransformerWeights]:
    plan = plan_width_extraction(scores, exp.teacher, exp.student, strategy, seed)
    weights, _ = apply_plan(teacher_w, exp.teacher, plan, exp.student, rng=np.random.default_rng([seed, 12]))
    return plan, weights


def run_distill(exp: Experiment, teacher_w: TransformerWeights, student_w: TransformerWeights,
                corpus: Corpus, plan: ExtractionPlan | None, seed: int | None = None,
                train_targets: TeacherTargets | None = None, heldout_targets: TeacherTargets | None = None,
                log=None) -> DistillResult:
    dcfg = exp.distill
    if seed is not None:
        dcfg = DistillConfig(**{**dcfg.to_dict(), "seed": seed})
    if plan is None:
        dcfg = DistillConfig(**{**dcfg.to_dict(), "projection_init": "random"})
    return train_distill(exp.teacher, teacher_w, exp.student, student_w, corpus.train, dcfg,
                         plan=plan, heldout=corpus.heldout, train_targets=train_targets,
                         heldout_targets=heldout_targets, log=log)
