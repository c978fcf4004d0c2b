"""Strategy matrix: every initialisation distilled under shared seeds and data order."""

from __future__ import annotations

import csv
import io
import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distill import DistillConfig, Mapping, TeacherTargets
from .experiment import Corpus, Experiment, extract_student, random_student, run_distill
from .extraction import LayerMode, Strategy, WidthMode
from .importance import ImportanceScores
from .model import TransformerWeights

# name -> (strategy or None for random init, distillation mapping)
CELLS: dict[str, tuple[Strategy | None, Mapping]] = {
    "Rand-Init": (None, Mapping.LAST_LAYER),
    "ETD-Rand": (Strategy(WidthMode.RAND, LayerMode.UNIFORM), Mapping.LAST_LAYER),
    "ETD-Impt": (Strategy(WidthMode.IMPT, LayerMode.UNIFORM), Mapping.LAST_LAYER),
    "ETD-Impt-rev-ffn": (Strategy(WidthMode.IMPT_REV_FFN, LayerMode.UNIFORM), Mapping.LAST_LAYER),
    "ETD-Impt-rev-head": (Strategy(WidthMode.IMPT_REV_HEAD, LayerMode.UNIFORM), Mapping.LAST_LAYER),
    "ETD-Impt-rev-hidden": (Strategy(WidthMode.IMPT_REV_HIDDEN, LayerMode.UNIFORM), Mapping.LAST_LAYER),
    "ETD-Impt-rev-all": (Strategy(WidthMode.IMPT_REV_ALL, LayerMode.UNIFORM), Mapping.LAST_LAYER),
    "ETD-wo-hidn-con": (Strategy(WidthMode.WO_HIDDEN_CONSISTENCY, LayerMode.UNIFORM), Mapping.LAST_LAYER),
    "ETD-Impt-top": (Strategy(WidthMode.IMPT, LayerMode.TOP), Mapping.LAST_LAYER),
    "ETD-Impt-bottom": (Strategy(WidthMode.IMPT, LayerMode.BOTTOM), Mapping.LAST_LAYER),
    # uniform layer-mapping objective with importance-based init; opt-in
    "ETD-Impt-uniform-map": (Strategy(WidthMode.IMPT, LayerMode.UNIFORM), Mapping.UNIFORM),
}
DEFAULT_CELLS = [c for c in CELLS if c != "ETD-Impt-uniform-map"]
BASELINE = "Rand-Init"


@dataclass
class CellResult:
    name: str
    seed: int
    status: str = "ok"
    error: str = ""
    final_eval: float = float("nan")
    eval_steps: list[int] = field(default_factory=list)
    eval_loss: list[float] = field(default_factory=list)
    epoch_steps: list[int] = field(default_factory=list)
    total_steps: int = 0
    loss_csv: str = ""

    def eval_at(self, step: int) -> float:
        return self.eval_loss[self.eval_steps.index(step)]

    def steps_to(self, threshold: float) -> int | None:
        for s, l in zip(self.eval_steps, self.eval_loss):
            if l <= threshold:
                return s
        return None


def run_cell(exp: Experiment, name: str, seed: int, teacher_w: TransformerWeights,
             scores: ImportanceScores | None, corpus: Corpus, targets: dict | None = None,
             log=None) -> CellResult:
    strategy, mapping = CELLS[name]
    res = CellResult(name, seed)
    try:
        run_exp = exp
        if mapping is not exp.distill.mapping:
            d = DistillConfig(**{**exp.distill.to_dict(), "mapping": mapping.value})
            run_exp = Experiment(**{**exp.__dict__, "distill": d})
        if strategy is None:
            plan, student = None, random_student(exp, seed)
        else:
            plan, student = extract_student(exp, teacher_w, scores, strategy, seed)
        t = (targets or {}).get(mapping, (None, None))
        out = run_distill(run_exp, teacher_w, student, corpus, plan, seed=seed,
                          train_targets=t[0], heldout_targets=t[1], log=log)
        m = out.metrics
        res.final_eval = m.final_eval
        res.eval_steps, res.eval_loss = list(m.eval_steps), list(m.eval_loss)
        res.epoch_steps, res.total_steps = list(m.epoch_steps), m.total_steps
        res.loss_csv = m.loss_csv(exp.csv_header(seed))
    except Exception as exc:  # a failing cell must not sink the matrix
        res.status = "failed"
        res.error = f"{type(exc).__name__}: {exc}"
        if log:
            log(traceback.format_exc())
    return res


_WORKER: dict = {}


def _worker_init(exp, teacher_arrays, scores):
    _WORKER["exp"] = exp
    _WORKER["teacher"] = TransformerWeights.from_arrays(teacher_arrays)
    _WORKER["scores"] = scores
    _WORKER["corpus"] = Corpus(exp.corpus)


def _worker_run(name, seed):
    return run_cell(_WORKER["exp"], name, seed, _WORKER["teacher"], _WORKER["scores"], _WORKER["corpus"])


def run_ablation(exp: Experiment, teacher_w: TransformerWeights, scores: ImportanceScores,
                 corpus: Corpus | None = None, cells: list[str] | None = None,
                 seeds: list[int] | None = None, jobs: int | None = None, log=None) -> list[CellResult]:
    cells = cells or exp.ablation.get("cells") or DEFAULT_CELLS
    seeds = seeds if seeds is not None else list(exp.ablation.get("seeds", [0, 1, 2]))
    unknown = [c for c in cells if c not in CELLS]
    if unknown:
        from .model import ConfigError
        raise ConfigError(f"unknown ablation cells {unknown}; known: {list(CELLS)}")
    jobs = int(jobs or exp.ablation.get("jobs", 1))
    work = [(c, s) for s in seeds for c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_worker_init,
                                 initargs=(exp, teacher_w.arrays(), scores)) as pool:
            futures = [pool.submit(_worker_run, c, s) for c, s in work]
            return [f.result() for f in futures]

    corpus = corpus or Corpus(exp.corpus)
    dtype = np.dtype(exp.distill.dtype)
    frozen = teacher_w.copy(dtype=dtype, requires_grad=False)
    targets = {}
    for mapping in {CELLS[c][1] for c in cells}:
        d = DistillConfig(**{**exp.distill.to_dict(), "mapping": mapping.value})
        targets[mapping] = (TeacherTargets(exp.teacher, frozen, corpus.train, d),
                            TeacherTargets(exp.teacher, frozen, corpus.heldout, d))
    results = []
    for c, s in work:
        if log:
            log(f"cell {c} seed {s}")
        results.append(run_cell(exp, c, s, frozen, scores, corpus, targets, log=None))
        if log:
            r = results[-1]
            log(f"  -> {r.status} final_eval={r.final_eval:.6f} {r.error}")
    return results


def summarize(results: list[CellResult], baseline: str = BASELINE) -> dict:
    """Per-strategy final losses and steps needed to reach the baseline's final loss."""
    seeds = sorted({r.seed for r in results})
    by = {(r.name, r.seed): r for r in results}
    names = list(dict.fromkeys(r.name for r in results))
    table = {}
    for name in names:
        row = {"final_eval": {}, "steps_to_baseline_final": {}, "step_ratio": {}, "status": {}}
        for s in seeds:
            r = by.get((name, s))
            if r is None:
                continue
            row["status"][str(s)] = r.status
            row["final_eval"][str(s)] = r.final_eval
            b = by.get((baseline, s))
            if b is not None and b.status == "ok" and r.status == "ok":
                st = r.steps_to(b.final_eval)
                row["steps_to_baseline_final"][str(s)] = st
                row["step_ratio"][str(s)] = None if st is None else st / b.total_steps
        finals = [v for v in row["final_eval"].values() if v == v]
        row["mean_final_eval"] = float(np.mean(finals)) if finals else float("nan")
        table[name] = row
    return {"baseline": baseline, "seeds": seeds, "strategies": table}


def report_csv(summary: dict, header: str = "") -> str:
    seeds = summary["seeds"]
    buf = io.StringIO()
    buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "mean_final_eval"] + [f"final_eval_seed{s}" for s in seeds]
               + [f"steps_to_baseline_seed{s}" for s in seeds] + [f"step_ratio_seed{s}" for s in seeds]
               + ["status"])
    for name, row in summary["strategies"].items():
        def get(key, s):
            v = row[key].get(str(s))
            return "" if v is None else (repr(v) if isinstance(v, float) else v)
        w.writerow([name, repr(row["mean_final_eval"])] + [get("final_eval", s) for s in seeds]
                   + [get("steps_to_baseline_final", s) for s in seeds] + [get("step_ratio", s) for s in seeds]
                   + [";".join(f"{s}:{row['status'].get(str(s), '')}" for s in seeds)])
    return buf.getvalue()


def write_ablation(out_dir, exp: Experiment, results: list[CellResult]) -> dict:
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    summary = summarize(results)
    summary["provenance"] = exp.provenance()
    (out / "report.csv").write_text(report_csv(summary, exp.csv_header()))
    (out / "report.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    for r in results:
        stem = f"{r.name}__seed{r.seed}"
        buf = io.StringIO()
        buf.write(exp.csv_header(r.seed))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "eval_loss"])
        for s, l in zip(r.eval_steps, r.eval_loss):
            w.writerow([s, repr(l)])
        (out / "cells" / f"{stem}.eval.csv").write_text(buf.getvalue())
        if r.loss_csv:
            (out / "cells" / f"{stem}.loss.csv").write_text(r.loss_csv)
        if r.status != "ok":
            (out / "cells" / f"{stem}.error.txt").write_text(r.error + "\n")
    return summary
