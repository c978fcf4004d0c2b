"""Command-line entry point: ``distillkit <subcommand> --config exp.json``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from . import __version__
from .ablation import run_ablation, write_ablation
from .autodiff import NonFiniteError
from .distill import DivergenceError, eval_distill_loss
from .experiment import (Corpus, Experiment, build_experiment, extract_student, load_experiment,
                         random_student, run_distill, run_pretrain, run_scoring)
from .extraction import ExtractionPlan, WidthMode, audit_extraction, audit_plan
from .importance import ImportanceScores
from .model import ConfigError
from .tensorio import Checkpoint, load_checkpoint, load_tensors, save_checkpoint, save_tensors

log = logging.getLogger("distillkit")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _out(exp: Experiment, args) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else exp.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _load_plan(path) -> ExtractionPlan:
    with open(path) as fh:
        return ExtractionPlan.from_dict(json.load(fh))


def _save_scores(path: Path, scores: ImportanceScores, exp: Experiment) -> None:
    save_tensors(path, scores.to_arrays(), {"kind": "importance", "token_count": scores.token_count,
                                            "provenance": exp.provenance()})


def _load_scores(path) -> ImportanceScores:
    arrays, meta = load_tensors(path)
    if meta.get("kind") != "importance":
        raise ConfigError(f"{path} is not an importance-score file")
    return ImportanceScores.from_arrays(arrays, meta.get("token_count", 0))


def _check_teacher(exp: Experiment, ckpt: Checkpoint) -> None:
    if ckpt.config != exp.teacher:
        raise ConfigError(f"teacher checkpoint geometry {ckpt.config} does not match config {exp.teacher}")


def cmd_pretrain_teacher(exp: Experiment, args) -> int:
    out = _out(exp, args)
    corpus = Corpus(exp.corpus)
    weights, metrics = run_pretrain(exp, corpus, log=log.info)
    save_checkpoint(out / "teacher.ckpt", Checkpoint(exp.teacher, weights, exp.provenance()))
    (out / "pretrain_loss.csv").write_text(metrics.loss_csv(exp.csv_header()))
    (out / "pretrain_eval.csv").write_text(metrics.eval_csv(exp.csv_header()))
    _write_json(out / "pretrain_summary.json", {"provenance": exp.provenance(), **metrics.summary(),
                                                "final_heldout_mlm": metrics.final_eval})
    log.info("teacher written to %s (held-out MLM %.4f)", out / "teacher.ckpt", metrics.final_eval)
    return EXIT_OK


def cmd_score(exp: Experiment, args) -> int:
    out = _out(exp, args)
    teacher = load_checkpoint(args.teacher)
    _check_teacher(exp, teacher)
    scores = run_scoring(exp, teacher.weights, Corpus(exp.corpus))
    _save_scores(out / "scores.tensors", scores, exp)
    log.info("scored %d calibration tokens -> %s", scores.token_count, out / "scores.tensors")
    return EXIT_OK


def cmd_extract(exp: Experiment, args) -> int:
    out = _out(exp, args)
    teacher = load_checkpoint(args.teacher)
    _check_teacher(exp, teacher)
    if args.random_init:
        weights = random_student(exp, exp.seed)
        save_checkpoint(out / "student_init.ckpt", Checkpoint(exp.student, weights, exp.provenance(),
                                                               {"init": "random"}))
        return EXIT_OK
    scores = _load_scores(args.scores) if args.scores else None
    if exp.strategy.needs_scores and scores is None:
        raise ConfigError(f"strategy {exp.strategy.width_mode.value!r} needs --scores")
    plan, weights = extract_student(exp, teacher.weights, scores, exp.strategy, exp.seed)
    doc = plan.to_dict()
    doc["provenance"] = exp.provenance()
    _write_json(out / "plan.json", doc)
    save_checkpoint(out / "student_init.ckpt", Checkpoint(exp.student, weights, exp.provenance(),
                                                           {"init": "extracted", "strategy": plan.strategy.to_dict()}))
    return EXIT_OK


def cmd_audit_plan(exp: Experiment | None, args) -> int:
    plan = _load_plan(args.plan)
    rows = audit_plan(plan)
    if args.teacher and args.student:
        rows += [("slice " + n, ok, d) for n, ok, d in audit_extraction(
            load_checkpoint(args.teacher).weights, load_checkpoint(args.student).weights, plan)]
    expected = plan.strategy.width_mode is WidthMode.WO_HIDDEN_CONSISTENCY
    failures = 0
    for name, ok, detail in rows:
        waived = not ok and expected and name.startswith("hidden consistency")
        status = "PASS" if ok else ("WAIVED" if waived else "FAIL")
        failures += status == "FAIL"
        print(f"{status:6s} {name}" + (f"  ({detail})" if detail else ""))
    print(f"{len(rows) - failures}/{len(rows)} checks passed")
    return EXIT_OK if failures == 0 else EXIT_CONFIG


def cmd_distill(exp: Experiment, args) -> int:
    out = _out(exp, args)
    teacher = load_checkpoint(args.teacher)
    _check_teacher(exp, teacher)
    student = load_checkpoint(args.student_init)
    if student.config != exp.student:
        raise ConfigError(f"student checkpoint geometry {student.config} does not match config {exp.student}")
    plan = _load_plan(args.plan) if args.plan else None
    try:
        result = run_distill(exp, teacher.weights, student.weights, Corpus(exp.corpus), plan, log=log.info)
    except DivergenceError as exc:
        if exc.last_good is not None:
            w, _ = exc.last_good
            save_checkpoint(out / "student_last_good.ckpt", Checkpoint(exp.student, w, exp.provenance()))
        raise
    save_checkpoint(out / "student_final.ckpt", Checkpoint(exp.student, result.student, exp.provenance()))
    save_tensors(out / "projection.tensors", {f"projection/{i}": p for i, p in enumerate(result.projections)},
                 {"kind": "projection", "provenance": exp.provenance()})
    (out / "metrics.csv").write_text(result.metrics.loss_csv(exp.csv_header()))
    (out / "eval.csv").write_text(result.metrics.eval_csv(exp.csv_header()))
    _write_json(out / "summary.json", {"provenance": exp.provenance(), **result.metrics.summary()})
    return EXIT_OK


def cmd_eval(exp: Experiment, args) -> int:
    teacher = load_checkpoint(args.teacher)
    student = load_checkpoint(args.student)
    arrays, meta = load_tensors(args.projection)
    projections = [arrays[f"projection/{i}"] for i in range(len(arrays))]
    corpus = Corpus(exp.corpus)
    value = eval_distill_loss(exp.teacher, teacher.weights, exp.student, student.weights, projections,
                              corpus.heldout, exp.distill)
    result = {"provenance": exp.provenance(), "eval_loss": value, "heldout_sequences": len(corpus.heldout)}
    print(json.dumps(result, sort_keys=True))
    if getattr(args, "out", None):
        _write_json(_out(exp, args) / "eval.json", result)
    return EXIT_OK


def cmd_ablate(exp: Experiment, args) -> int:
    out = _out(exp, args)
    corpus = Corpus(exp.corpus)
    if args.teacher:
        teacher = load_checkpoint(args.teacher)
        _check_teacher(exp, teacher)
        teacher_w = teacher.weights
    else:
        teacher_w, metrics = run_pretrain(exp, corpus, log=log.info)
        save_checkpoint(out / "teacher.ckpt", Checkpoint(exp.teacher, teacher_w, exp.provenance()))
        (out / "pretrain_loss.csv").write_text(metrics.loss_csv(exp.csv_header()))
    scores = _load_scores(args.scores) if args.scores else run_scoring(exp, teacher_w, corpus)
    if not args.scores:
        _save_scores(out / "scores.tensors", scores, exp)
    cells = args.cells.split(",") if args.cells else None
    results = run_ablation(exp, teacher_w, scores, corpus, cells=cells, jobs=args.jobs, log=log.info)
    summary = write_ablation(out / "ablation", exp, results)
    for name, row in summary["strategies"].items():
        print(f"{name:24s} mean_final_eval={row['mean_final_eval']:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distillkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, config=True):
        sp = sub.add_parser(name, help=help_)
        if config:
            sp.add_argument("--config", help="experiment JSON (defaults to the desk setup)")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="override a config field by dotted path; repeatable")
            sp.add_argument("--out", help="output directory (default: config output_dir)")
        sp.add_argument("-v", "--verbose", action="store_true")
        sp.set_defaults(func=fn, needs_config=config)
        return sp

    add("pretrain-teacher", cmd_pretrain_teacher, "MLM-pretrain the teacher")
    sp = add("score", cmd_score, "Taylor importance scores over the calibration split")
    sp.add_argument("--teacher", required=True)
    sp = add("extract", cmd_extract, "build a plan and a student initialisation")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--scores")
    sp.add_argument("--random-init", action="store_true", help="write a randomly initialised student instead")
    sp = add("audit-plan", cmd_audit_plan, "structural checks on a plan file", config=False)
    sp.add_argument("plan")
    sp.add_argument("--teacher")
    sp.add_argument("--student")
    sp = add("distill", cmd_distill, "distil a student from the teacher")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--student-init", required=True)
    sp.add_argument("--plan", help="plan file; enables extraction-consistent projection init")
    sp = add("eval", cmd_eval, "held-out distillation loss of a student")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--student", required=True)
    sp.add_argument("--projection", required=True)
    sp = add("ablate", cmd_ablate, "run the strategy matrix and write a comparison report")
    sp.add_argument("--teacher")
    sp.add_argument("--scores")
    sp.add_argument("--cells", help="comma-separated cell names (default: all but opt-in cells)")
    sp.add_argument("--jobs", type=int, default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        exp = None
        if args.needs_config:
            exp = load_experiment(args.config, args.set) if args.config else build_experiment(None, args.set)
        return args.func(exp, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
