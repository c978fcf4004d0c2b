import json

import numpy as np
import pytest

from distillkit.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, main
from distillkit.experiment import apply_override, build_experiment
from distillkit.model import ConfigError
from distillkit.tensorio import load_checkpoint

TINY = {
    "corpus": {"vocab_size": 16, "seq_len": 8, "num_sequences": 256, "calibration_sequences": 64,
               "heldout_sequences": 64},
    "teacher": {"num_layers": 2, "hidden_size": 16, "num_heads": 2, "head_dim": 8, "ffn_size": 32,
                "vocab_size": 16, "max_seq_len": 8},
    "student": {"num_layers": 1, "hidden_size": 8, "head_dim": 4, "ffn_size": 16},
    "pretrain": {"epochs": 1, "eval_sequences": 64, "record_wallclock": False},
    "distill": {"epochs": 1, "evals_per_epoch": 2, "eval_batch_size": 64, "lr": 1e-3, "record_wallclock": False},
    "scoring": {"batch_size": 16},
    "ablation": {"seeds": [0], "cells": ["Rand-Init", "ETD-Impt"]},
}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "exp.json"
    cfg.write_text(json.dumps(TINY))
    out = root / "run"
    c, o = str(cfg), str(out)
    assert main(["pretrain-teacher", "--config", c, "--out", o]) == 0
    assert main(["score", "--config", c, "--out", o, "--teacher", f"{o}/teacher.ckpt"]) == 0
    assert main(["extract", "--config", c, "--out", o, "--teacher", f"{o}/teacher.ckpt",
                 "--scores", f"{o}/scores.tensors"]) == 0
    assert main(["distill", "--config", c, "--out", o, "--teacher", f"{o}/teacher.ckpt",
                 "--student-init", f"{o}/student_init.ckpt", "--plan", f"{o}/plan.json"]) == 0
    return root, cfg, out


def test_pipeline_outputs_and_provenance(tiny_run):
    _, _, out = tiny_run
    for name in ("teacher.ckpt", "pretrain_loss.csv", "pretrain_eval.csv", "pretrain_summary.json", "scores.tensors",
                 "plan.json", "student_init.ckpt", "student_final.ckpt", "projection.tensors", "metrics.csv",
                 "eval.csv", "summary.json"):
        assert (out / name).exists(), name
    header = (out / "metrics.csv").read_text().splitlines()
    assert header[0].startswith("# config_hash=") and "seed=0" in header[0] and "tool_version=" in header[0]
    assert header[1] == "step,loss,lr,wallclock_ms"
    assert set(json.loads((out / "summary.json").read_text())["provenance"]) == {"config_hash", "seed",
                                                                                  "tool_version"}
    assert "provenance" in json.loads((out / "plan.json").read_text())
    assert load_checkpoint(out / "teacher.ckpt").provenance["config_hash"]


def test_audit_and_eval(tiny_run, capsys):
    _, cfg, out = tiny_run
    assert main(["audit-plan", str(out / "plan.json"), "--teacher", str(out / "teacher.ckpt"),
                 "--student", str(out / "student_init.ckpt")]) == 0
    text = capsys.readouterr().out
    assert "FAIL" not in text and "slice layers.0.ffn.in.weight" in text
    assert main(["eval", "--config", str(cfg), "--teacher", str(out / "teacher.ckpt"),
                 "--student", str(out / "student_final.ckpt"), "--projection", str(out / "projection.tensors")]) == 0
    res = json.loads(capsys.readouterr().out)
    final = json.loads((out / "summary.json").read_text())["final_eval_loss"]
    assert res["eval_loss"] == pytest.approx(final, rel=1e-5)


def test_student_mismatch_fails_audit(tiny_run, capsys):
    root, cfg, out = tiny_run
    other = root / "rand"
    assert main(["extract", "--config", str(cfg), "--out", str(other), "--teacher", str(out / "teacher.ckpt"),
                 "--random-init"]) == 0
    assert main(["audit-plan", str(out / "plan.json"), "--teacher", str(out / "teacher.ckpt"),
                 "--student", str(other / "student_init.ckpt")]) == EXIT_CONFIG
    assert "FAIL" in capsys.readouterr().out


def test_wo_hidden_consistency_plan_is_waived(tiny_run, capsys):
    root, cfg, out = tiny_run
    o = root / "wohc"
    assert main(["extract", "--config", str(cfg), "--out", str(o), "--teacher", str(out / "teacher.ckpt"),
                 "--scores", str(out / "scores.tensors"), "--set", "strategy.width_mode=wo-hidden-consistency"]) == 0
    assert main(["audit-plan", str(o / "plan.json")]) == 0
    assert "WAIVED" in capsys.readouterr().out


def test_rerun_is_byte_identical(tiny_run, tmp_path):
    _, cfg, out = tiny_run
    o = str(tmp_path)
    c = str(cfg)
    assert main(["pretrain-teacher", "--config", c, "--out", o]) == 0
    assert main(["score", "--config", c, "--out", o, "--teacher", f"{o}/teacher.ckpt"]) == 0
    assert main(["extract", "--config", c, "--out", o, "--teacher", f"{o}/teacher.ckpt",
                 "--scores", f"{o}/scores.tensors"]) == 0
    assert main(["distill", "--config", c, "--out", o, "--teacher", f"{o}/teacher.ckpt",
                 "--student-init", f"{o}/student_init.ckpt", "--plan", f"{o}/plan.json"]) == 0
    for f in out.iterdir():
        assert (tmp_path / f.name).read_bytes() == f.read_bytes(), f.name


def test_ablate_report(tiny_run):
    root, cfg, out = tiny_run
    o = root / "abl"
    assert main(["ablate", "--config", str(cfg), "--out", str(o), "--teacher", str(out / "teacher.ckpt"),
                 "--scores", str(out / "scores.tensors")]) == 0
    lines = (o / "ablation" / "report.csv").read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    assert [l.split(",")[0] for l in lines[2:]] == ["Rand-Init", "ETD-Impt"]
    assert (o / "ablation" / "cells" / "ETD-Impt__seed0.eval.csv").exists()
    first = (o / "ablation" / "report.csv").read_bytes()
    assert main(["ablate", "--config", str(cfg), "--out", str(o), "--teacher", str(out / "teacher.ckpt"),
                 "--scores", str(out / "scores.tensors")]) == 0
    assert (o / "ablation" / "report.csv").read_bytes() == first


def test_ablate_parallel_matches_sequential(tiny_run):
    root, cfg, out = tiny_run
    reports = []
    for jobs in ("1", "2"):
        o = root / f"abl_jobs{jobs}"
        assert main(["ablate", "--config", str(cfg), "--out", str(o), "--teacher", str(out / "teacher.ckpt"),
                     "--scores", str(out / "scores.tensors"), "--jobs", jobs]) == 0
        reports.append({p.relative_to(o): p.read_bytes() for p in o.rglob("*") if p.is_file()})
    assert reports[0] == reports[1]


def test_exit_codes(tmp_path, capsys):
    assert main(["pretrain-teacher", "--set", "teacher.head_dim=3", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["pretrain-teacher", "--set", "nonsense.key=1", "--out", str(tmp_path)]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["pretrain-teacher", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["score", "--teacher", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path)]) == EXIT_IO
    assert main(["audit-plan", str(tmp_path / "missing.json")]) == EXIT_IO
    capsys.readouterr()


def test_numeric_failure_exit_code(tiny_run, tmp_path, monkeypatch):
    import distillkit.cli as cli
    from distillkit.autodiff import NonFiniteError

    def boom(*a, **k):
        raise NonFiniteError("nan in loss")

    monkeypatch.setattr(cli, "run_scoring", boom)
    _, cfg, out = tiny_run
    assert main(["score", "--config", str(cfg), "--out", str(tmp_path), "--teacher", str(out / "teacher.ckpt")]) \
        == EXIT_NUMERIC


def test_missing_scores_is_config_error(tiny_run, tmp_path):
    _, cfg, out = tiny_run
    assert main(["extract", "--config", str(cfg), "--out", str(tmp_path), "--teacher",
                 str(out / "teacher.ckpt")]) == EXIT_CONFIG


def test_overrides():
    cfg = apply_override({"a": {"b": 1}}, "a.b=[1, 2]")
    assert cfg == {"a": {"b": [1, 2]}}
    assert apply_override({"a": "x"}, "a=plain")["a"] == "plain"
    with pytest.raises(ConfigError):
        apply_override({"a": 1}, "a.b=2")
    with pytest.raises(ConfigError):
        apply_override({"a": 1}, "noequals")
    exp = build_experiment(TINY, ["seed=7", "distill.lr=0.5"])
    assert exp.seed == 7 and exp.distill.lr == 0.5
    assert exp.student.num_heads == 2 and exp.student.vocab_size == 16
    assert build_experiment(TINY).hash != exp.hash
    with pytest.raises(ConfigError):
        build_experiment({**TINY, "corpus": {**TINY["corpus"], "vocab_size": 32}})


def test_desk_defaults_match_reference_setup():
    exp = build_experiment()
    t, s = exp.teacher, exp.student
    assert (t.num_layers, t.hidden_size, t.num_heads, t.head_dim, t.ffn_size, t.vocab_size) == (4, 64, 4, 16, 256, 64)
    assert (s.num_layers, s.hidden_size, s.head_dim, s.ffn_size) == (2, 32, 8, 128)
    assert exp.corpus.num_sequences == 50_000 and exp.corpus.seq_len == 32
    np.testing.assert_equal(exp.ablation["seeds"], [0, 1, 2])
