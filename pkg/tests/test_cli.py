import json

import pytest

from gradibd import __version__
from gradibd.checkpoints import read_checkpoint
from gradibd.cohort import load_cohort
import start
import utils

TINY = ["--set", "d_node=4", "--set", "d_graph=4", "--set", "depth=1", "--set", "d_hidden=4",
        "--set", "folds=2", "--set", "max_epochs=2", "--set", "patience_lr=1", "--set", "patience_stop=2",
        "--set", "tau=30", "--set", "test_fraction=0.2", "--jobs", "1"]


@pytest.fixture
def cohort_path(tmp_path):
    assert start.dispatch(["gen-cohort", "--out", str(tmp_path / "data"), "--n-patients", "40",
                           "--case-fraction", "0.5", "--seed", "3"]) == 0
    return tmp_path / "data" / "cohort.jsonl"


def test_version(capsys):
    assert start.dispatch(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_unknown_subcommand(capsys):
    assert start.dispatch(["predict"]) == 1
    assert "ERROR UNKNOWN_COMMAND" in capsys.readouterr().err


def test_missing_required_flag(capsys):
    assert start.dispatch(["train", "--out", "x"]) == 1
    assert "ERROR MISSING_FLAG" in capsys.readouterr().err


def test_gen_cohort_writes_manifest(cohort_path):
    assert len(load_cohort(cohort_path)) == 40
    manifest = json.loads((cohort_path.parent / "manifest.json").read_text(encoding="utf-8"))
    [run] = manifest["runs"]
    assert run["subcommand"] == "gen-cohort"
    assert run["outputs"] == ["cohort.jsonl"]
    assert run["seed"] == 3 and run["tool_version"] == __version__


def test_gen_cohort_short_flags(tmp_path):
    assert start.dispatch(["gen-cohort", "--out", str(tmp_path), "--n", "100", "--case-frac", "0.2",
                           "--seed", "7"]) == 0
    records = load_cohort(tmp_path / "cohort.jsonl")
    assert len(records) == 100 and sum(r.label for r in records) == 20


def test_invalid_cohort_is_a_validation_error(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"patient_id": "a"}\n', encoding="utf-8")
    assert start.dispatch(["encode", "--cohort", str(bad), "--out", str(tmp_path / "enc")]) == 1
    assert "ERROR PARSE_ERROR: line 1" in capsys.readouterr().err


def test_encode_outputs(tmp_path, cohort_path):
    out = tmp_path / "enc"
    assert start.dispatch(["encode", "--cohort", str(cohort_path), "--out", str(out), "--set", "tau=30"]) == 0
    for name in ("vocab.txt", "graphs.jsonl", "graph_stats.csv", "manifest.json"):
        assert (out / name).exists(), name
    assert len(utils.read_csv(out / "graph_stats.csv")) == 40
    assert (out / "logs" / "gradibd.log").exists()
    assert not (out / "matrices").exists()


def test_encode_dumps_one_matrix_per_patient(tmp_path, cohort_path):
    dump = tmp_path / "matrices"
    assert start.dispatch(["encode", "--cohort", str(cohort_path), "--out", str(tmp_path / "enc"),
                           "--dump-matrix", str(dump), "--set", "tau=30"]) == 0
    ids = [r.patient_id for r in load_cohort(cohort_path)]
    assert sorted(p.name for p in dump.glob("*.csv")) == sorted(f"{i}.csv" for i in ids)
    rows = utils.read_csv(dump / f"{ids[0]}.csv")
    assert all(set(r) == {"code_id", "bucket_index", "frequency"} for r in rows)
    assert all(int(r["frequency"]) >= 1 for r in rows)


def test_encode_with_given_vocabulary(tmp_path, cohort_path):
    vocab_path = tmp_path / "vocab.txt"
    vocab_path.write_text("e11\nK50.9\n", encoding="utf-8")
    out = tmp_path / "enc"
    assert start.dispatch(["encode", "--cohort", str(cohort_path), "--out", str(out), "--vocab", str(vocab_path),
                           "--set", "tau=30"]) == 0
    assert (out / "vocab.txt").read_text(encoding="utf-8") == "E11\nK50\n"


def test_train_then_eval(tmp_path, cohort_path, capsys):
    ckpt = tmp_path / "ckpt"
    assert start.dispatch(["train", "--cohort", str(cohort_path), "--out", str(ckpt), *TINY]) == 0
    for fold in (0, 1):
        checkpoint = read_checkpoint(ckpt / f"fold_{fold:02d}" / "params.ckpt")
        assert checkpoint.meta["fold"] == fold and "E" in checkpoint.params
        assert checkpoint.adam.step > 0 and set(checkpoint.adam.m) == set(checkpoint.params)
        assert checkpoint.config_text == (ckpt / "config.txt").read_text(encoding="utf-8")
        assert checkpoint.meta["vocab"] == (ckpt / "vocab.txt").read_text(encoding="utf-8").split()
        assert (ckpt / f"fold_{fold:02d}" / "trace.csv").exists()
    assert len(load_cohort(ckpt / "test.jsonl")) == 8
    assert json.loads((ckpt / "cv_report.json").read_text(encoding="utf-8"))["aggregate"]["auroc"]

    report_path = tmp_path / "eval" / "report.json"
    assert start.dispatch(["eval", "--checkpoints", str(ckpt), "--test", str(ckpt / "test.jsonl"),
                           "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert len(report["folds"]) == 2 and report["n_test"] == 8
    assert (tmp_path / "eval" / "scores" / "fold_01.csv").exists()

    again = tmp_path / "eval" / "again.json"
    assert start.dispatch(["eval", "--checkpoints", str(ckpt), "--test", str(ckpt / "test.jsonl"),
                           "--out", str(again), "--from-scores"]) == 0
    assert json.loads(again.read_text(encoding="utf-8")) == report
    assert "auroc:" in capsys.readouterr().out


def test_eval_from_single_checkpoint_files(tmp_path, cohort_path):
    ckpt = tmp_path / "ckpt"
    assert start.dispatch(["train", "--cohort", str(cohort_path), "--out", str(ckpt), *TINY]) == 0
    test = str(ckpt / "test.jsonl")
    assert start.dispatch(["eval", "--checkpoints", str(ckpt), "--test", test,
                           "--out", str(tmp_path / "dir" / "report.json")]) == 0
    files = [str(ckpt / f"fold_{fold:02d}" / "params.ckpt") for fold in (0, 1)]
    assert start.dispatch(["eval", "--checkpoint", files[0], "--checkpoint", files[1], "--test", test,
                           "--out", str(tmp_path / "files" / "report.json")]) == 0
    by_dir = json.loads((tmp_path / "dir" / "report.json").read_text(encoding="utf-8"))
    by_files = json.loads((tmp_path / "files" / "report.json").read_text(encoding="utf-8"))
    assert by_files == by_dir

    assert start.dispatch(["eval", "--checkpoint", files[1], "--test", test,
                           "--out", str(tmp_path / "one" / "report.json")]) == 0
    one = json.loads((tmp_path / "one" / "report.json").read_text(encoding="utf-8"))
    assert len(one["folds"]) == 1
    assert one["aggregate"]["auroc"]["ci_lo"] == one["aggregate"]["auroc"]["ci_hi"]


def test_eval_takes_one_checkpoint_source(tmp_path, cohort_path, capsys):
    assert start.dispatch(["eval", "--checkpoints", str(tmp_path), "--checkpoint", str(tmp_path / "a.ckpt"),
                           "--test", str(cohort_path), "--out", str(tmp_path / "r.json")]) == 1
    assert start.dispatch(["eval", "--test", str(cohort_path), "--out", str(tmp_path / "r.json")]) == 1
    assert capsys.readouterr().err.count("ERROR MISSING_FLAG") == 2


def test_train_with_given_vocabulary(tmp_path, cohort_path):
    vocab_path = tmp_path / "vocab.txt"
    vocab_path.write_text("B01\nB02\n", encoding="utf-8")
    ckpt = tmp_path / "ckpt"
    assert start.dispatch(["train", "--cohort", str(cohort_path), "--out", str(ckpt), "--vocab", str(vocab_path),
                           *TINY]) == 0
    assert (ckpt / "vocab.txt").read_text(encoding="utf-8") == "B01\nB02\n"
    assert read_checkpoint(ckpt / "fold_00" / "params.ckpt").meta["n_codes"] == 3


def test_training_is_reproducible(tmp_path, cohort_path):
    for name in ("a", "b"):
        assert start.dispatch(["train", "--cohort", str(cohort_path), "--out", str(tmp_path / name), *TINY]) == 0
    for fold in (0, 1):
        path = f"fold_{fold:02d}/params.ckpt"
        assert (tmp_path / "a" / path).read_bytes() == (tmp_path / "b" / path).read_bytes()


def test_eval_without_checkpoints(tmp_path, cohort_path, capsys):
    assert start.dispatch(["eval", "--checkpoints", str(tmp_path / "none"), "--test", str(cohort_path),
                           "--out", str(tmp_path / "r.json")]) == 1
    assert "ERROR CHECKPOINT_FORMAT" in capsys.readouterr().err


def test_ablate_writes_table_and_chart(tmp_path, cohort_path):
    out = tmp_path / "abl" / "ablation.csv"
    assert start.dispatch(["ablate", "--cohort", str(cohort_path), "--out", str(out), *TINY]) == 0
    rows = utils.read_csv(out)
    assert [r["configuration"] for r in rows] == ["CS+CF+TD", "CS+CF", "CS+TD", "CF+TD", "TD", "Uniform"]
    assert (rows[0]["cs"], rows[0]["cf"], rows[0]["td"]) == ("1", "1", "1")
    assert out.with_suffix(".png").exists()


def test_sweep_writes_rows_reports_and_chart(tmp_path, cohort_path):
    out = tmp_path / "sweep"
    assert start.dispatch(["sweep", "--cohort", str(cohort_path), "--out", str(out), "--leads", "30,60",
                           *TINY]) == 0
    rows = utils.read_csv(out / "sweep.csv")
    assert list(rows[0]) == ["configuration", "lead_days", "metric", "mean", "ci_lo", "ci_hi"]
    assert [(r["configuration"], r["lead_days"], r["metric"]) for r in rows][:3] == [
        ("CS+CF+TD", "30", "auroc"), ("CS+CF+TD", "30", "ap"), ("CS+CF+TD", "30", "f1")]
    assert len(rows) == 12
    assert {r["configuration"] for r in rows} == {"CS+CF+TD", "Uniform"}
    assert (out / "reports" / "cs-cf-td" / "lead_060.json").exists()
    assert (out / "reports" / "uniform" / "lead_030.json").exists()
    assert (out / "sweep.png").exists()


def test_sweep_grid_selects_configurations(tmp_path, cohort_path):
    out = tmp_path / "sweep"
    assert start.dispatch(["sweep", "--cohort", str(cohort_path), "--out", str(out), "--leads", "30",
                           "--grid", "td", *TINY]) == 0
    assert {r["configuration"] for r in utils.read_csv(out / "sweep.csv")} == {"TD"}
    assert (out / "reports" / "td" / "lead_030.json").exists()


def test_sweep_rejects_unknown_configuration(tmp_path, cohort_path, capsys):
    assert start.dispatch(["sweep", "--cohort", str(cohort_path), "--out", str(tmp_path / "s"), "--leads", "30",
                           "--grid", "cs+xx"]) == 1
    assert "ERROR CONFIG_ERROR" in capsys.readouterr().err


def test_bad_leads(tmp_path, cohort_path, capsys):
    assert start.dispatch(["sweep", "--cohort", str(cohort_path), "--out", str(tmp_path / "s"),
                           "--leads", "30,soon"]) == 1
    assert "ERROR MISSING_FLAG" in capsys.readouterr().err


def test_flops_prints_counts_and_convention(tmp_path, cohort_path, capsys):
    assert start.dispatch(["flops", "--cohort", str(cohort_path), "--out", str(tmp_path / "fl")]) == 0
    out = capsys.readouterr().out
    assert "params:" in out and "FLOPs:" in out
    assert "23.495" in out and "0.172" in out
    assert "convention:" in out
    assert utils.read_csv(tmp_path / "fl" / "flops.csv")[-1]["term"] == "params"


def test_selftest_quick(capsys):
    assert start.dispatch(["selftest", "--quick"]) == 0
    assert "6/6 checks passed" in capsys.readouterr().out


def test_bad_config_value(tmp_path, cohort_path, capsys):
    assert start.dispatch(["train", "--cohort", str(cohort_path), "--out", str(tmp_path / "t"),
                           "--set", "folds=1"]) == 1
    assert "ERROR CONFIG_ERROR" in capsys.readouterr().err
