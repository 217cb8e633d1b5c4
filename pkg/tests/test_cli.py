import json

import pytest

from smilesprop.cli import main

from .conftest import ESOL


@pytest.fixture(scope="module")
def small_csv(tmp_path_factory):
    rows = ESOL.read_text().splitlines()
    path = tmp_path_factory.mktemp("data") / "small.csv"
    path.write_text("\n".join(rows[:61]) + "\n")
    return path


TINY = ["--arch", "gru", "--em", "4", "--rnn1", "4", "--rnn2", "4", "--off-grid", "--epochs", "2", "--patience", "1"]


@pytest.fixture(scope="module")
def trained(small_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    rc = main(["train", "--dataset", str(small_csv), *TINY, "--folds", "0", "--precision", "64", "--out-dir", str(out)])
    assert rc == 0
    return out


def test_encode_esol(tmp_path, capsys):
    assert main(["encode", "--dataset", str(ESOL), "--out-dir", str(tmp_path / "a")]) == 0
    stats = json.loads((tmp_path / "a" / "encoding_stats.json").read_text())
    assert stats["accepted"] == 1128 and stats["dropped"] == 0 and stats["window"] == 270
    assert "accepted 1128" in capsys.readouterr().out
    assert main(["encode", "--dataset", str(ESOL), "--out-dir", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "vocab.txt").read_bytes() == (tmp_path / "b" / "vocab.txt").read_bytes()
    assert json.loads((tmp_path / "a" / "resolved_config.json").read_text())["command"] == "encode"


def test_encode_counts_invalid(tmp_path):
    csv = tmp_path / "d.csv"
    csv.write_text("smiles,y\nCCO,1\nC1CC,2\nc1ccccc1,3\n")
    assert main(["encode", "--dataset", str(csv), "--out-dir", str(tmp_path / "o")]) == 0
    stats = json.loads((tmp_path / "o" / "encoding_stats.json").read_text())
    assert (stats["accepted"], stats["dropped"]) == (2, 1)


def test_out_dir_from_environment(tmp_path, monkeypatch, small_csv):
    monkeypatch.setenv("SMILESPROP_OUT", str(tmp_path))
    assert main(["encode", "--dataset", str(small_csv)]) == 0
    assert (tmp_path / "encode" / "vocab.txt").exists()


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--dataset", "x.csv", "--arch", "gru", "--em", "10", "--rnn1", "8"],
        ["train", "--dataset", "x.csv", "--arch", "gru", "--em", "15", "--rnn1", "8", "--rnn2", "8"],
        ["encode"],
        ["eval", "--dataset", "x.csv"],
        ["explain", "--dataset", "x.csv"],
        ["encode", "--dataset", "x.csv", "--precision", "32", "--seed", "-1"],
    ],
)
def test_usage_errors_exit_2(argv, tmp_path):
    assert main([*argv, "--out-dir", str(tmp_path)]) == 2


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--arch", "transformer"])
    assert exc.value.code == 2


def test_unknown_config_key(tmp_path, small_csv):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dataset": {"path": str(small_csv)}, "learning_rate": 1}))
    assert main(["encode", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 2


def test_runtime_failure_exit_1(tmp_path, capsys):
    assert main(["encode", "--dataset", str(tmp_path / "missing.csv"), "--out-dir", str(tmp_path)]) == 1


def test_train_outputs_and_determinism(trained, small_csv, tmp_path):
    report = json.loads((trained / "cv_report.json").read_text())
    assert len(report["folds"]) == 1 and report["metric"] == "rmse"
    assert (trained / "fold0.model").exists() and (trained / "fold0_history.csv").exists()
    again = tmp_path / "again"
    rc = main(["train", "--config", str(trained / "resolved_config.json"), "--out-dir", str(again)])
    assert rc == 0
    strip = lambda r: {**r, "folds": [{k: v for k, v in f.items() if k != "checkpoint"} for f in r["folds"]]}
    assert strip(json.loads((again / "cv_report.json").read_text())) == strip(report)
    assert (again / "fold0_history.csv").read_bytes() == (trained / "fold0_history.csv").read_bytes()


def test_eval(trained, small_csv, tmp_path):
    rc = main(["eval", "--dataset", str(small_csv), "--model", str(trained / "fold0.model"), "--out-dir", str(tmp_path)])
    assert rc == 0
    result = json.loads((tmp_path / "eval.json").read_text())
    assert result["n"] == 60 and result["value"] >= 0
    assert len((tmp_path / "predictions.csv").read_text().splitlines()) == 61


def test_eval_missing_model(small_csv, tmp_path, capsys):
    missing = tmp_path / "nope.model"
    assert main(["eval", "--dataset", str(small_csv), "--model", str(missing), "--out-dir", str(tmp_path)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_explain_identity_check(trained, small_csv, tmp_path):
    rc = main([
        "explain", "--dataset", str(small_csv), "--base", str(trained / "fold0.model"), "--identity-mask-check",
        "--out-dir", str(tmp_path),
    ])
    assert rc == 0
    assert json.loads((tmp_path / "identity_mask_check.json").read_text())["max_abs_difference"] <= 1e-6


def test_explain_missing_base(small_csv, tmp_path, capsys):
    missing = tmp_path / "base.model"
    assert main(["explain", "--dataset", str(small_csv), "--base", str(missing), "--out-dir", str(tmp_path)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_explain_writes_report(trained, small_csv, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"explainer": {"n_layers": 2, "batch_size": 16}}))
    rc = main([
        "explain", "--config", str(cfg), "--dataset", str(small_csv), "--base", str(trained / "fold0.model"),
        "--explainer-epochs", "2", "--width", "4", "--out-dir", str(tmp_path / "x"),
    ])
    assert rc == 0
    summary = json.loads((tmp_path / "x" / "interpretability.json").read_text())
    assert {"accuracy", "molecule_accuracy", "reference_accuracy"} <= set(summary)
    lines = (tmp_path / "x" / "attributions.jsonl").read_text().splitlines()
    assert len(lines) == summary["n_soluble"] + summary["n_insoluble"]
    rec = json.loads(lines[0])
    assert len(rec["raw_mask"]) == 270 and len(rec["top"]) == 3
    rc = main([
        "explain", "--dataset", str(small_csv), "--base", str(trained / "fold0.model"),
        "--explainer", str(tmp_path / "x" / "explainer.ckpt"), "--out-dir", str(tmp_path / "y"),
    ])
    assert rc == 0
    assert (tmp_path / "y" / "attributions.jsonl").read_text() == (tmp_path / "x" / "attributions.jsonl").read_text()


def test_hpo_budget_six_and_resume(small_csv, tmp_path):
    args = ["hpo", "--dataset", str(small_csv), "--arch", "gru", "--epochs", "2", "--patience", "1", "--out-dir", str(tmp_path)]
    assert main([*args, "--trials", "4"]) == 0
    assert main([*args, "--trials", "6"]) == 0
    ledger = [json.loads(l) for l in (tmp_path / "trials.jsonl").read_text().splitlines()]
    assert [t["index"] for t in ledger] == list(range(6))
    assert [t["source"] for t in ledger] == ["seed"] * 6
    assert [t["params"]["rnn1_units"] for t in ledger] == [8, 16, 32, 64, 128, 256]
    completed = [t for t in ledger if t["status"] == "ok"]
    assert len((tmp_path / "scatter.csv").read_text().splitlines()) == len(completed) + 1
    report = json.loads((tmp_path / "search_report.json").read_text())
    assert report["cardinality"] == 6 * 48 * 48
