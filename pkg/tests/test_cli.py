"""End-to-end tests of the command-line interface.

Everything goes through cli.main(argv) so exit codes and stderr behaviour
are exercised exactly as a shell user would see them.
"""

import csv
import hashlib
import json
from pathlib import Path

import pytest

from duomics.cli import main

TINY_SYNTH = [
    "synth",
    "--samples", "24", "--classes", "2", "--d-p", "8", "--genes", "16",
    "--n-informative-genes", "4", "--d-rs", "2", "--d-ru", "2",
    "--d-is", "2", "--d-iu", "2", "--patches-min", "4", "--patches-max", "8",
    "--seed", "7",
]

TINY_DIMS = [
    "--d-model", "16", "--d-t", "16", "--n-heads", "2", "--n-fixed", "6",
    "--g-t", "4", "--d-z", "4", "--n-clusters", "2",
]


def _dir_digest(path: Path, skip=("resolved_config.json",)) -> dict:
    digests = {}
    for child in sorted(path.iterdir()):
        if child.name in skip:
            continue
        digests[child.name] = hashlib.sha256(child.read_bytes()).hexdigest()
    return digests


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny dataset plus a short pretraining run shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    assert main(TINY_SYNTH + ["--out", str(ds)]) == 0
    run = root / "run"
    argv = [
        "pretrain", "--data", str(ds), "--out", str(run),
        "--epochs", "2", "--batch-size", "8", "--learning-rate", "1e-3",
        "--seed", "1", *TINY_DIMS,
    ]
    assert main(argv) == 0
    return root


def test_synth_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(TINY_SYNTH + ["--out", str(a)]) == 0
    assert main(TINY_SYNTH + ["--out", str(b)]) == 0
    assert _dir_digest(a) == _dir_digest(b)


def test_synth_seed_changes_output(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(TINY_SYNTH + ["--out", str(a)]) == 0
    argv = list(TINY_SYNTH)
    argv[argv.index("--seed") + 1] = "8"
    assert main(argv + ["--out", str(b)]) == 0
    assert _dir_digest(a) != _dir_digest(b)


def test_resolved_config_rebuilds_the_same_dataset(workspace, tmp_path):
    redo = tmp_path / "redo"
    config = workspace / "ds" / "resolved_config.json"
    assert main(["synth", "--config", str(config), "--out", str(redo)]) == 0
    assert _dir_digest(redo) == _dir_digest(workspace / "ds")


def test_pretrain_writes_checkpoint_and_log(workspace):
    run = workspace / "run"
    assert (run / "checkpoint.bin").exists()
    with open(run / "train_log.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6  # 24 samples, batch 8, 2 epochs
    assert {r["epoch"] for r in rows} == {"0", "1"}
    resolved = json.loads((run / "resolved_config.json").read_text())
    assert resolved["subcommand"] == "pretrain"
    assert resolved["epochs"] == 2


def test_probe_subtype_writes_per_fold_metrics(workspace, tmp_path):
    out = tmp_path / "probe"
    argv = [
        "probe", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
        "--data", str(workspace / "ds"), "--task", "subtype",
        "--folds", "3", "--out", str(out),
    ]
    assert main(argv) == 0
    doc = json.loads((out / "metrics.json").read_text())
    accuracy_rows = [r for r in doc["rows"] if r["metric"] == "accuracy"]
    assert [r["fold"] for r in accuracy_rows] == [0, 1, 2]
    assert all(r["setting"] == "all-data" for r in doc["rows"])
    assert all(0.0 <= r["value"] <= 1.0 for r in accuracy_rows)


def test_probe_survival_reports_c_index(workspace, tmp_path):
    out = tmp_path / "surv"
    argv = [
        "probe", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
        "--data", str(workspace / "ds"), "--task", "survival",
        "--folds", "3", "--out", str(out),
    ]
    assert main(argv) == 0
    doc = json.loads((out / "metrics.json").read_text())
    assert {r["metric"] for r in doc["rows"]} == {"c_index"}
    assert len(doc["rows"]) == 3


def test_probe_ten_shot_setting(workspace, tmp_path):
    out = tmp_path / "fs"
    argv = [
        "probe", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
        "--data", str(workspace / "ds"), "--task", "subtype",
        "--setting", "10shot", "--shots", "3", "--folds", "3",
        "--out", str(out),
    ]
    assert main(argv) == 0
    doc = json.loads((out / "metrics.json").read_text())
    assert all(r["setting"] == "10-shot" for r in doc["rows"])


def test_probe_is_reproducible_from_resolved_config(workspace, tmp_path):
    first, second = tmp_path / "p1", tmp_path / "p2"
    argv = [
        "probe", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
        "--data", str(workspace / "ds"), "--task", "subtype",
        "--folds", "3", "--out", str(first),
    ]
    assert main(argv) == 0
    config = first / "resolved_config.json"
    assert main(["probe", "--config", str(config), "--out", str(second)]) == 0
    assert (first / "metrics.json").read_bytes() == (second / "metrics.json").read_bytes()


def test_attn_writes_one_row_per_patch(workspace, tmp_path):
    out = tmp_path / "attn"
    argv = [
        "attn", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
        "--data", str(workspace / "ds"), "--slide-id", "S0003",
        "--out", str(out),
    ]
    assert main(argv) == 0
    with open(out / "attention.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6  # n_fixed of the checkpointed model
    weights = [float(r["weight"]) for r in rows]
    assert all(w >= 0.0 for w in weights)
    assert sum(weights) == pytest.approx(1.0, abs=1e-5)


def test_attn_unknown_slide_is_a_validation_error(workspace, tmp_path, capsys):
    argv = [
        "attn", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
        "--data", str(workspace / "ds"), "--slide-id", "NOPE",
        "--out", str(tmp_path / "x"),
    ]
    assert main(argv) == 1
    assert "NOPE" in capsys.readouterr().err


def test_select_genes_writes_panel_and_trace(workspace, tmp_path):
    out = tmp_path / "genes"
    argv = [
        "select-genes", "--input", str(workspace / "ds"), "--k", "4",
        "--step", "2", "--folds", "3", "--out", str(out),
    ]
    assert main(argv) == 0
    panel = json.loads((out / "panel.json").read_text())
    assert len(panel["genes"]) == 4
    with open(out / "cv_scores.csv", newline="") as fh:
        scores = list(csv.DictReader(fh))
    assert len(scores) == 3
    assert all(s["panel_size"] == "4" for s in scores)
    assert (out / "trace.csv").exists()


def test_gradcheck_passes_on_small_model(capsys):
    argv = [
        "gradcheck", "--d-p", "6", "--k-genes", "8", "--coords", "2",
        "--batch-size", "3", "--n-fixed", "5", *TINY_DIMS[:4],
        "--g-t", "4", "--d-z", "4", "--n-clusters", "2",
    ]
    assert main(argv) == 0
    assert "PASS" in capsys.readouterr().out


def test_report_aggregates_metrics(workspace, tmp_path, capsys):
    out = tmp_path / "probe"
    main([
        "probe", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
        "--data", str(workspace / "ds"), "--task", "subtype",
        "--folds", "3", "--out", str(out),
    ])
    capsys.readouterr()
    summary_dir = tmp_path / "summary"
    assert main(["report", "--metrics", str(out / "metrics.csv"),
                 "--out", str(summary_dir)]) == 0
    printed = capsys.readouterr().out
    assert "accuracy" in printed and "macro_f1" in printed
    with open(summary_dir / "summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["metric"] for r in rows} == {"accuracy", "macro_f1"}
    assert all(r["folds"] == "3" for r in rows)
    # json input gives the same aggregation
    assert main(["report", "--metrics", str(out / "metrics.json")]) == 0


def test_unknown_flag_exits_one(capsys):
    assert main(["synth", "--bogus", "3", "--out", "x"]) == 1
    assert "error:" in capsys.readouterr().err


def test_missing_required_option_exits_one(capsys):
    assert main(["synth"]) == 1
    assert "--out" in capsys.readouterr().err


def test_missing_file_exits_one(workspace, tmp_path, capsys):
    argv = ["probe", "--checkpoint", str(tmp_path / "nope.bin"),
            "--data", str(workspace / "ds"), "--out", str(tmp_path / "o")]
    assert main(argv) == 1
    assert "missing file" in capsys.readouterr().err


def test_missing_dataset_exits_one(tmp_path, capsys):
    argv = ["probe", "--checkpoint", str(tmp_path / "nope.bin"),
            "--data", str(tmp_path / "also_nope"), "--out", str(tmp_path / "o")]
    assert main(argv) == 1
    assert "manifest" in capsys.readouterr().err


def test_unknown_config_key_exits_one(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("n_samples=12\nbogus_key=1\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "bogus_key" in capsys.readouterr().err


def test_config_for_wrong_subcommand_exits_one(workspace, tmp_path, capsys):
    config = workspace / "ds" / "resolved_config.json"
    argv = ["pretrain", "--config", str(config), "--data", str(workspace / "ds"),
            "--out", str(tmp_path / "o")]
    assert main(argv) == 1
    assert "synth" in capsys.readouterr().err


def test_flags_override_config_values(tmp_path):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text("n_samples=24\nn_classes=2\nd_p=8\nk_genes=16\n"
                   "n_informative_genes=4\nd_rs=2\nd_ru=2\nd_is=2\nd_iu=2\n"
                   "patches_min=4\npatches_max=8\nseed=7\n")
    out = tmp_path / "out"
    assert main(["synth", "--config", str(cfg), "--samples", "10",
                 "--out", str(out)]) == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["n_samples"] == 10  # flag beat the config file
    assert resolved["seed"] == 7  # config beat the default


def test_survival_with_few_shot_setting_is_rejected(workspace, tmp_path, capsys):
    argv = [
        "probe", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
        "--data", str(workspace / "ds"), "--task", "survival",
        "--setting", "10shot", "--out", str(tmp_path / "o"),
    ]
    assert main(argv) == 1
    assert "survival" in capsys.readouterr().err


def test_no_subcommand_exits_one(capsys):
    assert main([]) == 1
    assert "subcommand" in capsys.readouterr().err
