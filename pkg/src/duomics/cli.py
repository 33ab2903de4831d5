"""Command-line entry point for the whole pipeline.

Subcommands: synth, select-genes, pretrain, gradcheck, probe, attn, report.

Every option can come from three places, later ones winning: built-in
defaults, a --config file, then explicit flags. Config files are either
key=value lines or JSON; the resolved configuration is echoed to
resolved_config.json in the output directory, and that file can itself be
passed back through --config to reproduce the run ("subcommand" is checked
against the invoked one).

Exit codes: 0 success, 1 validation error (bad flags, bad config, missing
files, failed gradient gate), 2 unexpected runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np
import torch

from .data_model import Dataset, ValidationError, read_dataset, sample_bag, write_dataset
from .encoders import ModelConfig
from .evaluate import (
    embed_dataset,
    linear_probe,
    few_shot_probe,
    make_folds,
    survival_fit_eval,
    write_metrics,
)
from .objectives import build_pretrain_model, derive_seed, total_loss
from .rna_select import merge_panel, rfe_cv, write_panel, write_trace
from .synth import CohortConfig, generate_cohort, write_ground_truth
from .trainer import (
    TrainConfig,
    finite_diff_check,
    load_checkpoint,
    save_checkpoint,
    total_loss_check_fn,
    train,
)


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on bad usage; the contract wants 1."""

    def error(self, message):
        raise ValidationError(message)


# Option tables: name -> (type, default, help). None defaults mark options
# that are required unless the config file supplies them.

_COHORT_DEFAULTS = {f.name: f.default for f in dataclass_fields(CohortConfig)}
_SYNTH_TABLE = {
    name: (type(default), default, f"cohort {name}")
    for name, default in _COHORT_DEFAULTS.items()
}
_SYNTH_TABLE["out"] = (str, None, "output dataset directory")
_SYNTH_ALIASES = {"n_samples": "samples", "n_classes": "classes", "k_genes": "genes"}

_SELECT_TABLE = {
    "input": (str, None, "dataset directory"),
    "labels": (str, None, "optional CSV of sample_id,label overriding dataset subtypes"),
    "k": (int, None, "panel size to select"),
    "step": (int, 1, "genes eliminated per refit"),
    "folds": (int, 5, "cross-validation folds"),
    "curated": (str, None, "optional file with one curated gene id per line"),
    "reg": (float, 1e-3, "classifier regularization"),
    "seed": (int, 0, "fold split seed"),
    "out": (str, None, "output directory"),
}

_MODEL_DIM_TABLE = {
    "d_model": (int, 64, "slide token width"),
    "d_t": (int, 64, "rna token width"),
    "n_heads": (int, 4, "attention heads"),
    "depth": (int, 2, "encoder transformer blocks"),
    "mlp_ratio": (int, 2, "feed-forward expansion"),
    "n_fixed": (int, 64, "patches sampled per bag"),
    "g_t": (int, 16, "rna token groups"),
    "d_z": (int, 32, "style space width"),
    "n_clusters": (int, 8, "style cluster count"),
}

_TRAIN_TABLE = {
    "epochs": (int, 100, "training epochs"),
    "batch_size": (int, 16, "batch size"),
    "learning_rate": (float, 2e-5, "Adam learning rate"),
    "lambda_align": (float, 1.0, "alignment weight"),
    "lambda_retention": (float, 1.0, "retention weight"),
    "lambda_style": (float, 1.0, "style weight"),
    "tau": (float, 10.0, "contrastive inverse temperature"),
    "kappa": (float, 5.0, "cluster assignment sharpness"),
    "mask_ratio_slide": (float, 0.25, "slide token mask ratio"),
    "mask_ratio_rna": (float, 0.25, "rna token mask ratio"),
    "seed": (int, 0, "training seed"),
    "precision": (str, "f32", "f32 or f64"),
}

_PRETRAIN_TABLE = {
    "data": (str, None, "dataset directory"),
    "out": (str, None, "output directory"),
    **_MODEL_DIM_TABLE,
    **_TRAIN_TABLE,
}

_GRADCHECK_TABLE = {
    "tolerance": (float, 1e-4, "max relative error allowed"),
    "coords": (int, 20, "coordinates checked per tensor"),
    "batch_size": (int, 4, "synthetic batch size"),
    "d_p": (int, 64, "patch feature width"),
    "k_genes": (int, 256, "gene panel size"),
    "seed": (int, 0, "seed for the model and batch"),
    "out": (str, None, "optional directory for the report"),
    **_MODEL_DIM_TABLE,
}

_PROBE_TABLE = {
    "checkpoint": (str, None, "checkpoint file from pretrain"),
    "data": (str, None, "dataset directory"),
    "task": (str, "subtype", "subtype or survival"),
    "setting": (str, "all", "all or 10shot"),
    "folds": (int, 5, "cross-validation folds"),
    "shots": (int, 10, "examples per class in the 10shot setting"),
    "reg": (float, 1e-3, "probe regularization"),
    "seed": (int, 0, "fold and shot sampling seed"),
    "out": (str, None, "output directory"),
}

_ATTN_TABLE = {
    "checkpoint": (str, None, "checkpoint file from pretrain"),
    "data": (str, None, "dataset directory"),
    "slide_id": (str, None, "sample to explain"),
    "seed": (int, 0, "unused; accepted for interface uniformity"),
    "out": (str, None, "output directory"),
}

_REPORT_TABLE = {
    "metrics": (str, None, "metrics.csv (or .json) produced by probe"),
    "seed": (int, 0, "unused; accepted for interface uniformity"),
    "out": (str, None, "optional directory for summary.csv"),
}

_TABLES = {
    "synth": (_SYNTH_TABLE, _SYNTH_ALIASES),
    "select-genes": (_SELECT_TABLE, {}),
    "pretrain": (_PRETRAIN_TABLE, {}),
    "gradcheck": (_GRADCHECK_TABLE, {}),
    "probe": (_PROBE_TABLE, {}),
    "attn": (_ATTN_TABLE, {}),
    "report": (_REPORT_TABLE, {}),
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="duomics", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command")
    for command, (table, aliases) in _TABLES.items():
        sub = subs.add_parser(command, description=f"{command} options")
        sub.add_argument("--config", default=None, help="key=value or JSON config file")
        for name, (typ, _default, help_text) in table.items():
            flag = "--" + aliases.get(name, name).replace("_", "-")
            sub.add_argument(flag, dest=name, type=typ, default=argparse.SUPPRESS, help=help_text)
    return parser


def _parse_config_file(path: str) -> dict:
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        doc = json.loads(text)
        if not isinstance(doc, dict):
            raise ValidationError("JSON config must be an object")
        return doc
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno} is not key=value: {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _coerce(value, typ):
    if typ is float and isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, typ):
        return value
    try:
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"cannot interpret {value!r} as {typ.__name__}") from exc


def _merge(command: str, ns: argparse.Namespace) -> dict:
    table, _ = _TABLES[command]
    merged = {name: default for name, (_t, default, _h) in table.items()}
    if getattr(ns, "config", None):
        values = _parse_config_file(ns.config)
        recorded = values.pop("subcommand", command)
        if recorded != command:
            raise ValidationError(
                f"config file was written for subcommand {recorded!r}, not {command!r}"
            )
        for key, value in values.items():
            if key not in table:
                raise ValidationError(f"unknown config key {key!r} for {command}")
            merged[key] = _coerce(value, table[key][0])
    for name in table:
        if hasattr(ns, name):
            merged[name] = getattr(ns, name)
    return merged


def _require(merged: dict, *names: str) -> None:
    for name in names:
        if merged[name] is None:
            raise ValidationError(f"missing required option --{name.replace('_', '-')}")


def _write_resolved(out_dir: Path, command: str, merged: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump({"subcommand": command, **merged}, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- handlers


def _cmd_synth(ns) -> None:
    merged = _merge("synth", ns)
    _require(merged, "out")
    cfg = CohortConfig(**{name: merged[name] for name in _COHORT_DEFAULTS})
    ds, gt = generate_cohort(cfg)
    out = Path(merged["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out)
    write_ground_truth(gt, out / "ground_truth.json")
    _write_resolved(out, "synth", merged)
    print(f"wrote {len(ds.samples)} samples to {out}")


def _read_label_csv(path: str, ds: Dataset) -> np.ndarray:
    by_id = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0] == "sample_id":
                continue
            if len(row) != 2:
                raise ValidationError(f"label row must be sample_id,label: {row!r}")
            by_id[row[0]] = int(row[1])
    labels = []
    for sample in ds.samples:
        sid = sample.bag.slide_id
        if sid not in by_id:
            raise ValidationError(f"label file has no entry for sample {sid!r}")
        labels.append(by_id[sid])
    return np.asarray(labels, dtype=np.int64)


def _cmd_select_genes(ns) -> None:
    merged = _merge("select-genes", ns)
    _require(merged, "input", "k", "out")
    ds = read_dataset(merged["input"])
    X = np.stack([s.rna.values for s in ds.samples])
    gene_ids = list(ds.samples[0].rna.gene_ids)
    if merged["labels"]:
        y = _read_label_csv(merged["labels"], ds)
        n_classes = int(y.max()) + 1
    else:
        y = ds.subtypes()
        n_classes = ds.n_classes
    panel, trace = rfe_cv(
        X, y, merged["k"],
        step=merged["step"], folds=merged["folds"], seed=merged["seed"],
        gene_ids=gene_ids, n_classes=n_classes, reg=merged["reg"],
    )
    curated = []
    if merged["curated"]:
        curated = [ln.strip() for ln in Path(merged["curated"]).read_text().splitlines() if ln.strip()]
    panel = merge_panel(panel, curated, gene_ids)
    out = Path(merged["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_panel(panel, out / "panel.json")
    write_trace(trace, out / "trace.csv")
    with open(out / "cv_scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "panel_size", "accuracy"])
        for fold, (size, score) in enumerate(trace.cv_scores):
            writer.writerow([fold, size, repr(score)])
    _write_resolved(out, "select-genes", merged)
    print(f"selected {len(panel.genes)} genes; panel.json written to {out}")


def _split_configs(merged: dict, ds: Dataset) -> tuple[ModelConfig, TrainConfig]:
    model_cfg = ModelConfig(
        d_p=ds.d_p,
        k_genes=ds.k_genes,
        **{name: merged[name] for name in _MODEL_DIM_TABLE},
    )
    train_cfg = TrainConfig(**{name: merged[name] for name in _TRAIN_TABLE})
    return model_cfg, train_cfg


def _cmd_pretrain(ns) -> None:
    merged = _merge("pretrain", ns)
    _require(merged, "data", "out")
    ds = read_dataset(merged["data"])
    model_cfg, train_cfg = _split_configs(merged, ds)
    out = Path(merged["out"])
    result = train(ds, model_cfg, train_cfg, out_dir=out)
    save_checkpoint(
        out / "checkpoint.bin",
        result.model,
        result.optimizer,
        step=len(result.history),
        precision=train_cfg.precision,
    )
    _write_resolved(out, "pretrain", merged)
    last = result.history[-1]
    print(
        f"trained {train_cfg.epochs} epochs ({len(result.history)} steps); "
        f"final l_total {last['l_total']:.4f}"
    )


def _cmd_gradcheck(ns) -> None:
    merged = _merge("gradcheck", ns)
    cfg = ModelConfig(
        d_p=merged["d_p"],
        k_genes=merged["k_genes"],
        **{name: merged[name] for name in _MODEL_DIM_TABLE},
    )
    model = build_pretrain_model(cfg, derive_seed(merged["seed"], "init"), torch.float64)
    rng = np.random.default_rng(derive_seed(merged["seed"], "gradcheck-batch"))
    b = merged["batch_size"]
    bags = torch.tensor(rng.normal(size=(b, cfg.n_fixed, cfg.d_p)))
    expr = torch.tensor(rng.normal(size=(b, cfg.k_genes)))
    loss_fn = total_loss_check_fn(model, bags, expr, seed=merged["seed"])
    report = finite_diff_check(
        model, loss_fn, tolerance=merged["tolerance"], coords_per_tensor=merged["coords"],
        seed=merged["seed"],
    )
    for name in sorted(report.per_tensor):
        print(f"{report.per_tensor[name]:.3e}  {name}")
    print(f"worst relative error {report.worst:.3e} (tolerance {merged['tolerance']:g})")
    if merged["out"]:
        out = Path(merged["out"])
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "gradcheck_report.json", "w") as fh:
            json.dump(
                {"per_tensor": report.per_tensor, "tolerance": report.tolerance,
                 "passed": report.passed},
                fh, indent=2, sort_keys=True,
            )
            fh.write("\n")
        _write_resolved(out, "gradcheck", merged)
    if not report.passed:
        raise ValidationError(f"gradient check failed: worst {report.worst:.3e}")
    print("PASS")


def _load_model_for(ds: Dataset, checkpoint_path: str):
    loaded = load_checkpoint(checkpoint_path)
    if loaded.model_cfg.d_p != ds.d_p or loaded.model_cfg.k_genes != ds.k_genes:
        raise ValidationError(
            "checkpoint was trained for "
            f"d_p={loaded.model_cfg.d_p}, k_genes={loaded.model_cfg.k_genes}; dataset has "
            f"d_p={ds.d_p}, k_genes={ds.k_genes}"
        )
    return loaded


_SETTING_NAMES = {"all": "all-data", "10shot": "10-shot"}


def _cmd_probe(ns) -> None:
    merged = _merge("probe", ns)
    _require(merged, "checkpoint", "data", "out")
    if merged["task"] not in ("subtype", "survival"):
        raise ValidationError("--task must be subtype or survival")
    if merged["setting"] not in _SETTING_NAMES:
        raise ValidationError("--setting must be all or 10shot")
    if merged["task"] == "survival" and merged["setting"] != "all":
        raise ValidationError("survival probing supports only --setting all")

    ds = read_dataset(merged["data"])
    loaded = _load_model_for(ds, merged["checkpoint"])
    emb = embed_dataset(loaded.model, ds)
    plan = make_folds(ds, merged["folds"], merged["seed"])
    setting = _SETTING_NAMES[merged["setting"]]

    rows = []
    if merged["task"] == "subtype":
        if merged["setting"] == "all":
            result = linear_probe(emb, ds.subtypes(), plan, reg=merged["reg"])
        else:
            result = few_shot_probe(
                emb, ds.subtypes(), plan, merged["shots"], seed=merged["seed"],
                reg=merged["reg"],
            )
        for fold, (acc, f1) in enumerate(zip(result.accuracies, result.macro_f1s)):
            rows.append({"task": "subtype", "setting": setting, "fold": fold,
                         "metric": "accuracy", "value": acc})
            rows.append({"task": "subtype", "setting": setting, "fold": fold,
                         "metric": "macro_f1", "value": f1})
        summary = f"accuracy {result.mean_accuracy:.4f} +/- {result.std_accuracy:.4f}"
    else:
        result = survival_fit_eval(
            emb, ds.survival_times(), ds.survival_events(), plan, reg=merged["reg"]
        )
        for fold, ci in enumerate(result.cindices):
            rows.append({"task": "survival", "setting": setting, "fold": fold,
                         "metric": "c_index", "value": ci})
        summary = f"c_index {result.mean_cindex:.4f} +/- {result.std_cindex:.4f}"

    out = Path(merged["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(rows, out / "metrics.json", out / "metrics.csv")
    _write_resolved(out, "probe", merged)
    print(summary)


def _cmd_attn(ns) -> None:
    merged = _merge("attn", ns)
    _require(merged, "checkpoint", "data", "slide_id", "out")
    ds = read_dataset(merged["data"])
    loaded = _load_model_for(ds, merged["checkpoint"])
    matches = [s for s in ds.samples if s.bag.slide_id == merged["slide_id"]]
    if not matches:
        raise ValidationError(f"no sample with slide id {merged['slide_id']!r}")
    sample = matches[0]

    model = loaded.model
    dtype = next(model.parameters()).dtype
    bag_seed = derive_seed("embed-bag", sample.bag.slide_id)
    feats, coords = sample_bag(sample.bag, model.cfg.n_fixed, bag_seed)
    with torch.no_grad():
        out_enc = model.forward_encoders(
            torch.tensor(feats[None], dtype=dtype),
            torch.tensor(sample.rna.values[None], dtype=dtype),
        )
    weights = out_enc.slide_attention[0].mean(dim=0).numpy(force=True)

    out = Path(merged["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "attention.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patch_index", "grid_row", "grid_col", "weight"])
        for i, ((row, col), w) in enumerate(zip(coords, weights)):
            writer.writerow([i, int(row), int(col), repr(float(w))])
    _write_resolved(out, "attn", merged)
    print(f"wrote attention weights for {merged['slide_id']} ({len(weights)} patches)")


def _cmd_report(ns) -> None:
    merged = _merge("report", ns)
    _require(merged, "metrics")
    path = Path(merged["metrics"])
    if path.suffix == ".json":
        rows = json.loads(path.read_text())["rows"]
    else:
        with open(path, newline="") as fh:
            rows = [
                {"task": r["task"], "setting": r["setting"], "fold": int(r["fold"]),
                 "metric": r["metric"], "value": float(r["value"])}
                for r in csv.DictReader(fh)
            ]
    if not rows:
        raise ValidationError("metrics file has no rows")

    groups: dict[tuple, list[float]] = {}
    for row in rows:
        groups.setdefault((row["task"], row["setting"], row["metric"]), []).append(row["value"])

    lines = [("task", "setting", "metric", "mean", "std", "folds")]
    for (task, setting, metric), values in sorted(groups.items()):
        lines.append(
            (task, setting, metric,
             f"{np.mean(values):.4f}", f"{np.std(values):.4f}", str(len(values)))
        )
    widths = [max(len(r[c]) for r in lines) for c in range(6)]
    for row in lines:
        print("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())

    if merged["out"]:
        out = Path(merged["out"])
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "summary.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["task", "setting", "metric", "mean", "std", "folds"])
            for (task, setting, metric), values in sorted(groups.items()):
                writer.writerow(
                    [task, setting, metric, repr(float(np.mean(values))),
                     repr(float(np.std(values))), len(values)]
                )
        _write_resolved(out, "report", merged)


_HANDLERS = {
    "synth": _cmd_synth,
    "select-genes": _cmd_select_genes,
    "pretrain": _cmd_pretrain,
    "gradcheck": _cmd_gradcheck,
    "probe": _cmd_probe,
    "attn": _cmd_attn,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise ValidationError("a subcommand is required (see --help)")
        _HANDLERS[ns.command](ns)
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
