#!/usr/bin/env python3
"""Drive the full pipeline end to end on a small synthetic cohort.

Runs synth -> select-genes -> pretrain -> probe (subtype + survival) ->
attn -> report through the same entry point the console script uses, so
the demo doubles as a living example of the command-line interface.

With the defaults this takes a minute or two on one CPU core. Use
--fast for a much smaller cohort and model when you just want to see
the plumbing work.
"""

import argparse
import json
import sys
import time
from pathlib import Path

from duomics.cli import main as cli


def run(argv, label):
    print(f"\n=== {label}: duomics {' '.join(argv)}")
    t0 = time.perf_counter()
    code = cli(argv)
    if code != 0:
        sys.exit(f"step {label!r} failed with exit code {code}")
    print(f"=== {label} done in {time.perf_counter() - t0:.1f}s")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="demo_run", help="output directory")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--fast", action="store_true",
                    help="tiny cohort and model, seconds instead of minutes")
    args = ap.parse_args()

    root = Path(args.out)
    ds, run_dir = root / "dataset", root / "pretrain"

    if args.fast:
        synth = ["synth", "--samples", "48", "--d-p", "16", "--genes", "32",
                 "--n-informative-genes", "8", "--patches-min", "8",
                 "--patches-max", "16"]
        dims = ["--d-model", "16", "--d-t", "16", "--n-heads", "2",
                "--n-fixed", "8", "--g-t", "4", "--d-z", "4",
                "--n-clusters", "2"]
        train = ["--epochs", "10", "--learning-rate", "1e-3"]
        k_panel = "8"
    else:
        synth = ["synth", "--samples", "256"]
        dims = []
        train = ["--epochs", "30", "--learning-rate", "3e-4"]
        k_panel = "32"

    run(synth + ["--seed", str(args.seed), "--out", str(ds)], "synth")
    run(["select-genes", "--input", str(ds), "--k", k_panel, "--step", "8",
         "--folds", "3", "--seed", str(args.seed),
         "--out", str(root / "panel")], "select-genes")
    run(["pretrain", "--data", str(ds), "--out", str(run_dir),
         "--seed", str(args.seed), *dims, *train], "pretrain")

    ckpt = str(run_dir / "checkpoint.bin")
    run(["probe", "--checkpoint", ckpt, "--data", str(ds), "--task", "subtype",
         "--seed", str(args.seed), "--out", str(root / "probe_subtype")],
        "probe subtype")
    run(["probe", "--checkpoint", ckpt, "--data", str(ds), "--task", "survival",
        "--seed", str(args.seed), "--out", str(root / "probe_survival")],
        "probe survival")

    manifest = json.loads((ds / "manifest.json").read_text())
    first_id = manifest["sample_ids"][0]
    run(["attn", "--checkpoint", ckpt, "--data", str(ds),
         "--slide-id", first_id, "--out", str(root / "attn")], "attn")

    run(["report", "--metrics", str(root / "probe_subtype" / "metrics.csv"),
         "--out", str(root / "report")], "report")
    print(f"\nall artifacts under {root}/")


if __name__ == "__main__":
    main()
