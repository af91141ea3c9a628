#!/usr/bin/env python3
"""End-to-end pipeline driver: synth -> train -> infer (all test scenes) ->
eval -> climo, via the CLI, into one output directory.

Usage: python scripts/run_pipeline.py --config configs/smoke.json --out runs/smoke
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from itlm.cli import main as itlm_main  # noqa: E402


def run(args):
    rc = itlm_main(args)
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--with-rf", action="store_true")
    opts = ap.parse_args()
    out = Path(opts.out)
    common = ["--config", opts.config, "--threads", str(opts.threads)]

    run(["synth", *common, "--out", str(out)])
    train_args = ["train", *common, "--out", str(out), "--stage", "suite"]
    if opts.with_rf:
        train_args.append("--with-rf")
    run(train_args)

    doc = json.loads(Path(opts.config).read_text())
    n_test = doc.get("scenegen", {}).get("n_test_scenes", 2)
    for i in range(n_test):
        scene = out / "scenes" / "test" / f"scene_{i:03d}"
        pred = out / "pred" / f"scene_{i:03d}"
        infer_args = ["infer", *common, "--out", str(pred),
                      "--weights", str(out / "weights"), "--scene", str(scene)]
        if opts.with_rf:
            infer_args.append("--with-rf")
        run(infer_args)
        run(["eval", *common, "--out", str(pred / "eval_truth"),
             "--pred", str(pred / "itlm"), "--scene", str(scene), "--reference", "truth"])
        run(["eval", *common, "--out", str(pred / "eval_track"),
             "--pred", str(pred / "itlm"), "--scene", str(scene), "--reference", "track"])

    run(["climo", *common, "--out", str(out / "climo"),
         "--pred-root", str(out / "pred"), "--dem", str(out / "scenes" / "dem.rgrd")])
    print(f"pipeline complete; outputs under {out}")


if __name__ == "__main__":
    main()
