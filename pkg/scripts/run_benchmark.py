#!/usr/bin/env python3
"""Transfer-learning benchmark: pre-train-only vs fine-tuned suite vs the
pixel random-forest baseline, evaluated against target-domain truth.

Prints CTH/CER/COT RMSE for each model, the relative improvement from
fine-tuning, the thick-cloud (true COT > 23) comparison against the forest,
and per-scene inference timings.

Usage: python scripts/run_benchmark.py --config configs/benchmark.json
"""

import argparse
import copy
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import torch  # noqa: E402

from itlm import forest, training  # noqa: E402
from itlm.cli import _finetune_suite_config, _make_datasets, _pixel_table, _suite_config  # noqa: E402
from itlm.config import forest_hyper, load_config  # noqa: E402


def suite_rmse(suite, test_scenes, stride, thick_cot=23.0):
    err = {"cth": [], "cer": [], "cot": []}
    thick_err = []
    times = []
    for sc in test_scenes:
        pred, dt = training.predict_scene(suite, sc.stack, stride=stride)
        times.append(dt)
        for var in err:
            p, t = getattr(pred, var), getattr(sc.truth, var)
            m = p.valid & t.valid
            err[var].append(p.values[m] - t.values[m])
        thick = pred.cot.valid & sc.truth.cot.valid & (sc.truth.cot.values > thick_cot)
        thick_err.append(pred.cot.values[thick] - sc.truth.cot.values[thick])
    out = {v: float(np.sqrt(np.mean(np.concatenate(err[v]) ** 2))) for v in err}
    out["cot_thick"] = float(np.sqrt(np.mean(np.concatenate(thick_err) ** 2)))
    out["infer_s"] = float(np.mean(times))
    return out


def forest_rmse(fsuite, test_scenes, thick_cot=23.0):
    err = {"cth": [], "cer": [], "cot": []}
    thick_err = []
    times = []
    for sc in test_scenes:
        pred, dt = forest.predict_scene_rf(fsuite, sc.stack)
        times.append(dt)
        for var in err:
            p, t = getattr(pred, var), getattr(sc.truth, var)
            m = p.valid & t.valid
            err[var].append(p.values[m] - t.values[m])
        thick = pred.cot.valid & sc.truth.cot.valid & (sc.truth.cot.values > thick_cot)
        thick_err.append(pred.cot.values[thick] - sc.truth.cot.values[thick])
    out = {v: float(np.sqrt(np.mean(np.concatenate(err[v]) ** 2))) for v in err}
    out["cot_thick"] = float(np.sqrt(np.mean(np.concatenate(thick_err) ** 2)))
    out["infer_s"] = float(np.mean(times))
    return out


def train_forests(cfg, scenes):
    hyper = forest_hyper(cfg)
    fs, ls_src = _pixel_table(scenes, "source", log_cot=True)
    ft, ls_tgt = _pixel_table(scenes, "target", log_cot=True)
    suite = {}
    for offset, var in enumerate(("clp", "cth", "cer", "cot")):
        x = np.concatenate([fs[var], ft[var]])
        y = np.concatenate([ls_src[var], ls_tgt[var]])
        n = min(cfg.rf.sample_n, len(y))
        data = forest.sample_pixels(x, y, n, seed=cfg.rf.seed + 31 * (offset + 1))
        suite[var] = forest.fit_forest(data, hyper, "classification" if var == "clp" else "regression")
    return forest.ForestSuite(**suite)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/benchmark.json")
    ap.add_argument("--threads", type=int, default=0, help="0 = leave torch default")
    opts = ap.parse_args()
    if opts.threads:
        torch.set_num_threads(opts.threads)

    cfg = load_config(opts.config)
    t0 = time.perf_counter()
    train_scenes, test_scenes = _make_datasets(cfg)
    print(f"generated {len(train_scenes)} train / {len(test_scenes)} test scenes "
          f"({cfg.grid.nrows}x{cfg.grid.ncols}) in {time.perf_counter() - t0:.1f} s")

    scfg = _suite_config(cfg)
    t0 = time.perf_counter()
    suite, _ = training.train_suite(train_scenes, scfg, stage="pretrain")
    print(f"pre-training done in {time.perf_counter() - t0:.1f} s")
    suite_pre = copy.deepcopy(suite)

    t0 = time.perf_counter()
    training.finetune_suite(suite, train_scenes, _finetune_suite_config(cfg, scfg))
    print(f"fine-tuning done in {time.perf_counter() - t0:.1f} s")

    t0 = time.perf_counter()
    fsuite = train_forests(cfg, train_scenes)
    print(f"forest training done in {time.perf_counter() - t0:.1f} s")

    r_pre = suite_rmse(suite_pre, test_scenes, scfg.infer_stride)
    r_ft = suite_rmse(suite, test_scenes, scfg.infer_stride)
    r_rf = forest_rmse(fsuite, test_scenes)

    print(f"\n{'':14s}{'pretrain-only':>14s}{'fine-tuned':>12s}{'forest':>10s}")
    for var in ("cth", "cer", "cot", "cot_thick"):
        print(f"RMSE {var:9s}{r_pre[var]:14.4f}{r_ft[var]:12.4f}{r_rf[var]:10.4f}")
    print(f"\nfine-tuning CTH RMSE reduction: {100 * (1 - r_ft['cth'] / r_pre['cth']):.1f}%")
    print(f"fine-tuning COT RMSE reduction: {100 * (1 - r_ft['cot'] / r_pre['cot']):.1f}%")
    print(f"thick-cloud COT advantage over forest: {100 * (1 - r_ft['cot_thick'] / r_rf['cot_thick']):.1f}%")
    print(f"mean inference time per scene: network {r_ft['infer_s']:.2f} s, forest {r_rf['infer_s']:.2f} s")


if __name__ == "__main__":
    main()
