"""Command-line entry point: synth | train | infer | eval | climo.

Exit codes: 0 success, 2 config error, 3 missing input, 4 numeric failure.
ITLM_LOG={error,info,debug} controls verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import climatology, forest, geometry, metrics, model as nnm, scenegen, training
from .config import ConfigError, RunConfig, config_to_dict, load_config, train_configs, forest_hyper
from .grids import GridError, Raster, make_grid, read_rgrd, write_rgrd
from .scenegen import DatasetParams, SourceBias, TruthParams
from .training import ModelSuite, SuiteConfig

log = logging.getLogger("itlm")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_NUMERIC = 4

DEM_SEED_OFFSET = 424242


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("ITLM_LOG", "info").lower(), logging.INFO
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _grid(cfg: RunConfig):
    g = cfg.grid
    return make_grid(g.lat_north, g.lon_west, g.dlat, g.dlon, g.nrows, g.ncols)


def _dataset_params(cfg: RunConfig) -> DatasetParams:
    s = cfg.scenegen
    return DatasetParams(
        subsat_lon=s.subsat_lon,
        truth=TruthParams(cloud_fraction_target=s.cloud_fraction_target),
        bias=SourceBias(
            dcth_high_km=s.bias_dcth_high_km,
            dcth_low_km=s.bias_dcth_low_km,
            fcer=s.bias_fcer,
            fcot=s.bias_fcot,
            glint_cutoff_deg=s.glint_cutoff_deg,
        ),
        swath_width_px=s.swath_width_px,
        noise_sigma_k=s.noise_sigma_k,
        k_coeffs=tuple(s.k_coeffs),
        a_coeffs=tuple(s.a_coeffs),
    )


def _make_datasets(cfg: RunConfig):
    """(train, test) scene lists, regenerated deterministically from config."""
    grid = _grid(cfg)
    params = _dataset_params(cfg)
    s = cfg.scenegen
    train = scenegen.gen_dataset(s.seed, s.n_scenes, grid, params=params)
    test = scenegen.gen_dataset(s.test_seed, s.n_test_scenes, grid, params=params)
    return train, test


def _suite_config(cfg: RunConfig) -> SuiteConfig:
    tcs = train_configs(cfg)
    return SuiteConfig(
        clp=tcs["clp"],
        cth=tcs["cth"],
        cer=tcs["cer"],
        cot=tcs["cot"],
        infer_stride=cfg.tiles.infer_stride,
        blend=cfg.tiles.blend,
    )


def _dem(cfg: RunConfig) -> Raster:
    """Deterministic synthetic terrain in meters for the region mask."""
    grid = _grid(cfg)
    f = scenegen.gaussian_field(cfg.scenegen.seed + DEM_SEED_OFFSET, grid, 3.5)
    vals = (f.values - f.values.min()) / max(np.ptp(f.values), 1e-9) * 6000.0
    return Raster(grid, vals, np.ones(grid.shape, dtype=bool))


# --- subcommands -------------------------------------------------------------


def cmd_synth(cfg: RunConfig, out: Path, force: bool) -> int:
    scenes_dir = out / "scenes"
    manifest_path = scenes_dir / "manifest.json"
    doc = {"config": config_to_dict(cfg)}
    if manifest_path.exists():
        existing = json.loads(manifest_path.read_text())
        if existing != doc and not force:
            log.error("existing scene manifest at %s conflicts with config (use --force)", manifest_path)
            return EXIT_CONFIG
    train, test = _make_datasets(cfg)
    for split, scenes in (("train", train), ("test", test)):
        for sc in scenes:
            scenegen.save_scene(sc, scenes_dir / split / f"scene_{sc.index:03d}")
    write_rgrd(_dem(cfg), scenes_dir / "dem.rgrd")
    scenes_dir.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    log.info("wrote %d train + %d test scenes to %s", len(train), len(test), scenes_dir)
    return EXIT_OK


def _weight_paths(d: Path) -> dict:
    return {var: d / f"{var}.itlm" for var in ("clp", "cth", "cer", "cot")}


def _save_suite(suite: ModelSuite, d: Path) -> None:
    d.mkdir(parents=True, exist_ok=True)
    for var, path in _weight_paths(d).items():
        nnm.save_weights(getattr(suite, var), path)


def _load_suite(d: Path) -> ModelSuite:
    paths = _weight_paths(d)
    for var, p in paths.items():
        if not p.exists():
            raise FileNotFoundError(f"missing weights file {p}")
    return ModelSuite(**{var: nnm.load_weights(p) for var, p in paths.items()})


def _write_curves(curves: dict, path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["phase", "epoch", "loss"])
        for phase in sorted(curves):
            for epoch, loss in enumerate(curves[phase]):
                w.writerow([phase, epoch, f"{loss:.8f}"])


def _finetune_suite_config(cfg: RunConfig, scfg: SuiteConfig) -> SuiteConfig:
    import dataclasses

    t = cfg.train
    per_var = {}
    for var in ("clp", "cth", "cer", "cot"):
        overrides = {}
        epochs = t.finetune_epochs_per_var.get(var, t.finetune_epochs)
        if epochs > 0:
            overrides["epochs"] = int(epochs)
        if t.finetune_lr > 0:
            overrides["lr"] = t.finetune_lr
        if t.finetune_stride > 0:
            overrides["train_stride"] = t.finetune_stride
        per_var[var] = dataclasses.replace(getattr(scfg, var), **overrides)
    return SuiteConfig(**per_var, infer_stride=scfg.infer_stride, blend=scfg.blend)


def cmd_train(cfg: RunConfig, out: Path, stage: str, with_rf: bool) -> int:
    train, _ = _make_datasets(cfg)
    scfg = _suite_config(cfg)
    ft_cfg = _finetune_suite_config(cfg, scfg)
    out.mkdir(parents=True, exist_ok=True)

    if stage == "pretrain":
        suite, curves = training.train_suite(train, scfg, stage="pretrain")
        _save_suite(suite, out / "weights_pretrained")
    elif stage == "finetune":
        pre = out / "weights_pretrained"
        suite = _load_suite(pre)
        curves = training.finetune_suite(suite, train, ft_cfg)
        _save_suite(suite, out / "weights")
    else:  # suite
        suite, curves = training.train_suite(train, scfg, stage="pretrain")
        _save_suite(suite, out / "weights_pretrained")
        ft = training.finetune_suite(suite, train, ft_cfg)
        curves.update(ft)
        _save_suite(suite, out / "weights")
    _write_curves(curves, out / f"loss_curves_{stage}.csv")

    if with_rf:
        _train_forests(cfg, train, out / "forests")
    log.info("training stage '%s' complete; outputs under %s", stage, out)
    return EXIT_OK


def _pixel_table(scenes, selector: str, log_cot: bool):
    """Stack valid labeled pixels of all scenes into flat feature/label arrays."""
    feats, labels = {v: [] for v in ("clp", "cth", "cer", "cot")}, {v: [] for v in ("clp", "cth", "cer", "cot")}
    for sc in scenes:
        ls = sc.source_labels if selector == "source" else sc.target_labels
        arr = sc.stack.to_array().astype(np.float64).reshape(len(sc.stack.channels), -1).T
        cov = ls.coverage_mask().ravel()
        clp_ok = cov & ls.clp.valid.ravel()
        feats["clp"].append(arr[clp_ok])
        labels["clp"].append(ls.clp.values.ravel()[clp_ok])
        arr24 = np.concatenate([arr, (ls.clp.values.ravel() / 2.0)[:, None]], axis=1)
        for var in ("cth", "cer", "cot"):
            r = getattr(ls, var)
            ok = cov & r.valid.ravel()
            vals = r.values.ravel()[ok]
            if var == "cot" and log_cot:
                vals = np.log10(np.maximum(vals, 1e-3))
            feats[var].append(arr24[ok])
            labels[var].append(vals)
    return (
        {v: np.concatenate(feats[v]) for v in feats},
        {v: np.concatenate(labels[v]) for v in labels},
    )


def _train_forests(cfg: RunConfig, scenes, out: Path) -> forest.ForestSuite:
    """PRFM on the pooled source+target labeled pixels."""
    hyper = forest_hyper(cfg)
    fs, ls_src = _pixel_table(scenes, "source", log_cot=True)
    ft, ls_tgt = _pixel_table(scenes, "target", log_cot=True)
    out.mkdir(parents=True, exist_ok=True)
    suite = {}
    for offset, var in enumerate(("clp", "cth", "cer", "cot")):
        x = np.concatenate([fs[var], ft[var]])
        y = np.concatenate([ls_src[var], ls_tgt[var]])
        n = min(cfg.rf.sample_n, len(y))
        data = forest.sample_pixels(x, y, n, seed=cfg.rf.seed + 31 * (offset + 1))
        task = "classification" if var == "clp" else "regression"
        f = forest.fit_forest(data, hyper, task)
        forest.save_forest(f, out / f"{var}.json")
        suite[var] = f
        log.info("trained %s forest on %d pixels", var, n)
    return forest.ForestSuite(**suite)


def _load_forests(d: Path) -> forest.ForestSuite:
    suite = {}
    for var in ("clp", "cth", "cer", "cot"):
        p = d / f"{var}.json"
        if not p.exists():
            raise FileNotFoundError(f"missing forest file {p}")
        suite[var] = forest.load_forest(p)
    return forest.ForestSuite(**suite)


def _save_labelset(ls, d: Path, timestamp: float | None = None) -> None:
    d.mkdir(parents=True, exist_ok=True)
    for var in ("clp", "cth", "cer", "cot", "coverage"):
        write_rgrd(getattr(ls, var), d / f"pred_{var}.rgrd")
    if timestamp is not None:
        (d / "pred_manifest.json").write_text(json.dumps({"timestamp": timestamp}, sort_keys=True))


def _load_labelset(d: Path, prefix: str = "pred"):
    return scenegen.LabelSet(
        clp=read_rgrd(d / f"{prefix}_clp.rgrd"),
        cth=read_rgrd(d / f"{prefix}_cth.rgrd"),
        cer=read_rgrd(d / f"{prefix}_cer.rgrd"),
        cot=read_rgrd(d / f"{prefix}_cot.rgrd"),
        coverage=read_rgrd(d / f"{prefix}_coverage.rgrd"),
    )


def cmd_infer(cfg: RunConfig, out: Path, weights: Path, scene_dir: Path, with_rf: bool) -> int:
    if not scene_dir.exists():
        raise FileNotFoundError(f"scene directory {scene_dir} does not exist")
    stack = scenegen.load_scene_stack(scene_dir)
    scene_manifest = json.loads((scene_dir / "manifest.json").read_text())
    suite = _load_suite(weights)
    pred, itlm_s = training.predict_scene(
        suite, stack, stride=cfg.tiles.infer_stride, blend=cfg.tiles.blend
    )
    out.mkdir(parents=True, exist_ok=True)
    _save_labelset(pred, out / "itlm", timestamp=scene_manifest.get("timestamp"))
    timing = {"itlm_s": itlm_s}
    if with_rf:
        forests = _load_forests(weights.parent / "forests")
        rf_pred, rf_s = forest.predict_scene_rf(forests, stack)
        _save_labelset(rf_pred, out / "rf", timestamp=scene_manifest.get("timestamp"))
        timing["rf_s"] = rf_s
        timing["ratio_rf_over_itlm"] = rf_s / itlm_s if itlm_s > 0 else None
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True))
    log.info("inference complete: %s", timing)
    return EXIT_OK


def _eval_against_labels(pred, ref, hist_bins: int) -> dict:
    report = {}
    joint = ref.coverage_mask() & pred.clp.valid
    report["clp"] = metrics.confusion(pred.clp.values, ref.clp.values, joint & ref.clp.valid)
    report["cld_oa_pct"] = metrics.cloud_detection_oa(pred.clp.values, ref.clp.values, joint & ref.clp.valid)
    for var in ("cth", "cer", "cot"):
        pr, rr = getattr(pred, var), getattr(ref, var)
        mask = joint & pr.valid & rr.valid
        report[var] = metrics.scores(pr.values, rr.values, mask)
    return report


def cmd_eval(cfg: RunConfig, out: Path, pred_dir: Path, scene_dir: Path, reference: str) -> int:
    if not pred_dir.exists():
        raise FileNotFoundError(f"prediction directory {pred_dir} does not exist")
    if not scene_dir.exists():
        raise FileNotFoundError(f"scene directory {scene_dir} does not exist")
    pred = _load_labelset(pred_dir)
    out.mkdir(parents=True, exist_ok=True)

    if reference == "track":
        manifest = json.loads((scene_dir / "manifest.json").read_text())
        track = [scenegen.TrackSample(**t) for t in manifest["track"]]
        sz = read_rgrd(scene_dir / "solar_zenith.rgrd")
        pairs = metrics.collocate_track(
            track, pred, pred.grid, product_time=manifest["timestamp"],
            max_dt_s=cfg.eval.max_dt_s, solar_zenith=sz.values,
        )
        import datetime as _dt

        month = _dt.datetime.fromtimestamp(manifest["timestamp"], tz=_dt.timezone.utc).month
        months = [month] * len(pairs)
        days = [p.solar_zenith < cfg.eval.day_night_threshold_deg for p in pairs]
        rows = metrics.stratified_report(pairs, months, days)
        metrics.stratified_to_csv(rows, out / "stratified.csv")
        doc = {
            "n_pairs": len(pairs),
            "strata": [
                {"daynight": r.stratum[0], "season": r.stratum[1], "clp": r.clp.to_dict(),
                 "cld_oa_pct": r.cld_oa_pct, "cth": r.cth.to_dict()}
                for r in rows
            ],
        }
        metrics.report_to_json(doc, out / "report.json")
    else:
        which = "truth" if reference == "truth" else "target"
        if which == "truth":
            ref = scenegen.LabelSet(
                clp=read_rgrd(scene_dir / "truth_clp.rgrd"),
                cth=read_rgrd(scene_dir / "truth_cth.rgrd"),
                cer=read_rgrd(scene_dir / "truth_cer.rgrd"),
                cot=read_rgrd(scene_dir / "truth_cot.rgrd"),
                coverage=Raster(
                    pred.grid, np.ones(pred.grid.shape), np.ones(pred.grid.shape, dtype=bool)
                ),
            )
        else:
            ref = scenegen.load_scene_labels(scene_dir, "target")
        report = _eval_against_labels(pred, ref, cfg.eval.hist_bins)
        metrics.report_to_json(report, out / "report.json")
        with open(out / "report.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["variable", "n", "oa_pct", "r", "mae", "mbe", "rmse"])
            w.writerow(["clp", report["clp"].n, f"{report['clp'].oa_pct:.4f}", "", "", "", ""])
            for var in ("cth", "cer", "cot"):
                s = report[var]
                w.writerow([
                    var, s.n, "",
                    "" if s.r is None else f"{s.r:.6f}",
                    f"{s.mae:.6f}", f"{s.mbe:.6f}", f"{s.rmse:.6f}",
                ])
    log.info("evaluation report written to %s", out)
    return EXIT_OK


def cmd_climo(cfg: RunConfig, out: Path, pred_root: Path, dem_path: Path | None, model: str = "itlm") -> int:
    if not pred_root.exists():
        raise FileNotFoundError(f"prediction root {pred_root} does not exist")
    entries = []
    for d in sorted(pred_root.glob("**/pred_manifest.json")):
        # an inference run holds itlm/ and rf/ side by side; take one model
        if d.parent.name in ("itlm", "rf") and d.parent.name != model:
            continue
        ts = json.loads(d.read_text())["timestamp"]
        entries.append((ts, _load_labelset(d.parent)))
    if not entries:
        raise FileNotFoundError(f"no predictions (pred_manifest.json) found under {pred_root}")
    entries.sort(key=lambda e: e[0])
    series = climatology.TimeSeriesStack([e[0] for e in entries], [e[1] for e in entries])

    grid = series.grid
    c = cfg.climo
    lat, lon = grid.center_mesh()
    region = (lat >= c.region_lat_min) & (lat <= c.region_lat_max) & (lon >= c.region_lon_min) & (lon <= c.region_lon_max)
    if dem_path is not None and dem_path.exists():
        dem = read_rgrd(dem_path)
        region &= geometry.region_altitude_mask(grid, dem, c.min_alt_m).values.astype(bool)

    out.mkdir(parents=True, exist_ok=True)
    for which, name in (("total", "tcf"), ("water", "wcf"), ("ice", "icf")):
        frac = climatology.cloud_fraction(series, which, region)
        write_rgrd(frac, out / f"{name}.rgrd")
        climatology.write_pgm_quicklook(frac, out / f"{name}.pgm", out / f"{name}_scale.json")
    for var in ("cth", "cer", "cot"):
        m = climatology.mean_property_map(series, var, region)
        write_rgrd(m, out / f"mean_{var}.rgrd")
        climatology.write_pgm_quicklook(m, out / f"mean_{var}.pgm", out / f"mean_{var}_scale.json")
    curves = climatology.diurnal_cycle(series, region, c.tz_offset_h)
    climatology.curves_to_csv(curves, out / "diurnal.csv")
    dc_curves = climatology.diurnal_cycle(series, region, c.tz_offset_h, deep_convective_only=True)
    climatology.curves_to_csv(dc_curves, out / "diurnal_deep_convective.csv")
    log.info("climatology products written to %s", out)
    return EXIT_OK


# --- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="itlm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, required=True)
        sp.add_argument("--out", type=Path, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("synth", help="generate synthetic scenes")
    common(sp)

    sp = sub.add_parser("train", help="train model suite (and forests with --with-rf)")
    common(sp)
    sp.add_argument("--stage", choices=["pretrain", "finetune", "suite"], default="suite")
    sp.add_argument("--with-rf", action="store_true")

    sp = sub.add_parser("infer", help="tiled full-scene inference")
    common(sp)
    sp.add_argument("--weights", type=Path, required=True)
    sp.add_argument("--scene", type=Path, required=True)
    sp.add_argument("--with-rf", action="store_true")

    sp = sub.add_parser("eval", help="evaluate predictions")
    common(sp)
    sp.add_argument("--pred", type=Path, required=True)
    sp.add_argument("--scene", type=Path, required=True)
    sp.add_argument("--reference", choices=["truth", "target", "track"], default="truth")

    sp = sub.add_parser("climo", help="climatology maps and diurnal curves")
    common(sp)
    sp.add_argument("--pred-root", type=Path, required=True)
    sp.add_argument("--dem", type=Path, default=None)
    sp.add_argument("--model", choices=["itlm", "rf"], default="itlm")
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        torch.set_num_threads(max(1, args.threads))
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.scenegen.seed = args.seed
        out = args.out if args.out is not None else Path(cfg.io.out_dir)
        if args.command == "synth":
            return cmd_synth(cfg, out, args.force)
        if args.command == "train":
            return cmd_train(cfg, out, args.stage, args.with_rf)
        if args.command == "infer":
            return cmd_infer(cfg, out, args.weights, args.scene, args.with_rf)
        if args.command == "eval":
            return cmd_eval(cfg, out, args.pred, args.scene, args.reference)
        if args.command == "climo":
            return cmd_climo(cfg, out, args.pred_root, args.dem, args.model)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        log.error("missing input: %s", e)
        return EXIT_MISSING_INPUT
    except (FloatingPointError,) as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    except GridError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
