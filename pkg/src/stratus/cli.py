"""Command-line entry point: ``stratus synth|run|ablate|report``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
Flags override config-file values; ``--set key.sub=value`` reaches any
config key.  ``STRATUS_SEED`` is the seed fallback when neither the file
nor a flag sets one.
"""

from __future__ import annotations

import argparse
import csv
import functools
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import ablation as A
from .config import ConfigError, family_params, load_config, parse_assignment, write_resolved
from .features import CNN_MAIN_CHANNELS, LATE_CHANNELS
from .pipeline import DataContext, image_sets, prepare
from .scenario import config_from_dict, generate_scenario, load_scenario, save_scenario

log = logging.getLogger("stratus")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

OVERFIT_TRAINER = {"batch_size": 4, "learning_rate": 0.05, "max_epochs": 500, "patience": 500,
                   "reduce_lr": False, "stop_below_train_brier": 0.02}


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stratus", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, output=True):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="global seed (scenario and experiment)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. trainer.batch_size=8")
        if output:
            sp.add_argument("--output-dir", help="directory for outputs (must exist)")

    def experiment(sp):
        sp.add_argument("--scenario-dir", help="scenario written by 'synth'; generated in memory if omitted")
        sp.add_argument("--model", help="isotonic_input, linear, forest or network")
        sp.add_argument("--feature", action="append", help="input feature (repeatable)")
        sp.add_argument("--lead", type=int)
        sp.add_argument("--threshold", type=float)
        sp.add_argument("--season", choices=("all", "summer", "winter"))
        sp.add_argument("--fold", type=int, help="test year")
        sp.add_argument("--jobs", type=int, default=1, help="parallel processes for independent configs")

    s = sub.add_parser("synth", help="generate a synthetic scenario")
    common(s)
    r = sub.add_parser("run", help="train, calibrate and evaluate one configuration")
    common(r)
    experiment(r)
    r.add_argument("--overfit-sanity", type=int, metavar="N",
                   help="train the network on N training images until train Brier < 0.02")
    a = sub.add_parser("ablate", help="feature add/remove ablation and importance reports")
    common(a)
    experiment(a)
    a.add_argument("--duplicate-diagnostic", action="store_true", help="also run the duplicated-feature diagnostic")
    rep = sub.add_parser("report", help="merge report directories into plot-ready CSVs")
    rep.add_argument("run_dirs", nargs="*")
    rep.add_argument("--output-dir", required=True)
    return p


def _overrides(args) -> dict:
    out = {}
    for text in getattr(args, "set", []):
        key, value = parse_assignment(text)
        out[key] = value
    if args.seed is not None:
        out["scenario.seed"] = args.seed
        out["experiment.seed"] = args.seed
    if getattr(args, "output_dir", None) is not None:
        out["output_dir"] = args.output_dir
    flag_keys = {"scenario_dir": "scenario_dir", "model": "experiment.model", "lead": "experiment.lead",
                 "threshold": "experiment.threshold", "season": "experiment.season", "fold": "experiment.fold"}
    for attr, key in flag_keys.items():
        if getattr(args, attr, None) is not None:
            out[key] = getattr(args, attr)
    if getattr(args, "feature", None):
        out["experiment.features"] = list(args.feature)
    return out


def _output_dir(cfg: dict) -> Path:
    if cfg["output_dir"] is None:
        raise UsageError("no output directory: pass --output-dir or set output_dir")
    out = Path(cfg["output_dir"])
    if not out.is_dir():
        raise UsageError(f"output directory {out} does not exist")
    return out


def make_context(scenario_dir: str | None, scenario_cfg: dict) -> DataContext:
    if scenario_dir is not None:
        if not (Path(scenario_dir) / "manifest.json").is_file():
            raise UsageError(f"{scenario_dir} holds no scenario manifest")
        return DataContext(load_scenario(scenario_dir))
    return DataContext(generate_scenario(config_from_dict(scenario_cfg)))


def _grid(cfg: dict, family: str) -> tuple[dict, ...]:
    base = family_params(cfg, family)
    points = cfg["experiment"]["grid"]
    if points is None:
        points = A.DEFAULT_GRIDS[family] if family != "network" else ({},)
    return tuple({**base, **dict(p)} for p in points)


def _spec(cfg: dict, features=None) -> A.ExperimentSpec:
    e = cfg["experiment"]
    return A.ExperimentSpec(e["model"], tuple(features or e["features"]), e["season"], int(e["lead"]),
                            float(e["threshold"]), int(e["fold"]), _grid(cfg, e["model"]), int(e["seed"]))


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict) -> int:
    out = _output_dir(cfg)
    scenario = generate_scenario(config_from_dict(cfg["scenario"]))
    save_scenario(scenario, out)
    write_resolved(cfg, out)
    for h, c in sorted(scenario.achieved_cover.items()):
        log.info("threshold %.1f mm/h: achieved cover %.4f", h, c)
    return EXIT_OK


def cmd_run(cfg: dict, overfit: int | None = None) -> int:
    out = _output_dir(cfg)
    write_resolved(cfg, out)
    ctx = make_context(cfg["scenario_dir"], cfg["scenario"])
    if overfit is not None:
        return _overfit_sanity(cfg, ctx, out, overfit)
    spec = _spec(cfg)
    record = A.run_config(spec, ctx, artifact_dir=out / "model", report_dir=out / "report")
    _write_record(out / "record.json", record)
    log.info("%s: validation BSS %.4f, test BSS %.4f", spec.config_label(), record.val_bss, record.test_bss)
    return EXIT_OK


def _write_record(path: Path, record: A.EvalRecord):
    s = record.spec
    data = {"family": s.family, "features": list(s.features), "season": s.season, "lead": s.lead,
            "threshold": s.threshold, "fold": s.fold, "seed": s.seed, "params": record.params,
            "val_bss": record.val_bss, "test_bss": record.test_bss, "val_brier": record.val_brier,
            "test_brier": record.test_brier, "grid_val_bss": list(record.grid_val_bss),
            "n_test": record.n_test, "mdi": record.mdi, "artifact": record.artifact}
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=float) + "\n")


def _overfit_sanity(cfg: dict, ctx: DataContext, out: Path, n_images: int) -> int:
    from .nn.segnet import SegNetParams, build_segnet
    from .nn.train import TrainerConfig, train

    e = cfg["experiment"]
    prep = prepare(ctx, CNN_MAIN_CHANNELS + LATE_CHANNELS, int(e["lead"]), float(e["threshold"]), int(e["fold"]),
                   e["season"], int(e["seed"]))
    sets, main, late = image_sets(prep)
    if n_images < 1 or n_images > len(sets["train"]):
        raise UsageError(f"--overfit-sanity needs 1..{len(sets['train'])} images")
    spec, _ = build_segnet(SegNetParams(input_size=prep.cube.mask.geometry.height_px, input_channels=len(main),
                                        late_channels=len(late), **cfg["network"]))
    tcfg = TrainerConfig(**{**cfg["trainer"], **OVERFIT_TRAINER, "seed": int(e["seed"])})
    result = train(spec, sets["train"].take(np.arange(n_images)), sets["validation"].take(np.arange(4)), tcfg)
    result.write_history(out / "history.csv")
    final = result.history[-1].train_brier
    (out / "overfit.json").write_text(json.dumps({"images": n_images, "epochs": len(result.history),
                                                  "final_train_brier": final,
                                                  "reached": final < 0.02}, indent=2) + "\n")
    log.info("overfit sanity: train Brier %.4f after %d epochs", final, len(result.history))
    return EXIT_OK


def cmd_ablate(cfg: dict, jobs: int = 1, diagnostic: bool = False) -> int:
    out = _output_dir(cfg)
    write_resolved(cfg, out)
    ab = cfg["ablation"]
    reference = tuple(ab["reference"])
    missing = [f for f in ab["remove"] if f not in reference]
    if missing:
        raise UsageError(f"ablation.remove lists features outside the reference set: {', '.join(missing)}")
    sets = [reference] + [reference + (f,) for f in ab["add"]] + [tuple(x for x in reference if x != f)
                                                                for f in ab["remove"]]
    sets = [s for s in sets if s]
    family = cfg["experiment"]["model"]
    specs = [A.ExperimentSpec(family, fs, season, int(lead), float(h), int(fold), _grid(cfg, family), int(seed))
             for fs in sets for season in ab["seasons"] for lead in ab["leads"] for h in ab["thresholds"]
             for fold in ab["folds"] for seed in ab["seeds"]]
    factory = functools.partial(make_context, cfg["scenario_dir"], cfg["scenario"])
    records = A.run_many(specs, factory, jobs)
    A.write_results_csv(out / "results.csv", records)
    summaries, unmatched = [], []
    for direction, feats in (("add", ab["add"]), ("remove", ab["remove"])):
        for f in feats:
            try:
                summaries.append(A.delta_bss(records, reference, f, direction))
            except A.UnmatchedPairsError as exc:
                unmatched.extend(exc.missing)
    A.write_deltas_csv(out / "deltas.csv", summaries)
    if family == "forest":
        with open(out / "mdi.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", "median", "min", "max", "n_records"])
            for row in A.mdi_report(records):
                w.writerow([row.feature, repr(row.median), repr(row.minimum), repr(row.maximum), row.n_records])
    if diagnostic or ab["duplicate_diagnostic"]:
        e = cfg["experiment"]
        diag = A.duplicate_feature_diagnostic(factory(), int(e["seed"]), ab["diagnostic_feature"],
                                              lead=int(e["lead"]), threshold=float(e["threshold"]),
                                              fold=int(e["fold"]))
        diag.write_csv(out / "duplicate_diagnostic.csv")
    if unmatched:
        for m in unmatched:
            print(f"unmatched: {m}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


REPORT_TABLES = ("reliability.csv", "histogram.csv", "daily_brier.csv")


def cmd_report(run_dirs: list[str], output_dir: str) -> int:
    if not run_dirs:
        raise UsageError("report needs at least one run directory")
    out = Path(output_dir)
    if not out.is_dir():
        raise UsageError(f"output directory {out} does not exist")
    reports = []
    for d in run_dirs:
        p = Path(d)
        rep = p / "report" if (p / "report" / "summary.json").is_file() else p
        if not (rep / "summary.json").is_file():
            raise UsageError(f"{d} holds no report (summary.json missing)")
        reports.append((p.name, rep))
    ids = [rid for rid, _ in reports]
    if len(set(ids)) != len(ids):
        raise UsageError("run directories must have distinct names")
    for table in REPORT_TABLES:
        with open(out / table, "w", newline="") as fh:
            w = csv.writer(fh)
            header_written = False
            for rid, rep in reports:
                with open(rep / table, newline="") as src:
                    rows = list(csv.reader(src))
                if not header_written:
                    w.writerow(["run_id"] + rows[0])
                    header_written = True
                w.writerows([rid] + r for r in rows[1:])
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "brier", "baseline_brier", "bss", "n_samples"])
        for rid, rep in reports:
            s = json.loads((rep / "summary.json").read_text())
            w.writerow([rid, s["brier"], s["baseline_brier"], s["bss"], s["n_samples"]])
    for rid, rep in reports:
        shutil.copyfile(rep / "pixel_bss.grid", out / f"{rid}_pixel_bss.grid")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "report":
            return cmd_report(args.run_dirs, args.output_dir)
        cfg = load_config(args.config, _overrides(args))
        if args.command == "synth":
            return cmd_synth(cfg)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        if args.command == "run":
            return cmd_run(cfg, args.overfit_sanity)
        return cmd_ablate(cfg, args.jobs, args.duplicate_diagnostic)
    except (ConfigError, UsageError) as exc:
        print(f"stratus: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures surface as exit 3
        log.debug("failure", exc_info=True)
        print(f"stratus: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
