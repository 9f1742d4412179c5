"""Experiment records, feature add/remove deltas, MDI reports and the
duplicated-feature diagnostic."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .experiment import TEST, VALIDATION
from .features import FEATURE_NAMES
from .forest import Forest
from .linear import LinearParams
from .pipeline import FAMILIES, DataContext, calibrated_test, fit_predict, is_known_feature, prepare
from .verify import CalibrationMap, baseline_predictions, brier, bss, evaluate, write_report

LINEAR_GRID = ({"C_summed": 1e-5}, {"C_summed": 1e-3}, {"C_summed": 1e-1})
FOREST_GRID = ({},)
NETWORK_GRID = ({"base_filters": 8}, {"base_filters": 16})
DEFAULT_GRIDS = {"isotonic_input": ({},), "linear": LINEAR_GRID, "forest": FOREST_GRID, "network": NETWORK_GRID}
RESULT_COLUMNS = ("season", "lead", "threshold", "config", "valmedian", "testmedian")


def _canonical(value):
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True, eq=False)
class ExperimentSpec:
    family: str
    features: tuple[str, ...]
    season: str = "all"
    lead: int = 12
    threshold: float = 0.5
    fold: int = 2016
    grid: tuple[dict, ...] = ({},)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "grid", tuple(dict(g) for g in self.grid))
        if not self.features:
            raise ValueError("feature set is empty")
        if len(set(self.features)) != len(self.features):
            raise ValueError("feature set lists a name twice")
        bad = [n for n in self.features if not is_known_feature(n)]
        if bad:
            raise ValueError(f"unknown features: {', '.join(bad)}")
        if not self.grid:
            raise ValueError("hyperparameter grid is empty")

    @classmethod
    def with_default_grid(cls, family: str, features: Sequence[str], **kwargs) -> "ExperimentSpec":
        return cls(family, tuple(features), grid=DEFAULT_GRIDS[family], **kwargs)

    def key(self) -> str:
        return _canonical({"family": self.family, "features": list(self.features), "season": self.season,
                           "lead": self.lead, "threshold": float(self.threshold), "fold": self.fold,
                           "grid": list(self.grid), "seed": self.seed})

    def __eq__(self, other):
        return isinstance(other, ExperimentSpec) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def config_label(self) -> str:
        """Model, feature set and grid; excludes the split and seed so
        records of one configuration group across folds."""
        keys = sorted({k for g in self.grid for k in g})
        varying = [k for k in keys if len({_canonical(g.get(k)) for g in self.grid}) > 1]
        shown = ",".join(f"{k}=" + "|".join(_canonical(g.get(k)) for g in self.grid) for k in varying)
        digest = hashlib.sha1(_canonical(list(self.grid)).encode()).hexdigest()[:8]
        return f"{self.family}[{'+'.join(self.features)}]{{{shown}}}#{digest}"

    def pairing_key(self, features: Iterable[str]) -> tuple:
        return (self.family, frozenset(features), self.season, self.lead, float(self.threshold), self.fold,
                _canonical(list(self.grid)), self.seed)

    def replace_features(self, features: Sequence[str]) -> "ExperimentSpec":
        return ExperimentSpec(self.family, tuple(features), self.season, self.lead, self.threshold, self.fold,
                              self.grid, self.seed)


def expand(family: str, feature_sets: Sequence[Sequence[str]], seasons=("all",), leads=(12,),
           thresholds=(0.5,), folds=(2016,), seeds=(0,), grid=None) -> list[ExperimentSpec]:
    grid = DEFAULT_GRIDS[family] if grid is None else grid
    return [ExperimentSpec(family, tuple(f), s, l, h, fo, tuple(grid), sd)
            for f, s, l, h, fo, sd in itertools.product(feature_sets, seasons, leads, thresholds, folds, seeds)]


@dataclass
class EvalRecord:
    spec: ExperimentSpec
    val_bss: float            # uncalibrated model, selected grid point
    test_bss: float           # calibrated model
    val_brier: float
    test_brier: float
    params: dict
    grid_val_bss: tuple[float, ...]
    n_test: int
    mdi: dict[str, float] | None = None
    artifact: str | None = None


class RunError(RuntimeError):
    def __init__(self, spec: ExperimentSpec, cause: BaseException):
        super().__init__(f"{spec.config_label()} fold {spec.fold} seed {spec.seed}: {cause}")
        self.spec = spec
        self.cause = cause


def _save_artifact(directory: Path, fit, cmap: CalibrationMap, prep) -> str:
    directory.mkdir(parents=True, exist_ok=True)
    cmap.write_csv(directory / "calibration.csv")
    art = fit.artifact
    if isinstance(art, LinearParams):
        art.write_csv(directory / "linear.csv")
    elif isinstance(art, Forest):
        art.write_csv(directory / "forest.csv")
    elif isinstance(art, CalibrationMap):
        art.write_csv(directory / "input_isotonic.csv")
    elif isinstance(art, dict):
        from .nn.io import save_weights
        save_weights(directory / "network", art)
        if fit.history is not None:
            fit.history.write_history(directory / "history.csv")
    prep.plan.write_csv(directory / "split.csv")
    return str(directory)


def run_config(spec: ExperimentSpec, ctx: DataContext, artifact_dir: str | Path | None = None,
               report_dir: str | Path | None = None) -> EvalRecord:
    """Fit every grid point on train, keep the one with the best
    uncalibrated validation BSS, calibrate it on validation and score the
    calibrated predictions on test."""
    try:
        prep = prepare(ctx, spec.features, spec.lead, spec.threshold, spec.fold, spec.season, spec.seed)
        vt = prep.raw_tables[VALIDATION]
        val_base = brier(baseline_predictions(prep.climatology, vt.px_row, vt.px_col), prep.labels[VALIDATION])
        best, scores = None, []
        for params in spec.grid:
            fit = fit_predict(spec.family, prep, params, spec.seed)
            vb = brier(fit.val_pred, prep.labels[VALIDATION])
            scores.append(bss(vb, val_base))
            if best is None or vb < best[1]:
                best = (fit, vb, params)
        fit, val_b, params = best
        test_pred, cmap = calibrated_test(fit, prep)
        tt = prep.raw_tables[TEST]
        allowed = {np.datetime64(prep.cube.verification_times()[i], "s") for i in prep.index[TEST]}
        if not set(np.unique(tt.timestamps).tolist()) <= {a.item() for a in allowed}:
            raise AssertionError("test score would use rows outside the test partition")
        report = evaluate(test_pred, prep.labels[TEST], tt.timestamps, tt.px_row, tt.px_col, prep.climatology)
    except Exception as exc:
        raise RunError(spec, exc) from exc
    artifact = None
    if artifact_dir is not None:
        artifact = _save_artifact(Path(artifact_dir), fit, cmap, prep)
    if report_dir is not None:
        write_report(report_dir, report, prep.cube.mask.geometry,
                     {"config": spec.config_label(), "fold": spec.fold, "seed": spec.seed,
                      "val_bss": _nan_none(bss(val_b, val_base)), "params": params})
    return EvalRecord(spec, bss(val_b, val_base), report.bss, val_b, report.brier, dict(params), tuple(scores),
                      report.n_samples, fit.mdi, artifact)


def _nan_none(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


def run_many(specs: Sequence[ExperimentSpec], ctx_factory, jobs: int = 1) -> list[EvalRecord]:
    """Run specs serially or across ``jobs`` processes; ``ctx_factory``
    must be a picklable zero-argument callable returning a DataContext.
    Output order follows ``specs`` regardless of completion order."""
    if jobs <= 1:
        ctx = ctx_factory()
        return [run_config(s, ctx) for s in specs]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(ctx_factory,)) as pool:
        return list(pool.map(_run_in_worker, specs))


_WORKER_CTX: DataContext | None = None


def _init_worker(factory):
    global _WORKER_CTX
    _WORKER_CTX = factory()


def _run_in_worker(spec):
    return run_config(spec, _WORKER_CTX)


# --------------------------------------------------------------------------
# results tables and deltas


def results_table(records: Sequence[EvalRecord]) -> list[dict]:
    """One row per (season, lead, threshold, config): medians over folds
    and seeds of the validation and test BSS."""
    groups: dict[tuple, list[EvalRecord]] = {}
    for r in records:
        s = r.spec
        groups.setdefault((s.season, s.lead, float(s.threshold), s.config_label()), []).append(r)
    rows = []
    for (season, lead, threshold, label), rs in sorted(groups.items()):
        rows.append({"season": season, "lead": lead, "threshold": threshold, "config": label,
                     "valmedian": float(np.median([r.val_bss for r in rs])),
                     "testmedian": float(np.median([r.test_bss for r in rs]))})
    return rows


def write_results_csv(path: str | Path, records: Sequence[EvalRecord]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        w.writeheader()
        for row in results_table(records):
            w.writerow({**row, "valmedian": repr(row["valmedian"]), "testmedian": repr(row["testmedian"])})


class UnmatchedPairsError(ValueError):
    def __init__(self, missing: list[str]):
        super().__init__(f"{len(missing)} unmatched record pairs: " + "; ".join(missing))
        self.missing = missing


@dataclass(frozen=True)
class DeltaSummary:
    feature: str
    direction: str
    deltas: tuple[float, ...]

    @property
    def median(self) -> float:
        return float(np.median(self.deltas))

    @property
    def minimum(self) -> float:
        return float(np.min(self.deltas))

    @property
    def maximum(self) -> float:
        return float(np.max(self.deltas))


def delta_bss(records: Sequence[EvalRecord], base_set: Sequence[str], candidate: str,
              direction: str) -> DeltaSummary:
    """Paired test-BSS differences.  ``add``: BSS(base + candidate) minus
    BSS(base).  ``remove``: BSS(base - candidate) minus BSS(base), so a
    negative value means the candidate helped."""
    base = frozenset(base_set)
    if direction == "add":
        if candidate in base:
            raise ValueError(f"{candidate} is already in the base set")
        other = base | {candidate}
    elif direction == "remove":
        if candidate not in base:
            raise ValueError(f"{candidate} is not in the base set")
        other = base - {candidate}
    else:
        raise ValueError("direction must be 'add' or 'remove'")
    index = {r.spec.pairing_key(r.spec.features): r for r in records}
    deltas, missing = [], []
    for r in records:
        if frozenset(r.spec.features) != base:
            continue
        partner = index.get(r.spec.pairing_key(other))
        if partner is None:
            missing.append(f"{r.spec.config_label()} fold {r.spec.fold} seed {r.spec.seed} lacks "
                           f"{'+'.join(sorted(other))}")
            continue
        deltas.append(partner.test_bss - r.test_bss)
    if missing or not deltas:
        raise UnmatchedPairsError(missing or [f"no records with feature set {'+'.join(sorted(base))}"])
    return DeltaSummary(candidate, direction, tuple(deltas))


def write_deltas_csv(path: str | Path, summaries: Sequence[DeltaSummary]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "direction", "n_pairs", "median", "min", "max"])
        for s in summaries:
            w.writerow([s.feature, s.direction, len(s.deltas), repr(s.median), repr(s.minimum), repr(s.maximum)])


@dataclass(frozen=True)
class MdiRow:
    feature: str
    median: float
    minimum: float
    maximum: float
    n_records: int


def mdi_report(records: Sequence[EvalRecord]) -> list[MdiRow]:
    """Per-feature normalized MDI across forest records, sorted by median
    (descending, ties by name)."""
    forests = [r for r in records if r.spec.family == "forest" and r.mdi is not None]
    if not forests:
        raise ValueError("no forest records")
    values: dict[str, list[float]] = {}
    for r in forests:
        total = sum(r.mdi.values())
        for name, v in r.mdi.items():
            values.setdefault(name, []).append(v / total if total > 0 else 0.0)
    rows = [MdiRow(n, float(np.median(v)), float(np.min(v)), float(np.max(v)), len(v)) for n, v in values.items()]
    return sorted(rows, key=lambda r: (-r.median, r.feature))


# --------------------------------------------------------------------------
# duplicated-feature diagnostic

DIAGNOSTIC_FOREST = {"n_estimators": 60, "max_samples": 20000, "min_samples_leaf": 20}


@dataclass
class DuplicateDiagnostic:
    feature: str
    twin_shares: tuple[float, float]     # each twin's share of the pair's combined MDI
    pair_mdi: float                      # combined normalized MDI of the pair
    mdi: dict[str, float]                # normalized MDI of the duplicated forest
    delta_remove_twin: float             # ablation model: BSS(without twin) - BSS(with both)
    delta_remove_both: float             # ablation model: BSS(without either) - BSS(with both)
    delta_remove_unduplicated: float     # same removal when the twin is replaced by noise
    forest_delta_remove_twin: float      # the forest's own delta for removing the twin
    ablation_family: str = "linear"
    records: list[EvalRecord] = field(default_factory=list)

    def rows(self) -> list[tuple[str, float]]:
        return [("mdi_share_" + self.feature, self.twin_shares[0]),
                ("mdi_share_twin:" + self.feature, self.twin_shares[1]),
                ("pair_mdi", self.pair_mdi),
                ("delta_remove_twin", self.delta_remove_twin),
                ("delta_remove_both", self.delta_remove_both),
                ("delta_remove_unduplicated", self.delta_remove_unduplicated),
                ("forest_delta_remove_twin", self.forest_delta_remove_twin)]

    def write_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "value"])
            for name, value in self.rows():
                w.writerow([name, repr(float(value))])


def duplicate_feature_diagnostic(ctx: DataContext, seed: int = 0, feature: str = "harmonie",
                                 others: Sequence[str] = ("gefs_avg", "noise:0"), lead: int = 12,
                                 threshold: float = 0.5, fold: int = 2016,
                                 forest_params: dict | None = None,
                                 ablation_family: str = "linear") -> DuplicateDiagnostic:
    """Contrast MDI with ablation for an exactly duplicated feature.

    MDI comes from a forest fitted with the twin present.  Ablation deltas
    come from ``ablation_family`` runs (default linear, whose fit is not
    altered by a redundant column beyond the penalty split).  The forest's
    own delta is reported as well: with per-split candidate sampling a
    duplicate raises the chance that the feature is a candidate, so
    removing it changes the forest even though no information is lost.
    The control replaces the twin with noise, so removing ``feature``
    there is costly."""
    if feature not in FEATURE_NAMES:
        raise ValueError(f"unknown feature {feature!r}")
    params = dict(DIAGNOSTIC_FOREST if forest_params is None else forest_params)
    twin = f"twin:{feature}"
    control = "noise:99"
    grid = DEFAULT_GRIDS[ablation_family]

    def run(family, feats, g):
        return run_config(ExperimentSpec(family, tuple(feats), "all", lead, threshold, fold, g, seed), ctx)

    f_dup = run("forest", (feature, twin, *others), (params,))
    f_one = run("forest", (feature, *others), (params,))
    dup = run(ablation_family, (feature, twin, *others), grid)
    one = run(ablation_family, (feature, *others), grid)
    none = run(ablation_family, tuple(others), grid)
    ctl = run(ablation_family, (feature, control, *others), grid)
    ctl_removed = run(ablation_family, (control, *others), grid)
    total = sum(f_dup.mdi.values())
    norm = {k: v / total for k, v in f_dup.mdi.items()}
    pair = norm[feature] + norm[twin]
    shares = (norm[feature] / pair, norm[twin] / pair) if pair > 0 else (0.0, 0.0)
    return DuplicateDiagnostic(feature, shares, pair, norm, one.test_bss - dup.test_bss,
                               none.test_bss - dup.test_bss, ctl_removed.test_bss - ctl.test_bss,
                               f_one.test_bss - f_dup.test_bss, ablation_family,
                               [f_dup, f_one, dup, one, none, ctl, ctl_removed])
