"""Data preparation and per-family fit/predict used by experiment runs.

``DataContext`` caches feature cubes per (lead, threshold).  ``prepare``
turns a cube into standardized train/validation/test tables for one
split; ``fit_predict`` trains one model family and returns uncalibrated
validation and test probabilities plus the fitted artifact.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from datetime import date
from typing import Any

import numpy as np

from . import rng
from .experiment import TEST, TRAIN, VALIDATION, SplitPlan, make_splits
from .features import (FEATURE_NAMES, LATE_CHANNELS, PAST_ERROR_FEATURES, FeatureCube,
                       FeatureTable, StandardizationStats, build_feature_cube, cube_table, fit_standardization,
                       standardize, standardize_array)
from .forest import ForestConfig, forest_fit, forest_predict_proba, mdi
from .linear import LinearFitConfig, SGDConfig, lr_fit, lr_predict, summed_to_mean_c
from .verify import CalibrationMap, calibrate, climatology_baseline, pava_fit

FAMILIES = ("isotonic_input", "linear", "forest", "network")
_SYNTHETIC = re.compile(r"^(twin:(?P<twin>\w+)|noise:(?P<noise>\d+))$")


def is_known_feature(name: str) -> bool:
    m = _SYNTHETIC.match(name)
    if m is None:
        return name in FEATURE_NAMES
    return m.group("twin") is None or m.group("twin") in FEATURE_NAMES


class DataContext:
    """Feature cubes of one data source, built lazily and cached."""

    def __init__(self, source, strict_gefs_t: bool = True):
        self.source = source
        self.strict_gefs_t = strict_gefs_t
        self._cubes: dict[tuple[int, float], FeatureCube] = {}

    def cube(self, lead: int, threshold: float) -> FeatureCube:
        key = (int(lead), float(threshold))
        if key not in self._cubes:
            self._cubes[key] = build_feature_cube(self.source, key[0], key[1], self.strict_gefs_t)
        return self._cubes[key]


def with_features(cube: FeatureCube, names: tuple[str, ...], seed: int) -> FeatureCube:
    """Select ``names`` from the cube, materializing synthetic columns:
    ``twin:<f>`` is an exact copy of feature ``f``; ``noise:<k>`` is
    standard normal noise from stream ``k`` of ``seed``."""
    base = tuple(n for n in names if n in FEATURE_NAMES)
    out = cube.select(base) if base else cube.select(())
    for n in names:
        if n in FEATURE_NAMES:
            continue
        m = _SYNTHETIC.match(n)
        if m is None:
            raise ValueError(f"unknown feature {n!r}")
        if m.group("twin"):
            values = cube.channel(m.group("twin"))
        else:
            values = rng.stream(seed, 51, int(m.group("noise"))).normal(size=cube.target.shape).astype(np.float32)
        out = out.with_extra(n, values)
    idx = [out.names.index(n) for n in names]
    return FeatureCube(tuple(names), out.values[idx], out.target, out.days, out.lead_hours, out.threshold,
                       out.mask, out.past_error_missing, out.missing_days)


@dataclass
class Prepared:
    cube: FeatureCube
    plan: SplitPlan
    index: dict[str, np.ndarray]            # day positions per partition
    tables: dict[str, FeatureTable]         # standardized
    raw_tables: dict[str, FeatureTable]
    labels: dict[str, np.ndarray]
    stats: StandardizationStats
    climatology: np.ndarray


def prepare(ctx: DataContext, features: tuple[str, ...], lead: int, threshold: float, fold: int,
            season: str = "all", seed: int = 0, train_first: bool = True) -> Prepared:
    for n in features:
        if not is_known_feature(n):
            raise ValueError(f"unknown feature {n!r}")
    full = ctx.cube(lead, threshold)
    cube = with_features(full, tuple(features), seed)
    plan = make_splits(cube.days, fold, season, cube.missing_days, lead, threshold, train_first)
    include_flag = any(n in PAST_ERROR_FEATURES for n in features)
    index, raw, labels = {}, {}, {}
    for part in (TRAIN, VALIDATION, TEST):
        index[part] = plan.index_in(part, cube.days)
        if index[part].size == 0:
            raise ValueError(f"the {part} partition is empty for fold {fold}, season {season}")
        raw[part], labels[part] = cube_table(cube, index[part], include_flag=include_flag)
    stats = fit_standardization(raw[TRAIN])
    tables = {k: standardize(v, stats) for k, v in raw.items()}
    fit_rows = np.concatenate([raw[TRAIN].px_row, raw[VALIDATION].px_row])
    fit_cols = np.concatenate([raw[TRAIN].px_col, raw[VALIDATION].px_col])
    clim = climatology_baseline(np.concatenate([labels[TRAIN], labels[VALIDATION]]), fit_rows, fit_cols,
                                cube.mask.geometry.shape)
    return Prepared(cube, plan, index, tables, raw, labels, stats, clim)


# --------------------------------------------------------------------------
# model families


@dataclass
class FitOutput:
    val_pred: np.ndarray
    test_pred: np.ndarray
    artifact: Any
    mdi: dict[str, float] | None = None
    history: Any = None
    extras: dict = field(default_factory=dict)


def _linear_config(params: dict, n_train: int, seed: int) -> LinearFitConfig:
    """``C_summed`` (penalty against the summed loss) is converted to the
    averaged-loss ``C`` used by the fitter."""
    params = dict(params)
    if "C_summed" in params:
        params["C"] = summed_to_mean_c(params.pop("C_summed"), n_train)
    sgd = {"seed": seed, **(params.pop("sgd", None) or {})}
    return LinearFitConfig(**params, sgd=SGDConfig(**sgd))


def fit_isotonic_input(prep: Prepared, params: dict, seed: int) -> FitOutput:
    if len(prep.cube.names) != 1:
        raise ValueError("isotonic_input takes exactly one input feature")
    name = prep.cube.names[0]
    cmap = pava_fit(prep.raw_tables[TRAIN].column(name), prep.labels[TRAIN])
    return FitOutput(calibrate(cmap, prep.raw_tables[VALIDATION].column(name)),
                     calibrate(cmap, prep.raw_tables[TEST].column(name)), cmap)


def fit_linear(prep: Prepared, params: dict, seed: int) -> FitOutput:
    cfg = _linear_config(params, prep.tables[TRAIN].n_samples, seed)
    model = lr_fit(prep.tables[TRAIN], prep.labels[TRAIN], prep.tables[VALIDATION], prep.labels[VALIDATION], cfg)
    return FitOutput(lr_predict(model, prep.tables[VALIDATION]), lr_predict(model, prep.tables[TEST]), model)


def fit_forest(prep: Prepared, params: dict, seed: int) -> FitOutput:
    params = dict(params)
    n_jobs = int(params.pop("n_jobs", 1))
    cfg = ForestConfig(**{"seed": seed, **params})
    forest = forest_fit(prep.tables[TRAIN], prep.labels[TRAIN], cfg, n_jobs=n_jobs)
    imp = mdi(forest)
    names = prep.tables[TRAIN].column_names
    return FitOutput(forest_predict_proba(forest, prep.tables[VALIDATION]),
                     forest_predict_proba(forest, prep.tables[TEST]), forest,
                     mdi=dict(zip(names, map(float, imp.values))))


def image_sets(prep: Prepared, dtype=np.float32):
    """Standardized network inputs per partition: features in
    ``LATE_CHANNELS`` feed the late input, the rest the main input."""
    from .nn.train import ImageSet

    names = prep.cube.names
    main_names = [n for n in names if n not in LATE_CHANNELS]
    late_names = [n for n in names if n in LATE_CHANNELS]
    mask = prep.cube.mask.valid
    out = {}
    for part, idx in prep.index.items():
        def chans(sel):
            if not sel:
                return np.zeros((idx.size,) + mask.shape + (0,), dtype=dtype)
            arr = np.stack([prep.cube.channel(n)[idx] for n in sel]).astype(np.float64)
            return np.moveaxis(standardize_array(arr, prep.stats, sel), 0, -1).astype(dtype)
        labels = prep.labels[part].reshape(idx.size, -1)
        out[part] = ImageSet(chans(main_names), chans(late_names), labels, mask)
    return out, main_names, late_names


def fit_network(prep: Prepared, params: dict, seed: int) -> FitOutput:
    from .nn.segnet import SegNetParams, build_segnet
    from .nn.train import TrainerConfig, predict, train

    params = dict(params)
    arch_keys = {"base_filters", "kernel", "unpool", "skip", "x_last", "odd_pool", "n_pools"}
    arch = {k: params.pop(k) for k in list(params) if k in arch_keys}
    sets, main_names, late_names = image_sets(prep)
    size = prep.cube.mask.geometry.height_px
    spec, report = build_segnet(SegNetParams(input_size=size, input_channels=len(main_names),
                                             late_channels=len(late_names), **arch))
    cfg = TrainerConfig(**{"seed": seed, **params})
    result = train(spec, sets[TRAIN], sets[VALIDATION], cfg)
    return FitOutput(predict(spec, result.weights, sets[VALIDATION]).reshape(-1),
                     predict(spec, result.weights, sets[TEST]).reshape(-1), result.weights,
                     history=result, extras={"spec": spec, "report": report})


FITTERS = {"isotonic_input": fit_isotonic_input, "linear": fit_linear, "forest": fit_forest,
           "network": fit_network}


def fit_predict(family: str, prep: Prepared, params: dict, seed: int) -> FitOutput:
    if family not in FITTERS:
        raise ValueError(f"unknown model family {family!r}")
    return FITTERS[family](prep, params, seed)


def calibrated_test(fit: FitOutput, prep: Prepared) -> tuple[np.ndarray, CalibrationMap]:
    cmap = pava_fit(fit.val_pred, prep.labels[VALIDATION])
    return calibrate(cmap, fit.test_pred), cmap


def test_days(prep: Prepared) -> list[date]:
    return [prep.cube.days[i] for i in prep.index[TEST]]
