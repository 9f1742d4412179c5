"""Feature derivation, standardization and tabularization.

Every feature is a raster on the observation window, one per verification
day.  ``build_feature_cube`` assembles all of them for one lead time and
threshold; ``tabularize`` flattens a cube onto the mask, time-major then
row-major, which is the row order every table in the package uses.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import maximum_filter

from .gridcore import (FieldSeries, GeometryMismatchError, GridError, Mask, OutOfCoverageError,
                       Raster, RasterGeometry, regrid_array)

FEATURE_NAMES = (
    "harmonie", "hm2", "hm1", "hp1", "hp2",
    "gefs_avg", "ga_prev", "ga_next", "gefs_control", "gefs_q1", "gefs_q3", "gefs_t",
    "init_obs", "ydim", "xdim", "tdim",
    "harmonie_past_error", "gefs_avg_past_error", "gefs_avg_lmax",
)
LATE_CHANNELS = ("xdim", "ydim", "tdim")
PAST_ERROR_FEATURES = ("harmonie_past_error", "gefs_avg_past_error")
# network input: everything except the late coordinate channels and the
# two past-error features
CNN_MAIN_CHANNELS = tuple(n for n in FEATURE_NAMES if n not in LATE_CHANNELS and n not in PAST_ERROR_FEATURES)
PAST_ERROR_FLAG = "past_error_missing"
N_MEMBERS = 11
LOCAL_MAX_HALF_WIDTH_KM = 50.0


class MissingFeatureError(GridError):
    pass


# --------------------------------------------------------------------------
# raster-level operations


def ensemble_stats(members: np.ndarray) -> dict[str, np.ndarray]:
    """Mean, first/third quartile (3rd lowest / 3rd highest) and control of
    11 aligned member fields stacked on axis 0; member 0 is the control."""
    members = np.asarray(members)
    if members.shape[0] != N_MEMBERS:
        raise ValueError(f"quartile rule needs exactly {N_MEMBERS} members, got {members.shape[0]}")
    ordered = np.sort(members, axis=0)
    return {
        "gefs_avg": members.mean(axis=0, dtype=np.float64),
        "gefs_q1": ordered[2],
        "gefs_q3": ordered[-3],
        "gefs_control": members[0],
    }


def raw_ensemble_fraction(members: np.ndarray, threshold: float, strict: bool = True) -> np.ndarray:
    """Fraction of members above (``strict``) or at/above the threshold."""
    members = np.asarray(members)
    hits = members > threshold if strict else members >= threshold
    return hits.sum(axis=0) / members.shape[0]


def local_max_array(values: np.ndarray, half_width_px: int) -> np.ndarray:
    """Sliding (2w+1)^2 maximum over the trailing two axes, returned for the
    interior cells only (the source is cropped by ``w`` on every side)."""
    w = int(half_width_px)
    if w < 0:
        raise ValueError("half_width_px must be >= 0")
    h, wd = values.shape[-2:]
    if h <= 2 * w or wd <= 2 * w:
        raise OutOfCoverageError(f"source of {h}x{wd} cells has no interior at half width {w}")
    size = (1,) * (values.ndim - 2) + (2 * w + 1, 2 * w + 1)
    filtered = maximum_filter(values, size=size, mode="nearest")
    return filtered[..., w:h - w, w:wd - w]


def local_max(src: Raster, half_width_px: int, output_geometry: RasterGeometry | None = None) -> Raster:
    """Local maximum of ``src`` on ``output_geometry`` (default: the interior
    of ``src``).  The output region must sit at least ``half_width_px``
    cells inside the source."""
    g = src.geometry
    w = int(half_width_px)
    interior = g.subgrid(w, w, g.height_px - 2 * w, g.width_px - 2 * w) if min(g.shape) > 2 * w else None
    if interior is None:
        raise OutOfCoverageError("source too small for the requested half width")
    values = local_max_array(src.values, w)
    if output_geometry is None or output_geometry == interior:
        return Raster(interior, values)
    if output_geometry.cell_size_km != g.cell_size_km or output_geometry.y_axis_flipped != g.y_axis_flipped:
        raise GeometryMismatchError("local_max output must share the source cell size and orientation")
    col0 = (output_geometry.origin_x_km - interior.origin_x_km) / g.cell_size_km
    sign = 1.0 if g.y_axis_flipped else -1.0
    row0 = sign * (output_geometry.origin_y_km - interior.origin_y_km) / g.cell_size_km
    r0, c0 = int(round(row0)), int(round(col0))
    if (abs(r0 - row0) > 1e-6 or abs(c0 - col0) > 1e-6 or r0 < 0 or c0 < 0
            or r0 + output_geometry.height_px > interior.height_px
            or c0 + output_geometry.width_px > interior.width_px):
        raise OutOfCoverageError("output region is not covered with the full window margin")
    return Raster(output_geometry, values[r0:r0 + output_geometry.height_px, c0:c0 + output_geometry.width_px])


def tdim(day: date) -> float:
    """Cosine of the day of year, mapping 1 January and 31 December near 1."""
    d = day.timetuple().tm_yday
    return math.cos(d * 2.0 * math.pi / 365.0)


def coordinate_time_features(geometry: RasterGeometry, day: date) -> dict[str, np.ndarray]:
    rows, cols = np.mgrid[0:geometry.height_px, 0:geometry.width_px]
    return {
        "xdim": cols.astype(np.float64),
        "ydim": rows.astype(np.float64),
        "tdim": np.full(geometry.shape, tdim(day)),
    }


def temporal_neighbor(series_by_lead: Mapping[int, FieldSeries], run: datetime, lead: int, offset: int) -> Raster:
    """Raster at lead ``lead + offset`` of the run initialised at ``run``."""
    series = series_by_lead.get(lead + offset)
    raster = None if series is None else series.get(run + timedelta(hours=lead + offset))
    if raster is None:
        raise MissingFeatureError(f"run {run:%Y-%m-%d %H}Z has no lead {lead + offset} h")
    return raster


def past_error(forecast: Mapping[int, FieldSeries], obs: FieldSeries, run: datetime, lead: int,
               to_geometry=None) -> tuple[np.ndarray | None, bool]:
    """Error of the previous day's forecast at the same lead against its
    verifying observation.  Returns (error, available); when the previous
    day is missing the error is None and ``available`` is False."""
    prev = run - timedelta(days=1)
    series = forecast.get(lead)
    f = None if series is None else series.get(prev + timedelta(hours=lead))
    o = obs.get(prev + timedelta(hours=lead))
    if f is None or o is None:
        return None, False
    values = f.values.astype(np.float64)
    if to_geometry is not None:
        values = to_geometry(values, f.geometry)
    return values - o.values, True


# --------------------------------------------------------------------------
# cubes


@dataclass(frozen=True, eq=False)
class FeatureCube:
    """All features for one lead and threshold on the observation window.

    ``values`` has shape (n_features, n_days, H, W); ``target`` holds the
    verifying observations (n_days, H, W).
    """

    names: tuple[str, ...]
    values: np.ndarray
    target: np.ndarray
    days: tuple[date, ...]
    lead_hours: int
    threshold: float
    mask: Mask
    past_error_missing: np.ndarray
    missing_days: tuple[date, ...] = ()

    def channel(self, name: str) -> np.ndarray:
        return self.values[self.names.index(name)]

    def select(self, names: Sequence[str]) -> "FeatureCube":
        idx = [self.names.index(n) for n in names]
        return FeatureCube(tuple(names), self.values[idx], self.target, self.days, self.lead_hours,
                           self.threshold, self.mask, self.past_error_missing, self.missing_days)

    def with_extra(self, name: str, values: np.ndarray) -> "FeatureCube":
        if name in self.names:
            raise ValueError(f"duplicate feature name {name!r}")
        stacked = np.concatenate([self.values, values[None].astype(self.values.dtype)])
        return FeatureCube(self.names + (name,), stacked, self.target, self.days, self.lead_hours,
                           self.threshold, self.mask, self.past_error_missing, self.missing_days)

    def verification_times(self) -> list[datetime]:
        return [datetime(d.year, d.month, d.day) + timedelta(hours=self.lead_hours) for d in self.days]


def build_feature_cube(source, lead: int, threshold: float, strict_gefs_t: bool = True) -> FeatureCube:
    """Derive every named feature for verification at ``day + lead`` for
    all days of ``source``.

    ``source`` provides ``days``, ``observations``, ``fine_deterministic``
    (lead -> series), ``coarse_members`` (list of lead -> series, control
    first) and ``mask``.  Days whose verifying observation is absent are
    listed in ``missing_days`` and left out.
    """
    mask: Mask = source.mask
    geom = mask.geometry
    obs: FieldSeries = source.observations
    fine: Mapping[int, FieldSeries] = source.fine_deterministic
    members: Sequence[Mapping[int, FieldSeries]] = source.coarse_members
    if len(members) != N_MEMBERS:
        raise ValueError(f"need {N_MEMBERS} coarse members, got {len(members)}")
    fine_geom = fine[lead].geometry
    coarse_geom = members[0][lead].geometry
    margin_px = int(round(LOCAL_MAX_HALF_WIDTH_KM / geom.cell_size_km))
    wide = geom.subgrid(-margin_px, -margin_px, geom.height_px + 2 * margin_px, geom.width_px + 2 * margin_px)

    def fine_regrid(values, src_geom=fine_geom):
        return regrid_array(values, src_geom, geom)

    def coarse_at(run: datetime, step: int) -> np.ndarray:
        stack = []
        for m, member in enumerate(members):
            series = member.get(step)
            raster = None if series is None else series.get(run + timedelta(hours=step))
            if raster is None:
                raise MissingFeatureError(f"member {m} of run {run:%Y-%m-%d} has no {step} h block")
            stack.append(raster.values)
        return np.stack(stack)

    days, missing, rows, targets, flags = [], [], [], [], []
    for day in source.days:
        run = datetime(day.year, day.month, day.day)
        verify = obs.get(run + timedelta(hours=lead))
        if verify is None:
            missing.append(day)
            continue
        feats: dict[str, np.ndarray] = {}
        feats["harmonie"] = fine_regrid(temporal_neighbor(fine, run, lead, 0).values)
        for name, off in (("hm2", -2), ("hm1", -1), ("hp1", 1), ("hp2", 2)):
            feats[name] = fine_regrid(temporal_neighbor(fine, run, lead, off).values)
        block = coarse_at(run, lead)
        stats = ensemble_stats(block)
        for name, values in stats.items():
            feats[name] = regrid_array(values, coarse_geom, geom)
        feats["ga_prev"] = regrid_array(coarse_at(run, lead - 3).mean(axis=0, dtype=np.float64), coarse_geom, geom)
        feats["ga_next"] = regrid_array(coarse_at(run, lead + 3).mean(axis=0, dtype=np.float64), coarse_geom, geom)
        feats["gefs_t"] = regrid_array(raw_ensemble_fraction(block, threshold, strict_gefs_t), coarse_geom, geom)
        init = obs.get(run)
        if init is None:
            raise MissingFeatureError(f"no observation for the hour ending {run:%Y-%m-%d %H}Z")
        feats["init_obs"] = init.values
        feats.update(coordinate_time_features(geom, day))
        h_err, h_ok = past_error(fine, obs, run, lead, lambda v, g: regrid_array(v, g, geom))
        prev_members = [{lead: m.get(lead)} for m in members]
        g_err, g_ok = _gefs_past_error(prev_members, obs, run, lead, coarse_geom, geom)
        ok = h_ok and g_ok
        feats["harmonie_past_error"] = h_err if ok else np.zeros(geom.shape)
        feats["gefs_avg_past_error"] = g_err if ok else np.zeros(geom.shape)
        feats["gefs_avg_lmax"] = local_max_array(regrid_array(stats["gefs_avg"], coarse_geom, wide), margin_px)
        rows.append(np.stack([feats[n] for n in FEATURE_NAMES]).astype(np.float32))
        targets.append(verify.values)
        flags.append(not ok)
        days.append(day)
    if not days:
        raise MissingFeatureError("no day has a verifying observation")
    values = np.stack(rows, axis=1)
    return FeatureCube(FEATURE_NAMES, values, np.stack(targets), tuple(days), lead, float(threshold), mask,
                       np.array(flags), tuple(missing))


def _gefs_past_error(members, obs, run, lead, coarse_geom, geom):
    prev = run - timedelta(days=1) + timedelta(hours=lead)
    stack = []
    for member in members:
        series = member.get(lead)
        raster = None if series is None else series.get(prev)
        if raster is None:
            return None, False
        stack.append(raster.values)
    o = obs.get(prev)
    if o is None:
        return None, False
    mean = np.mean(np.stack(stack), axis=0, dtype=np.float64)
    return regrid_array(mean, coarse_geom, geom) - o.values, True


# --------------------------------------------------------------------------
# tables


@dataclass(frozen=True, eq=False)
class FeatureTable:
    column_names: tuple[str, ...]
    rows: np.ndarray
    timestamps: np.ndarray   # datetime64[s] per row
    px_row: np.ndarray
    px_col: np.ndarray
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.column_names)) != len(self.column_names):
            raise ValueError("column names must be unique")
        if self.rows.ndim != 2 or self.rows.shape[1] != len(self.column_names):
            raise ValueError("rows must be n_samples x n_columns")
        n = self.rows.shape[0]
        if not (len(self.timestamps) == len(self.px_row) == len(self.px_col) == n):
            raise ValueError("row index must align with rows")

    @property
    def n_samples(self) -> int:
        return self.rows.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.column_names.index(name)]

    def select(self, names: Sequence[str]) -> "FeatureTable":
        idx = [self.column_names.index(n) for n in names]
        return FeatureTable(tuple(names), self.rows[:, idx], self.timestamps, self.px_row, self.px_col,
                            dict(self.flags))

    def take(self, index: np.ndarray) -> "FeatureTable":
        return FeatureTable(self.column_names, self.rows[index], self.timestamps[index], self.px_row[index],
                            self.px_col[index], dict(self.flags))

    def with_rows(self, rows: np.ndarray, flags: dict | None = None) -> "FeatureTable":
        return FeatureTable(self.column_names, rows, self.timestamps, self.px_row, self.px_col,
                            dict(self.flags) if flags is None else flags)


def tabularize(features: Mapping[str, np.ndarray], labels: np.ndarray, mask: Mask,
               times: Sequence[datetime]) -> tuple[FeatureTable, np.ndarray]:
    """Flatten (n_times, H, W) feature arrays and labels onto the mask.

    Rows are ordered time-major, then row-major over valid pixels."""
    labels = np.asarray(labels)
    if labels.shape[1:] != mask.geometry.shape:
        raise GeometryMismatchError("labels do not match the mask geometry")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    names = tuple(features)
    for name, arr in features.items():
        if arr.shape != labels.shape:
            raise GeometryMismatchError(f"feature {name!r} has shape {arr.shape}, labels {labels.shape}")
    rr, cc = np.nonzero(mask.valid)
    n_t = labels.shape[0]
    rows = np.empty((n_t * rr.size, len(names)))
    for j, name in enumerate(names):
        rows[:, j] = features[name][:, rr, cc].reshape(-1)
    stamps = np.repeat(np.array(times, dtype="datetime64[s]"), rr.size)
    table = FeatureTable(names, rows, stamps, np.tile(rr, n_t), np.tile(cc, n_t))
    return table, labels[:, rr, cc].reshape(-1).astype(np.int8)


def cube_table(cube: FeatureCube, day_index: np.ndarray | None = None,
               include_flag: bool = False) -> tuple[FeatureTable, np.ndarray]:
    """Tabularize a cube (optionally a subset of its days) with threshold
    labels.  ``include_flag`` appends the past-error availability flag."""
    from .experiment import threshold_labels

    idx = np.arange(len(cube.days)) if day_index is None else np.asarray(day_index)
    feats = {n: cube.values[j, idx] for j, n in enumerate(cube.names)}
    if include_flag:
        flag = cube.past_error_missing[idx].astype(np.float32)
        feats[PAST_ERROR_FLAG] = np.broadcast_to(flag[:, None, None], (len(idx),) + cube.mask.geometry.shape)
    labels = threshold_labels(cube.target[idx], cube.threshold)
    times = [cube.verification_times()[i] for i in idx]
    return tabularize(feats, labels, cube.mask, times)


def scatter(column: np.ndarray, table: FeatureTable, mask: Mask, times: Sequence[datetime],
            fill: float = np.nan) -> np.ndarray:
    """Inverse of ``tabularize`` for one column: (n_times, H, W) grid."""
    lookup = {np.datetime64(t, "s"): i for i, t in enumerate(times)}
    out = np.full((len(times),) + mask.geometry.shape, fill)
    ti = np.array([lookup[t] for t in table.timestamps])
    out[ti, table.px_row, table.px_col] = column
    return out


@dataclass(frozen=True)
class StandardizationStats:
    column_names: tuple[str, ...]
    mean: np.ndarray
    sd: np.ndarray

    @property
    def constant(self) -> tuple[str, ...]:
        return tuple(n for n, s in zip(self.column_names, self.sd) if s == 0)


def fit_standardization(table: FeatureTable) -> StandardizationStats:
    """Per-column mean and (population) sd of the given (training) rows."""
    mean = table.rows.mean(axis=0)
    sd = table.rows.std(axis=0)
    return StandardizationStats(table.column_names, mean, sd)


def standardize(table: FeatureTable, stats: StandardizationStats) -> FeatureTable:
    if tuple(table.column_names) != tuple(stats.column_names):
        raise ValueError("standardization stats were fitted on different columns")
    safe = np.where(stats.sd > 0, stats.sd, 1.0)
    rows = (table.rows - stats.mean) / safe
    rows[:, stats.sd == 0] = 0.0
    flags = dict(table.flags)
    flags["constant_columns"] = stats.constant
    return table.with_rows(rows, flags)


def standardize_array(values: np.ndarray, stats: StandardizationStats, names: Sequence[str]) -> np.ndarray:
    """Apply stats to a (n_features, ...) array whose leading axis follows
    ``names``."""
    idx = [stats.column_names.index(n) for n in names]
    mean = stats.mean[idx].reshape((-1,) + (1,) * (values.ndim - 1))
    sd = stats.sd[idx].reshape((-1,) + (1,) * (values.ndim - 1))
    out = (values - mean) / np.where(sd > 0, sd, 1.0)
    return np.where(sd > 0, out, 0.0)


def write_table_csv(path: str | Path, table: FeatureTable, labels: np.ndarray | None = None):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["timestamp", "px_row", "px_col", *table.column_names]
        if labels is not None:
            header.append("label")
        writer.writerow(header)
        for i in range(table.n_samples):
            row = [str(table.timestamps[i]) + "Z", int(table.px_row[i]), int(table.px_col[i])]
            row.extend(repr(float(v)) for v in table.rows[i])
            if labels is not None:
                row.append(int(labels[i]))
            writer.writerow(row)


def read_table_csv(path: str | Path) -> tuple[FeatureTable, np.ndarray | None]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = list(reader)
    has_label = header[-1] == "label"
    names = tuple(header[3:-1] if has_label else header[3:])
    stamps = np.array([r[0].rstrip("Z") for r in data], dtype="datetime64[s]")
    px_row = np.array([int(r[1]) for r in data], dtype=np.int64)
    px_col = np.array([int(r[2]) for r in data], dtype=np.int64)
    body = np.array([[float(v) for v in r[3:3 + len(names)]] for r in data]).reshape(len(data), len(names))
    labels = np.array([int(r[-1]) for r in data], dtype=np.int8) if has_label else None
    return FeatureTable(names, body, stamps, px_row, px_col), labels
