"""Raster data model, de-accumulation, nearest-neighbour regridding, cropping,
alignment checks and the on-disk grid format.

Coordinates are projected kilometres.  ``origin_x_km``/``origin_y_km`` locate
the centre of the top-left cell.  In a regular (north-up) geometry the y
coordinate decreases with the row index; a flipped geometry has y increasing
with the row index.

Grid file format: one ASCII header line ``W H CELL_KM OX OY FLIP TIMESTAMP``
followed by ``W*H`` little-endian float32 values in row-major order.  A mask
file has the same header followed by ``W*H`` bytes of 0/1.  A series file is
a plain concatenation of grid records.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

FILL = np.float32(-9999.0)
ACCUMULATION_TOLERANCE = 1e-6


class GridError(ValueError):
    pass


class GeometryMismatchError(GridError):
    pass


class OutOfCoverageError(GridError):
    pass


@dataclass(frozen=True)
class RasterGeometry:
    width_px: int
    height_px: int
    cell_size_km: float
    origin_x_km: float = 0.0
    origin_y_km: float = 0.0
    y_axis_flipped: bool = False

    def __post_init__(self):
        if self.width_px < 1 or self.height_px < 1:
            raise GridError(f"raster must have at least one cell, got {self.width_px}x{self.height_px}")
        if not self.cell_size_km > 0:
            raise GridError(f"cell size must be positive, got {self.cell_size_km}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_px, self.width_px)

    def x_centers(self) -> np.ndarray:
        return self.origin_x_km + self.cell_size_km * np.arange(self.width_px)

    def y_centers(self) -> np.ndarray:
        sign = 1.0 if self.y_axis_flipped else -1.0
        return self.origin_y_km + sign * self.cell_size_km * np.arange(self.height_px)

    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) of the cell edges."""
        half = self.cell_size_km / 2
        xs, ys = self.x_centers(), self.y_centers()
        return (xs.min() - half, xs.max() + half, ys.min() - half, ys.max() + half)

    def center(self) -> tuple[float, float]:
        xmin, xmax, ymin, ymax = self.extent()
        return ((xmin + xmax) / 2, (ymin + ymax) / 2)

    def subgrid(self, row0: int, col0: int, height: int, width: int) -> "RasterGeometry":
        sign = 1.0 if self.y_axis_flipped else -1.0
        return RasterGeometry(
            width_px=width,
            height_px=height,
            cell_size_km=self.cell_size_km,
            origin_x_km=self.origin_x_km + col0 * self.cell_size_km,
            origin_y_km=self.origin_y_km + sign * row0 * self.cell_size_km,
            y_axis_flipped=self.y_axis_flipped,
        )

    @classmethod
    def centered(cls, side_px: int, cell_size_km: float, center=(0.0, 0.0), flipped=False):
        """Square geometry of ``side_px`` cells centred on ``center``."""
        half = (side_px - 1) * cell_size_km / 2
        oy = center[1] - half if flipped else center[1] + half
        return cls(side_px, side_px, cell_size_km, center[0] - half, oy, flipped)


def _check_values(values: np.ndarray, geometry: RasterGeometry):
    if values.shape != geometry.shape:
        raise GeometryMismatchError(f"values shape {values.shape} != geometry shape {geometry.shape}")
    valid = values != FILL
    if not np.all(np.isfinite(values[valid])):
        raise GridError("raster contains non-finite values outside the fill sentinel")


@dataclass(frozen=True, eq=False)
class Raster:
    geometry: RasterGeometry
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim == 1:
            if values.size != self.geometry.width_px * self.geometry.height_px:
                raise GeometryMismatchError(f"{values.size} values for a {self.geometry.shape} raster")
            values = values.reshape(self.geometry.shape)
        _check_values(values, self.geometry)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def valid(self) -> np.ndarray:
        return self.values != FILL

    def with_values(self, values) -> "Raster":
        return Raster(self.geometry, values)

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class Mask:
    geometry: RasterGeometry
    valid: np.ndarray

    def __post_init__(self):
        valid = np.asarray(self.valid, dtype=bool)
        if valid.shape != self.geometry.shape:
            raise GeometryMismatchError(f"mask shape {valid.shape} != geometry shape {self.geometry.shape}")
        if not valid.any():
            raise GridError("mask has no valid cells")
        valid.setflags(write=False)
        object.__setattr__(self, "valid", valid)

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())

    def bounding_box(self) -> tuple[int, int, int, int]:
        """(row0, row1, col0, col1), half-open, of the valid cells."""
        rows = np.flatnonzero(self.valid.any(axis=1))
        cols = np.flatnonzero(self.valid.any(axis=0))
        return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1

    def extent_geometry(self) -> RasterGeometry:
        r0, r1, c0, c1 = self.bounding_box()
        return self.geometry.subgrid(r0, c0, r1 - r0, c1 - c0)

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.valid, other.valid)


@dataclass(frozen=True)
class FieldSeries:
    """Time-ordered rasters sharing one geometry.

    ``lead_hours`` is None for observations and for a single run whose
    entries span several lead times.
    """

    entries: tuple[tuple[datetime, Raster], ...]
    lead_hours: int | None = None
    source: str = ""
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        entries = tuple(self.entries)
        if not entries:
            raise GridError("series needs at least one entry")
        times = [t for t, _ in entries]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise GridError("series timestamps must be strictly increasing")
        geometry = entries[0][1].geometry
        if any(r.geometry != geometry for _, r in entries):
            raise GeometryMismatchError("all rasters in a series must share one geometry")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(times)})

    def __len__(self):
        return len(self.entries)

    @property
    def times(self) -> list[datetime]:
        return [t for t, _ in self.entries]

    @property
    def geometry(self) -> RasterGeometry:
        return self.entries[0][1].geometry

    def get(self, when: datetime) -> Raster | None:
        i = self._index.get(when)
        return None if i is None else self.entries[i][1]

    def at(self, when: datetime) -> Raster:
        raster = self.get(when)
        if raster is None:
            raise KeyError(f"{self.source or 'series'} has no entry at {when.isoformat()}")
        return raster

    def stack(self) -> np.ndarray:
        return np.stack([r.values for _, r in self.entries])

    @classmethod
    def from_arrays(cls, times: Sequence[datetime], values: np.ndarray, geometry: RasterGeometry,
                    lead_hours: int | None = None, source: str = "") -> "FieldSeries":
        return cls(tuple((t, Raster(geometry, v)) for t, v in zip(times, values)), lead_hours, source)


# --------------------------------------------------------------------------
# accumulation handling


def deaccumulate(series: FieldSeries, window_steps: int, first_step_index: int = 0) -> FieldSeries:
    """Turn running accumulations into per-step amounts.

    The accumulation restarts every ``window_steps`` entries; entry
    ``first_step_index`` is the first step of a window.  Decreases inside a
    window of up to ``ACCUMULATION_TOLERANCE`` are clamped to zero.
    """
    if window_steps < 1:
        raise GridError(f"window_steps must be >= 1, got {window_steps}")
    stack = series.stack().astype(np.float64)
    out = stack.copy()
    for k in range(len(series)):
        if (k - first_step_index) % window_steps != 0 and k > 0:
            out[k] = stack[k] - stack[k - 1]
    worst = out.min()
    if worst < -ACCUMULATION_TOLERANCE:
        raise GridError(f"accumulation decreased by {-worst:g} mm inside a window")
    np.maximum(out, 0.0, out=out)
    return FieldSeries.from_arrays(series.times, out.astype(np.float32), series.geometry,
                                   series.lead_hours, series.source)


def gefs_to_hourly_rate(three_hour_amounts: FieldSeries) -> FieldSeries:
    """Convert 3-hourly amounts to mean hourly rates (mm/h)."""
    rates = [(t, r.with_values(r.values / np.float32(3.0))) for t, r in three_hour_amounts.entries]
    return FieldSeries(tuple(rates), three_hour_amounts.lead_hours, three_hour_amounts.source)


# --------------------------------------------------------------------------
# regridding and cropping

_EDGE_EPS = 1e-9


def _nearest(frac: np.ndarray) -> np.ndarray:
    # exact .5 ties go to the lower index
    return np.ceil(frac - 0.5 - _EDGE_EPS).astype(np.int64)


def regrid_indices(src: RasterGeometry, dst: RasterGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Source (row, col) index vectors of the nearest cell for every
    destination row and column."""
    xmin, xmax, ymin, ymax = src.extent()
    xs, ys = dst.x_centers(), dst.y_centers()
    tol = _EDGE_EPS * max(1.0, src.cell_size_km)
    if xs.min() < xmin - tol or xs.max() > xmax + tol or ys.min() < ymin - tol or ys.max() > ymax + tol:
        raise OutOfCoverageError("destination cell centres fall outside the source extent")
    col_frac = (xs - src.origin_x_km) / src.cell_size_km
    if src.y_axis_flipped:
        row_frac = (ys - src.origin_y_km) / src.cell_size_km
    else:
        row_frac = (src.origin_y_km - ys) / src.cell_size_km
    cols = np.clip(_nearest(col_frac), 0, src.width_px - 1)
    rows = np.clip(_nearest(row_frac), 0, src.height_px - 1)
    return rows, cols


def regrid_array(values: np.ndarray, src: RasterGeometry, dst: RasterGeometry) -> np.ndarray:
    """Nearest-neighbour regrid of the trailing two axes of ``values``."""
    rows, cols = regrid_indices(src, dst)
    return values[..., rows[:, None], cols[None, :]]


def regrid_nearest(src: Raster, dst_geometry: RasterGeometry) -> Raster:
    return Raster(dst_geometry, regrid_array(src.values, src.geometry, dst_geometry))


def crop_window(src: Raster, output_mask_geometry: RasterGeometry, side_px: int, margin_km: float) -> Raster:
    """Square ``side_px`` window of ``src`` centred on the mask extent, with at
    least ``margin_km`` of context on every side of it."""
    geom = src.geometry
    cell = geom.cell_size_km
    mxmin, mxmax, mymin, mymax = output_mask_geometry.extent()
    span = side_px * cell
    if max(mxmax - mxmin, mymax - mymin) + 2 * margin_km > span + _EDGE_EPS:
        raise GridError(f"mask extent plus {margin_km} km margins does not fit in {side_px} px")
    cx, cy = (mxmin + mxmax) / 2, (mymin + mymax) / 2
    xs, ys = geom.x_centers(), geom.y_centers()
    # first column whose left edge is at or left of the ideal window edge
    col0 = int(math.floor((cx - span / 2 - (xs[0] - cell / 2)) / cell + 0.5))
    if geom.y_axis_flipped:
        row0 = int(math.floor((cy - span / 2 - (ys[0] - cell / 2)) / cell + 0.5))
    else:
        row0 = int(math.floor(((ys[0] + cell / 2) - (cy + span / 2)) / cell + 0.5))

    def fits(r0, c0):
        window = geom.subgrid(r0, c0, side_px, side_px)
        wxmin, wxmax, wymin, wymax = window.extent()
        return (mxmin - wxmin >= margin_km - _EDGE_EPS and wxmax - mxmax >= margin_km - _EDGE_EPS
                and mymin - wymin >= margin_km - _EDGE_EPS and wymax - mymax >= margin_km - _EDGE_EPS)

    # pixel snapping can cost up to one cell on one side; try the neighbours
    candidates = [(row0 + dr, col0 + dc) for dr in (0, -1, 1) for dc in (0, -1, 1)]
    chosen = next((rc for rc in candidates if fits(*rc)), None)
    if chosen is None:
        raise GridError("no pixel-aligned window keeps the requested margin")
    r0, c0 = chosen
    if r0 < 0 or c0 < 0 or r0 + side_px > geom.height_px or c0 + side_px > geom.width_px:
        raise OutOfCoverageError("source raster does not cover the requested window")
    return Raster(geom.subgrid(r0, c0, side_px, side_px), src.values[r0:r0 + side_px, c0:c0 + side_px])


# --------------------------------------------------------------------------
# alignment check


@dataclass(frozen=True)
class LagReport:
    rows: tuple[tuple[int, float | None, int], ...]  # (lag, pearson r or None, n samples)

    @property
    def best_lag(self) -> int | None:
        defined = [(r, lag) for lag, r, _ in self.rows if r is not None]
        if not defined:
            return None
        return max(defined, key=lambda x: (x[0], -abs(x[1])))[1]


def lag_correlation_check(forecast: FieldSeries, obs: FieldSeries, lags: Iterable[int],
                          mask: Mask | None = None) -> LagReport:
    """Pearson correlation between the forecast valid at ``t`` and the
    observation valid at ``t - lag`` for every lag (hours).

    A forecast whose events arrive ``k`` hours late correlates best at lag
    ``+k``.  Zero-variance inputs give an undefined (None) correlation.
    """
    from datetime import timedelta

    if forecast.geometry != obs.geometry:
        raise GeometryMismatchError("forecast and observations must share a geometry")
    sel = mask.valid if mask is not None else np.ones(forecast.geometry.shape, bool)
    rows = []
    for lag in lags:
        f_vals, o_vals = [], []
        for t, raster in forecast.entries:
            other = obs.get(t - timedelta(hours=lag))
            if other is None:
                continue
            f_vals.append(raster.values[sel])
            o_vals.append(other.values[sel])
        n = sum(len(v) for v in f_vals)
        if n < 2:
            rows.append((lag, None, n))
            continue
        f = np.concatenate(f_vals).astype(np.float64)
        o = np.concatenate(o_vals).astype(np.float64)
        fs, os_ = f.std(), o.std()
        if fs == 0 or os_ == 0:
            rows.append((lag, None, n))
            continue
        r = float(np.mean((f - f.mean()) * (o - o.mean())) / (fs * os_))
        rows.append((lag, r, n))
    return LagReport(tuple(rows))


# --------------------------------------------------------------------------
# file format


def _format_timestamp(when: datetime | None) -> str:
    if when is None:
        return "-"
    if when.tzinfo is not None:
        when = when.astimezone(timezone.utc).replace(tzinfo=None)
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


def _parse_timestamp(text: str) -> datetime | None:
    if text == "-":
        return None
    return datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ")


def _header(geometry: RasterGeometry, when: datetime | None) -> bytes:
    g = geometry
    fields = [str(g.width_px), str(g.height_px), repr(float(g.cell_size_km)), repr(float(g.origin_x_km)),
              repr(float(g.origin_y_km)), "1" if g.y_axis_flipped else "0", _format_timestamp(when)]
    return (" ".join(fields) + "\n").encode("ascii")


def _read_header(fh: BinaryIO) -> tuple[RasterGeometry, datetime | None] | None:
    line = fh.readline()
    if not line:
        return None
    parts = line.decode("ascii").split()
    if len(parts) != 7:
        raise GridError(f"malformed grid header: {line!r}")
    w, h, cell, ox, oy, flip, ts = parts
    geometry = RasterGeometry(int(w), int(h), float(cell), float(ox), float(oy), flip == "1")
    return geometry, _parse_timestamp(ts)


def write_raster(fh: BinaryIO, raster: Raster, when: datetime | None = None):
    fh.write(_header(raster.geometry, when))
    fh.write(raster.values.astype("<f4", copy=False).tobytes(order="C"))


def read_raster(fh: BinaryIO) -> tuple[Raster, datetime | None] | None:
    head = _read_header(fh)
    if head is None:
        return None
    geometry, when = head
    n = geometry.width_px * geometry.height_px
    body = fh.read(4 * n)
    if len(body) != 4 * n:
        raise GridError("truncated grid body")
    values = np.frombuffer(body, dtype="<f4").reshape(geometry.shape).astype(np.float32)
    return Raster(geometry, values), when


def save_raster(path: str | Path, raster: Raster, when: datetime | None = None):
    with open(path, "wb") as fh:
        write_raster(fh, raster, when)


def load_raster(path: str | Path) -> tuple[Raster, datetime | None]:
    with open(path, "rb") as fh:
        out = read_raster(fh)
    if out is None:
        raise GridError(f"{path} is empty")
    return out


def save_series(path: str | Path, series: FieldSeries):
    buf = io.BytesIO()
    for when, raster in series.entries:
        write_raster(buf, raster, when)
    Path(path).write_bytes(buf.getvalue())


def load_series(path: str | Path, lead_hours: int | None = None, source: str = "") -> FieldSeries:
    entries = []
    with open(path, "rb") as fh:
        while (rec := read_raster(fh)) is not None:
            raster, when = rec
            if when is None:
                raise GridError(f"{path}: series records need timestamps")
            entries.append((when, raster))
    return FieldSeries(tuple(entries), lead_hours, source)


def save_mask(path: str | Path, mask: Mask):
    with open(path, "wb") as fh:
        fh.write(_header(mask.geometry, None))
        fh.write(mask.valid.astype(np.uint8).tobytes(order="C"))


def load_mask(path: str | Path) -> Mask:
    with open(path, "rb") as fh:
        head = _read_header(fh)
        if head is None:
            raise GridError(f"{path} is empty")
        geometry, _ = head
        body = fh.read()
    flags = np.frombuffer(body, dtype=np.uint8)
    if flags.size != geometry.width_px * geometry.height_px or np.any(flags > 1):
        raise GridError(f"{path}: mask body must hold W*H bytes of 0/1")
    return Mask(geometry, flags.reshape(geometry.shape).astype(bool))
