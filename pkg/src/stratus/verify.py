"""Brier scores, skill against per-pixel climatology, isotonic calibration
and reliability/breakdown tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import binom

from .gridcore import FILL, Raster, RasterGeometry, save_raster


def brier(predictions, labels) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions for {y.size} labels")
    if p.size == 0:
        raise ValueError("brier score of an empty set")
    return float(np.mean((p - y) ** 2))


def bss(model_brier: float, baseline_brier: float) -> float:
    """1 - model/baseline; NaN when the baseline is zero."""
    if baseline_brier <= 0:
        return math.nan
    return 1.0 - model_brier / baseline_brier


def climatology_baseline(labels, px_row, px_col, shape) -> np.ndarray:
    """Per-pixel positive fraction; NaN where a pixel has no samples."""
    y = np.asarray(labels, dtype=np.float64)
    flat = np.asarray(px_row) * shape[1] + np.asarray(px_col)
    counts = np.bincount(flat, minlength=shape[0] * shape[1])
    sums = np.bincount(flat, weights=y, minlength=shape[0] * shape[1])
    with np.errstate(invalid="ignore", divide="ignore"):
        rate = sums / counts
    rate[counts == 0] = np.nan
    return rate.reshape(shape)


def baseline_predictions(climatology: np.ndarray, px_row, px_col) -> np.ndarray:
    p = climatology[np.asarray(px_row), np.asarray(px_col)]
    if np.any(np.isnan(p)):
        raise ValueError("climatology has no samples for some evaluated pixel")
    return p


# --------------------------------------------------------------------------
# isotonic calibration


@dataclass(frozen=True)
class CalibrationMap:
    inputs: np.ndarray    # strictly increasing breakpoints
    outputs: np.ndarray   # non-decreasing values in [0, 1]

    @property
    def min_seen(self) -> float:
        return float(self.inputs[0])

    @property
    def max_seen(self) -> float:
        return float(self.inputs[-1])

    def write_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["input", "output"])
            for a, b in zip(self.inputs, self.outputs):
                w.writerow([repr(float(a)), repr(float(b))])

    @classmethod
    def read_csv(cls, path: str | Path) -> "CalibrationMap":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        return cls(np.array([float(r[0]) for r in rows]), np.array([float(r[1]) for r in rows]))


def _pool_adjacent(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted least-squares non-decreasing fit (pool adjacent violators)."""
    means, wts, sizes = [], [], []
    for v, w in zip(values.tolist(), weights.tolist()):
        means.append(v)
        wts.append(w)
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            w2 = wts[-2] + wts[-1]
            m2 = (means[-2] * wts[-2] + means[-1] * wts[-1]) / w2
            s2 = sizes[-2] + sizes[-1]
            del means[-1], wts[-1], sizes[-1]
            means[-1], wts[-1], sizes[-1] = m2, w2, s2
    return np.repeat(np.array(means), sizes)


def pava_fit(predictions, labels) -> CalibrationMap:
    """Isotonic regression of labels on predictions.  Equal predictions are
    pooled first (their label mean), so each breakpoint is one distinct
    prediction value."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.size < 2 or p.size != y.size:
        raise ValueError("isotonic fit needs at least two aligned samples")
    uniq, inverse, counts = np.unique(p, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=y, minlength=uniq.size)
    fitted = _pool_adjacent(sums / counts, counts.astype(np.float64))
    return CalibrationMap(uniq, np.clip(fitted, 0.0, 1.0))


def calibrate(cmap: CalibrationMap, predictions) -> np.ndarray:
    """Step value of the greatest breakpoint <= input; inputs outside the
    fitted range are clipped to the first/last breakpoint."""
    p = np.asarray(predictions, dtype=np.float64)
    idx = np.searchsorted(cmap.inputs, p, side="right") - 1
    return cmap.outputs[np.clip(idx, 0, cmap.inputs.size - 1)]


# --------------------------------------------------------------------------
# reliability and breakdowns


@dataclass(frozen=True)
class ReliabilityBins:
    edges: np.ndarray
    mean_prediction: np.ndarray   # NaN for empty bins
    observed_frequency: np.ndarray
    count: np.ndarray
    band_low: np.ndarray          # 95% binomial interval of the observed frequency
    band_high: np.ndarray         # under the bin's mean prediction

    def inside_band(self) -> np.ndarray:
        occupied = self.count > 0
        f = self.observed_frequency
        return occupied & (f >= self.band_low - 1e-12) & (f <= self.band_high + 1e-12)


def reliability_curve(predictions, labels, n_bins: int = 10) -> ReliabilityBins:
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    which = np.clip(np.floor(p * n_bins).astype(np.int64), 0, n_bins - 1)
    count = np.bincount(which, minlength=n_bins)
    psum = np.bincount(which, weights=p, minlength=n_bins)
    ysum = np.bincount(which, weights=y, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_p = psum / count
        freq = ysum / count
        lo, hi = binom.interval(0.95, count, np.nan_to_num(mean_p))
        lo, hi = lo / count, hi / count
    empty = count == 0
    for arr in (mean_p, freq, lo, hi):
        arr[empty] = np.nan
    return ReliabilityBins(edges, mean_p, freq, count, lo, hi)


def histogram(predictions, width: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    n_bins = int(round(1.0 / width))
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    which = np.clip(np.floor(np.asarray(predictions) * n_bins).astype(np.int64), 0, n_bins - 1)
    return edges, np.bincount(which, minlength=n_bins)


@dataclass(frozen=True)
class Breakdowns:
    pixel_bss: np.ndarray                       # (H, W), NaN where undefined or unsampled
    daily: tuple[tuple[str, float, int], ...]   # (timestamp, brier, n)
    hist_edges: np.ndarray
    hist_counts: np.ndarray


def breakdowns(predictions, labels, timestamps, px_row, px_col, baseline, shape,
               hist_width: float = 0.05) -> Breakdowns:
    """Per-pixel BSS against ``baseline`` predictions, per-day Brier and a
    prediction histogram."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    flat = np.asarray(px_row) * shape[1] + np.asarray(px_col)
    size = shape[0] * shape[1]
    n = np.bincount(flat, minlength=size)
    model = np.bincount(flat, weights=(p - y) ** 2, minlength=size)
    base = np.bincount(flat, weights=(b - y) ** 2, minlength=size)
    with np.errstate(invalid="ignore", divide="ignore"):
        pixel = 1.0 - model / base
    pixel[(n == 0) | (base <= 0)] = np.nan
    stamps, inverse = np.unique(np.asarray(timestamps), return_inverse=True)
    day_n = np.bincount(inverse)
    day_sum = np.bincount(inverse, weights=(p - y) ** 2)
    daily = tuple((str(s) + "Z", float(v / c), int(c)) for s, v, c in zip(stamps, day_sum, day_n))
    edges, counts = histogram(p, hist_width)
    return Breakdowns(pixel.reshape(shape), daily, edges, counts)


@dataclass(frozen=True)
class EvalReport:
    brier: float
    baseline_brier: float
    bss: float
    n_samples: int
    reliability: ReliabilityBins
    breakdown: Breakdowns

    def summary(self) -> dict:
        return {"brier": self.brier, "baseline_brier": self.baseline_brier,
                "bss": None if math.isnan(self.bss) else self.bss, "n_samples": self.n_samples}


def evaluate(predictions, labels, timestamps, px_row, px_col, climatology: np.ndarray,
             n_bins: int = 10, hist_width: float = 0.05) -> EvalReport:
    base_p = baseline_predictions(climatology, px_row, px_col)
    model_b = brier(predictions, labels)
    base_b = brier(base_p, labels)
    return EvalReport(model_b, base_b, bss(model_b, base_b), int(np.size(labels)),
                      reliability_curve(predictions, labels, n_bins),
                      breakdowns(predictions, labels, timestamps, px_row, px_col, base_p, climatology.shape,
                                 hist_width))


def _num(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_report(directory: str | Path, report: EvalReport, geometry: RasterGeometry, extra: dict | None = None):
    """summary.json, reliability.csv, daily_brier.csv, histogram.csv and the
    per-pixel BSS grid (fill sentinel where undefined)."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    summary = report.summary()
    if extra:
        summary.update(extra)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    rel = report.reliability
    with open(out / "reliability.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_low", "bin_high", "mean_prediction", "observed_frequency", "count", "band_low",
                    "band_high"])
        for i in range(rel.count.size):
            w.writerow([_num(rel.edges[i]), _num(rel.edges[i + 1]), _num(rel.mean_prediction[i]),
                        _num(rel.observed_frequency[i]), int(rel.count[i]), _num(rel.band_low[i]),
                        _num(rel.band_high[i])])
    with open(out / "daily_brier.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "brier", "n"])
        for stamp, value, n in report.breakdown.daily:
            w.writerow([stamp, repr(value), n])
    bd = report.breakdown
    with open(out / "histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_low", "bin_high", "count"])
        for i, c in enumerate(bd.hist_counts):
            w.writerow([_num(bd.hist_edges[i]), _num(bd.hist_edges[i + 1]), int(c)])
    pixel = np.where(np.isnan(bd.pixel_bss), FILL, bd.pixel_bss).astype(np.float32)
    save_raster(out / "pixel_bss.grid", Raster(geometry, pixel))
