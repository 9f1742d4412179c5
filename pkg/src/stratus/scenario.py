"""Synthetic forecast/observation scenarios at desk scale.

Observed precipitation is a sum of advected Gaussian rain cells.  Cells are
spawned per calendar day from that day's own random stream, so a day's
weather does not depend on which other days are generated.  The raw cell
field is pushed through a monotone piecewise-linear map whose knots are
placed at the empirical quantiles of the +lead observations, which pins
the exceedance cover of every configured threshold.

Forecast sources are the same weather sampled on their own grids with a
bias recipe: a systematic displacement, a timing shift, an amplitude
scale, a per-run random displacement and i.i.d. noise.  Coarse members are
produced as running accumulations (reset every two 3-hour steps) and go
through :func:`~stratus.gridcore.deaccumulate` and
:func:`~stratus.gridcore.gefs_to_hourly_rate` like real archive data.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np

from . import rng
from .gridcore import (FieldSeries, GridError, Mask, RasterGeometry, deaccumulate, gefs_to_hourly_rate,
                       load_mask, load_series, save_mask, save_series)

EPOCH = date(2000, 1, 1).toordinal()
_S_WEATHER, _S_MASK, _S_FINE_POS, _S_COARSE_POS, _S_SPREAD, _S_FINE_NOISE, _S_COARSE_NOISE = range(1, 8)


@dataclass(frozen=True)
class BiasSpec:
    advection_offset_px: tuple[float, float] = (0.0, 0.0)
    timing_shift_hours: int = 0
    amplitude_scale: float = 1.0
    noise_sd: float = 0.0
    position_sd_px: float = 0.0

    def __post_init__(self):
        if self.noise_sd < 0 or self.position_sd_px < 0:
            raise ValueError("noise_sd and position_sd_px must be >= 0")
        object.__setattr__(self, "advection_offset_px", tuple(float(v) for v in self.advection_offset_px))

    @property
    def is_null(self) -> bool:
        return (self.advection_offset_px == (0.0, 0.0) and self.timing_shift_hours == 0
                and self.amplitude_scale == 1.0 and self.noise_sd == 0 and self.position_sd_px == 0)


@dataclass(frozen=True)
class MaskHoleSpec:
    count: int = 3
    radius_px: float = 2.0


def _default_cover():
    return {0.5: 0.055, 1.0: 0.030, 2.0: 0.012}


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    n_days: int = 120
    start_date: date = date(2015, 1, 1)
    day_stride: int = 9
    target_cover: dict = field(default_factory=_default_cover)
    coarse_cell_km: float = 25.0
    fine_cell_km: float = 2.5
    obs_cell_km: float = 1.0
    window_px: int = 128
    mask_px: int = 64
    n_members: int = 11
    leads: tuple[int, ...] = (12, 24)
    fine: BiasSpec = BiasSpec(advection_offset_px=(2.0, 0.0), amplitude_scale=0.9, noise_sd=0.15,
                              position_sd_px=12.0)
    coarse: BiasSpec = BiasSpec(advection_offset_px=(-3.0, 2.0), amplitude_scale=1.2, noise_sd=0.1,
                                position_sd_px=6.0)
    member_spread_px: float = 6.0
    mask_holes: MaskHoleSpec = MaskHoleSpec()
    cells_per_day: float = 30.0
    cell_sigma_km: tuple[float, float] = (5.0, 18.0)
    cell_duration_hours: tuple[float, float] = (2.0, 6.0)
    advection_speed_kmh: float = 15.0

    def __post_init__(self):
        if self.n_members < 1:
            raise ValueError("n_members must be >= 1")
        if self.n_days < 1 or self.day_stride < 1:
            raise ValueError("n_days and day_stride must be >= 1")
        if min(self.coarse_cell_km, self.fine_cell_km, self.obs_cell_km) <= 0:
            raise ValueError("cell sizes must be positive")
        cover = {float(k): float(v) for k, v in self.target_cover.items()}
        if not cover:
            raise ValueError("target_cover needs at least one threshold")
        for h, c in cover.items():
            if not 0 < c <= 0.5:
                raise ValueError(f"infeasible cover target {c} for threshold {h}: must lie in (0, 0.5]")
        ordered = [cover[h] for h in sorted(cover)]
        if any(b >= a for a, b in zip(ordered, ordered[1:])):
            raise ValueError("cover targets must decrease strictly with the threshold")
        object.__setattr__(self, "target_cover", cover)
        object.__setattr__(self, "leads", tuple(int(v) for v in self.leads))
        if self.mask_px > self.window_px:
            raise ValueError("mask_px cannot exceed window_px")

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# weather


@dataclass(frozen=True)
class _Cells:
    t_peak: np.ndarray      # absolute hours
    cx: np.ndarray
    cy: np.ndarray
    u: np.ndarray           # km/h
    v: np.ndarray
    sigma: np.ndarray       # km
    duration: np.ndarray    # temporal sd, hours
    amplitude: np.ndarray


def _abs_hours(day: date, hour: float = 0.0) -> float:
    return (day.toordinal() - EPOCH) * 24.0 + hour


class Weather:
    """Raw (un-mapped) rain-cell field as a function of position and time."""

    def __init__(self, cfg: ScenarioConfig, domain_half_km: float):
        self.cfg = cfg
        self.half = domain_half_km
        self._days: dict[int, _Cells] = {}
        self._near: dict[int, _Cells] = {}

    def _day(self, ordinal: int) -> _Cells:
        cells = self._days.get(ordinal)
        if cells is None:
            cfg = self.cfg
            g = rng.stream(cfg.seed, _S_WEATHER, ordinal)
            k = int(g.poisson(cfg.cells_per_day))
            heading = g.uniform(0, 2 * np.pi)
            speed = cfg.advection_speed_kmh * g.uniform(0.5, 1.5)
            t0 = (ordinal - EPOCH) * 24.0
            cells = _Cells(
                t_peak=t0 + g.uniform(-6.0, 30.0, k),
                cx=g.uniform(-self.half, self.half, k),
                cy=g.uniform(-self.half, self.half, k),
                u=speed * np.cos(heading) + g.normal(0, 2.0, k),
                v=speed * np.sin(heading) + g.normal(0, 2.0, k),
                sigma=g.uniform(*cfg.cell_sigma_km, k),
                duration=g.uniform(*cfg.cell_duration_hours, k),
                amplitude=np.exp(g.normal(0.0, 0.6, k)),
            )
            self._days[ordinal] = cells
        return cells

    def _cells_near(self, day: int) -> _Cells:
        if day in self._near:
            return self._near[day]
        parts = [self._day(o) for o in range(day - 2, day + 3)]
        cells = _Cells(*(np.concatenate([getattr(p, f.name) for p in parts])
                         for f in dataclasses.fields(_Cells)))
        self._near[day] = cells
        return cells

    def raw_many(self, xs: np.ndarray, ys: np.ndarray, times, dx=None, dy=None) -> np.ndarray:
        """Field on the grid ``ys x xs`` (km) at each absolute hour in
        ``times``, optionally sampled at positions shifted by ``-dx, -dy``
        per time.  Returns shape (T, len(ys), len(xs))."""
        times = np.atleast_1d(np.asarray(times, dtype=np.float64))
        dx = np.zeros_like(times) if dx is None else np.broadcast_to(np.asarray(dx, float), times.shape)
        dy = np.zeros_like(times) if dy is None else np.broadcast_to(np.asarray(dy, float), times.shape)
        out = np.zeros((len(times), len(ys), len(xs)))
        days = np.floor(times / 24.0).astype(np.int64) + EPOCH
        for day in np.unique(days):
            sel = np.flatnonzero(days == day)
            c = self._cells_near(int(day))
            dt = times[sel, None] - c.t_peak[None, :]                       # (T, K)
            w = c.amplitude * np.exp(-0.5 * (dt / c.duration) ** 2)
            live = np.flatnonzero((w > 1e-6).any(axis=0))
            if live.size == 0:
                continue
            dt, w = dt[:, live], w[:, live]
            sig = c.sigma[live]
            px = c.cx[live] + c.u[live] * dt + dx[sel, None]                  # (T, K)
            py = c.cy[live] + c.v[live] * dt + dy[sel, None]
            gx = np.exp(-0.5 * ((xs[None, None, :] - px[..., None]) / sig[None, :, None]) ** 2)
            gy = np.exp(-0.5 * ((ys[None, None, :] - py[..., None]) / sig[None, :, None]) ** 2)
            out[sel] = np.matmul(gy.transpose(0, 2, 1) * w[:, None, :], gx)
        return out

    def raw(self, xs: np.ndarray, ys: np.ndarray, t_abs: float) -> np.ndarray:
        """Field on the grid ``ys x xs`` (km) at absolute hour ``t_abs``."""
        return self.raw_many(xs, ys, [t_abs])[0]


@dataclass(frozen=True)
class CoverMap:
    """Monotone piecewise-linear map from raw field values to mm/h."""

    raw_knots: tuple[float, ...]
    mm_knots: tuple[float, ...]

    def __call__(self, raw: np.ndarray) -> np.ndarray:
        xk = np.array((0.0,) + self.raw_knots)
        yk = np.array((0.0,) + self.mm_knots)
        out = np.interp(raw, xk, yk)
        slope = (yk[-1] - yk[-2]) / (xk[-1] - xk[-2])
        above = raw > xk[-1]
        out[above] = yk[-1] + slope * (raw[above] - xk[-1])
        return out


def fit_cover_map(raw_sample: np.ndarray, target_cover: dict[float, float]) -> CoverMap:
    """Place knots so that exactly ``round(cover * n)`` samples exceed each
    threshold."""
    s = np.sort(raw_sample.ravel())
    n = s.size
    raw_knots, mm_knots = [], []
    for h in sorted(target_cover):
        above = int(round(target_cover[h] * n))
        idx = n - above
        if idx <= 0 or idx >= n:
            raise GridError(f"cannot place a knot for cover {target_cover[h]} with {n} samples")
        r = 0.5 * (s[idx - 1] + s[idx])
        if r <= 0 or (raw_knots and r <= raw_knots[-1]):
            raise GridError("scenario too dry to reach the requested cover; raise cells_per_day")
        raw_knots.append(float(r))
        mm_knots.append(float(h))
    return CoverMap(tuple(raw_knots), tuple(mm_knots))


# --------------------------------------------------------------------------
# scenario


@dataclass
class Scenario:
    config: ScenarioConfig
    days: tuple[date, ...]
    observations: FieldSeries
    fine_deterministic: dict[int, FieldSeries]
    coarse_members: list[dict[int, FieldSeries]]
    mask: Mask
    cover_map: CoverMap
    achieved_cover: dict[float, float]
    weather: Weather = field(repr=False, default=None)

    def truth(self, geometry: RasterGeometry, when: datetime) -> np.ndarray:
        """Mapped (mm/h) truth field at the cell centres of ``geometry``."""
        t = _abs_hours(when.date(), when.hour + when.minute / 60.0)
        return self.cover_map(self.weather.raw(geometry.x_centers(), geometry.y_centers(), t))

    @property
    def obs_geometry(self) -> RasterGeometry:
        return self.mask.geometry

    @property
    def coarse_geometry(self) -> RasterGeometry:
        return next(iter(self.coarse_members[0].values())).geometry

    @property
    def fine_geometry(self) -> RasterGeometry:
        return next(iter(self.fine_deterministic.values())).geometry


def scenario_days(cfg: ScenarioConfig) -> tuple[date, ...]:
    return tuple(cfg.start_date + timedelta(days=k * cfg.day_stride) for k in range(cfg.n_days))


def geometries(cfg: ScenarioConfig) -> dict[str, RasterGeometry]:
    """Observation window plus source grids wide enough for regridding and
    a 50 km local-maximum halo around the window."""
    window_km = cfg.window_px * cfg.obs_cell_km
    coarse_n = int(np.ceil((window_km + 2 * 50 * cfg.obs_cell_km + 2 * cfg.coarse_cell_km) / cfg.coarse_cell_km))
    coarse_n += (coarse_n + 1) % 2
    fine_n = int(np.ceil((window_km + 2 * cfg.fine_cell_km) / cfg.fine_cell_km))
    return {
        "obs": RasterGeometry.centered(cfg.window_px, cfg.obs_cell_km),
        "fine": RasterGeometry.centered(fine_n, cfg.fine_cell_km),
        "coarse": RasterGeometry.centered(coarse_n, cfg.coarse_cell_km),
    }


def make_mask(cfg: ScenarioConfig, geometry: RasterGeometry) -> Mask:
    valid = np.zeros(geometry.shape, dtype=bool)
    lo = (cfg.window_px - cfg.mask_px) // 2
    valid[lo:lo + cfg.mask_px, lo:lo + cfg.mask_px] = True
    g = rng.stream(cfg.seed, _S_MASK)
    rows, cols = np.mgrid[0:geometry.height_px, 0:geometry.width_px]
    for _ in range(cfg.mask_holes.count):
        hr = g.uniform(lo, lo + cfg.mask_px)
        hc = g.uniform(lo, lo + cfg.mask_px)
        valid &= (rows - hr) ** 2 + (cols - hc) ** 2 > cfg.mask_holes.radius_px ** 2
    return Mask(geometry, valid)


def _obs_hours(cfg: ScenarioConfig) -> list[int]:
    hours = {0}
    for lead in cfg.leads:
        hours.update((lead - 1, lead, lead + 1))
    return sorted(hours)


def _fine_leads(cfg: ScenarioConfig) -> list[int]:
    return sorted({lead + k for lead in cfg.leads for k in range(-2, 3)})


def _coarse_blocks(cfg: ScenarioConfig) -> list[int]:
    return sorted({lead + k for lead in cfg.leads for k in (-3, 0, 3)})


def _displacement_km(bias: BiasSpec, unit: np.ndarray, lead: float, cell_km: float) -> np.ndarray:
    scale = bias.position_sd_px * np.sqrt(max(lead, 1.0) / 12.0)
    return (np.asarray(bias.advection_offset_px) + scale * unit) * cell_km


def generate_scenario(cfg: ScenarioConfig) -> Scenario:
    """Generate observations, the fine deterministic forecast, the coarse
    ensemble and the observation mask.  Bit-reproducible for a given config."""
    geoms = geometries(cfg)
    obs_g, fine_g, coarse_g = geoms["obs"], geoms["fine"], geoms["coarse"]
    domain_half = coarse_g.extent()[1] + 50.0
    weather = Weather(cfg, domain_half)
    days = scenario_days(cfg)
    day_set = set(days)
    run_days = sorted(day_set | {d - timedelta(days=1) for d in days})
    mask = make_mask(cfg, obs_g)
    ox, oy = obs_g.x_centers(), obs_g.y_centers()

    # pin the cover on the first lead's observations inside the mask
    lead0 = cfg.leads[0]
    calib = weather.raw_many(ox, oy, [_abs_hours(d, lead0) for d in days])[:, mask.valid]
    cover_map = fit_cover_map(calib, cfg.target_cover)

    obs_times: dict[datetime, np.ndarray] = {}
    for d in run_days:
        base = datetime(d.year, d.month, d.day)
        hours = [h for h in (_obs_hours(cfg) if d in day_set else cfg.leads)
                 if base + timedelta(hours=h) not in obs_times]
        fields = cover_map(weather.raw_many(ox, oy, [_abs_hours(d, h) for h in hours])).astype(np.float32)
        for h, values in zip(hours, fields):
            obs_times[base + timedelta(hours=h)] = values
    times = sorted(obs_times)
    observations = FieldSeries.from_arrays(times, np.stack([obs_times[t] for t in times]), obs_g,
                                           None, "obs")

    fine = _fine_series(cfg, weather, cover_map, fine_g, run_days, day_set)
    coarse = _coarse_members(cfg, weather, cover_map, coarse_g, run_days, day_set)

    labels_sample = cover_map(calib)
    achieved = {h: float(np.mean(labels_sample > h)) for h in sorted(cfg.target_cover)}
    return Scenario(cfg, days, observations, fine, coarse, mask, cover_map, achieved, weather)


def _fine_series(cfg, weather, cover_map, geom, run_days, day_set) -> dict[int, FieldSeries]:
    bias = cfg.fine
    xs, ys = geom.x_centers(), geom.y_centers()
    per_lead: dict[int, list] = {lead: [] for lead in _fine_leads(cfg)}
    for d in run_days:
        unit = rng.stream(cfg.seed, _S_FINE_POS, d.toordinal()).normal(size=2)
        leads = _fine_leads(cfg) if d in day_set else list(cfg.leads)
        base = datetime(d.year, d.month, d.day)
        disp = np.array([_displacement_km(bias, unit, lead, cfg.obs_cell_km) for lead in leads])
        times = [_abs_hours(d, lead - bias.timing_shift_hours) for lead in leads]
        fields = bias.amplitude_scale * cover_map(weather.raw_many(xs, ys, times, disp[:, 0], disp[:, 1]))
        for lead, values in zip(leads, fields):
            if bias.noise_sd > 0:
                noise = rng.stream(cfg.seed, _S_FINE_NOISE, d.toordinal(), lead).normal(size=values.shape)
                values = np.maximum(values + bias.noise_sd * noise, 0.0)
            per_lead[lead].append((base + timedelta(hours=lead), values.astype(np.float32)))
    return {
        lead: FieldSeries.from_arrays([t for t, _ in rows], np.stack([v for _, v in rows]), geom, lead, "fine")
        for lead, rows in per_lead.items()
    }


def _coarse_members(cfg, weather, cover_map, geom, run_days, day_set) -> list[dict[int, FieldSeries]]:
    bias = cfg.coarse
    xs, ys = geom.x_centers(), geom.y_centers()
    blocks = _coarse_blocks(cfg)
    steps = list(range(3, max(blocks) + 1, 3))
    per_member: list[dict[int, list]] = [{b: [] for b in blocks} for _ in range(cfg.n_members)]
    for d in run_days:
        shared = rng.stream(cfg.seed, _S_COARSE_POS, d.toordinal()).normal(size=2)
        wanted = blocks if d in day_set else list(cfg.leads)
        base = datetime(d.year, d.month, d.day)
        hours = [h for step in steps for h in (step - 2, step - 1, step)]
        base_disp = np.array([_displacement_km(bias, shared, 3 * ((h + 2) // 3), cfg.obs_cell_km) for h in hours])
        spreads = [np.zeros(2)] + [rng.stream(cfg.seed, _S_SPREAD, d.toordinal(), m).normal(size=2)
                                   for m in range(1, cfg.n_members)]
        disp = np.concatenate([base_disp + cfg.member_spread_px * sp * cfg.obs_cell_km for sp in spreads])
        times = [_abs_hours(d, h - bias.timing_shift_hours) for h in hours] * cfg.n_members
        all_hourly = cover_map(weather.raw_many(xs, ys, times, disp[:, 0], disp[:, 1]))
        for m in range(cfg.n_members):
            noise = rng.stream(cfg.seed, _S_COARSE_NOISE, d.toordinal(), m)
            hourly = all_hourly[m * len(hours):(m + 1) * len(hours)]
            amounts = []
            for k in range(len(steps)):
                block = bias.amplitude_scale * hourly[3 * k:3 * k + 3].sum(axis=0)
                if bias.noise_sd > 0:
                    block = np.maximum(block + 3.0 * bias.noise_sd * noise.normal(size=block.shape), 0.0)
                amounts.append(block)
            # 6-hour accumulation windows restart at steps 6k+3
            running = []
            for k, amount in enumerate(amounts):
                running.append(amount if k % 2 == 0 else running[-1] + amount)
            acc = FieldSeries.from_arrays([base + timedelta(hours=s) for s in steps],
                                          np.stack(running).astype(np.float32), geom, None, f"coarse{m}")
            rates = gefs_to_hourly_rate(deaccumulate(acc, window_steps=2))
            for step, (t, raster) in zip(steps, rates.entries):
                if step in wanted:
                    per_member[m][step].append((t, raster.values))
    out = []
    for m, member in enumerate(per_member):
        out.append({
            b: FieldSeries.from_arrays([t for t, _ in rows], np.stack([v for _, v in rows]), geom, b,
                                       "control" if m == 0 else f"member{m}")
            for b, rows in member.items()
        })
    return out


def well_specified_table(n: int, seed: int, n_features: int = 3, intercept: float = -2.5,
                         coefficients=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """I.i.d. rows whose labels are Bernoulli draws from a known logistic
    model; returns (features, labels, true probabilities)."""
    g = rng.stream(seed, 99)
    beta = np.linspace(1.0, 0.3, n_features) if coefficients is None else np.asarray(coefficients, float)
    x = g.normal(size=(n, n_features))
    p = 1.0 / (1.0 + np.exp(-(intercept + x @ beta)))
    y = (g.uniform(size=n) < p).astype(np.int8)
    return x, y, p


# --------------------------------------------------------------------------
# config dictionaries and on-disk scenarios


_NESTED = {"fine": BiasSpec, "coarse": BiasSpec, "mask_holes": MaskHoleSpec}


def config_to_dict(cfg: ScenarioConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            v = {k: list(x) if isinstance(x, tuple) else x for k, x in dataclasses.asdict(v).items()}
        elif isinstance(v, date):
            v = v.isoformat()
        elif isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, dict):
            v = {repr(float(k)): float(x) for k, x in v.items()}
        out[f.name] = v
    return out


def config_from_dict(values: dict) -> ScenarioConfig:
    """Inverse of :func:`config_to_dict`; partial dictionaries fill in the
    defaults and unknown keys raise ``ValueError``."""
    known = {f.name for f in dataclasses.fields(ScenarioConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown scenario keys: {', '.join(unknown)}")
    kwargs = {}
    for k, v in values.items():
        if k in _NESTED:
            sub = {f.name for f in dataclasses.fields(_NESTED[k])}
            bad = sorted(set(v) - sub)
            if bad:
                raise ValueError(f"unknown {k} keys: {', '.join(bad)}")
            v = _NESTED[k](**{a: tuple(b) if isinstance(b, list) else b for a, b in v.items()})
        elif k == "start_date" and isinstance(v, str):
            v = date.fromisoformat(v)
        elif k == "target_cover":
            v = {float(a): float(b) for a, b in v.items()}
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return ScenarioConfig(**kwargs)


@dataclass(frozen=True)
class StoredScenario:
    """A scenario read back from disk: everything feature building needs,
    without the generating weather."""

    config: ScenarioConfig
    days: tuple[date, ...]
    observations: FieldSeries
    fine_deterministic: dict[int, FieldSeries]
    coarse_members: list[dict[int, FieldSeries]]
    mask: Mask
    achieved_cover: dict[float, float]


def save_scenario(scenario, directory) -> Path:
    """Write series files, the mask and ``manifest.json``; returns the
    manifest path.  File contents depend only on the scenario."""
    out = Path(directory)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory {out} does not exist")
    files = {"observations": "obs.series", "mask": "mask.grid", "fine": {}, "coarse": []}
    save_series(out / "obs.series", scenario.observations)
    save_mask(out / "mask.grid", scenario.mask)
    for lead, series in sorted(scenario.fine_deterministic.items()):
        name = f"fine_l{lead:02d}.series"
        save_series(out / name, series)
        files["fine"][str(lead)] = name
    for m, member in enumerate(scenario.coarse_members):
        names = {}
        for step, series in sorted(member.items()):
            name = f"coarse_m{m:02d}_s{step:02d}.series"
            save_series(out / name, series)
            names[str(step)] = name
        files["coarse"].append(names)
    manifest = {
        "config": config_to_dict(scenario.config),
        "days": [d.isoformat() for d in scenario.days],
        "achieved_cover": {repr(float(h)): c for h, c in sorted(scenario.achieved_cover.items())},
        "files": files,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_scenario(directory) -> StoredScenario:
    src = Path(directory)
    manifest = json.loads((src / "manifest.json").read_text())
    files = manifest["files"]
    fine = {int(k): load_series(src / v, int(k), "fine") for k, v in files["fine"].items()}
    coarse = [{int(k): load_series(src / v, int(k), "control" if m == 0 else f"member{m}")
               for k, v in member.items()} for m, member in enumerate(files["coarse"])]
    return StoredScenario(config_from_dict(manifest["config"]),
                          tuple(date.fromisoformat(d) for d in manifest["days"]),
                          load_series(src / files["observations"], None, "obs"), fine, coarse,
                          load_mask(src / files["mask"]),
                          {float(k): float(v) for k, v in manifest["achieved_cover"].items()})
