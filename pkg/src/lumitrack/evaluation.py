"""Per-interval localization errors for the baseline, light-only and fused methods."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd

from . import localization as L
from .astro import GeoCoord
from .errors import InputError, LumitrackError
from .io_utils import atomic_write
from .reshape import preprocess_log

log = logging.getLogger(__name__)

METHODS = ("baseline", "light", "fused")
ORACLE = "oracle"

# half-month buckets as (label, month, first day, last day)
HALF_MONTHS = (
    ("Sep 1-15", 9, 1, 15), ("Sep 16-30", 9, 16, 30),
    ("Oct 1-15", 10, 1, 15), ("Oct 16-31", 10, 16, 31),
    ("Nov 1-15", 11, 1, 15), ("Nov 16-30", 11, 16, 30),
    ("Dec 1-15", 12, 1, 15), ("Dec 16-31", 12, 16, 31),
)
EQUINOX_DAY = (9, 22)
EQUINOX_HALF_WINDOW = 7  # days


def bucket_of(d: date, intervals=HALF_MONTHS) -> str | None:
    for label, month, lo, hi in intervals:
        if d.month == month and lo <= d.day <= hi:
            return label
    return None


def equinox_bucket(intervals=HALF_MONTHS) -> str:
    return bucket_of(date(2018, *EQUINOX_DAY), intervals)


def near_equinox(d: date, half_window: int = EQUINOX_HALF_WINDOW) -> bool:
    return abs((d - date(d.year, *EQUINOX_DAY)).days) <= half_window


def lon_error(est, truth):
    """Signed longitude difference wrapped into [-180, 180)."""
    return (np.asarray(est) - np.asarray(truth) + 180.0) % 360.0 - 180.0


@dataclass
class Localizer:
    """Trained models plus grid settings; produces per-method daily estimates."""

    light: object = None
    temp: object = None
    threshold: float | None = None
    half_span: float = L.HALF_SPAN
    step: float = L.GRID_STEP
    fine_step: float = L.FINE_STEP

    def grids(self, sensor, store, d: date, reference: GeoCoord, series=None):
        """Interpolated (light, temp, fused) grids for one sensor-day."""
        if self.light is None or self.temp is None:
            raise InputError("grid localization needs both a light and a temperature model")
        series = series if series is not None else preprocess_log(sensor)
        gl = L.evaluate_light_grid(self.light, series, d, reference, self.half_span, self.step)
        gt = L.evaluate_temp_grid(self.temp, sensor, store, d, reference, self.half_span, self.step)
        il = L.interpolate_grid(gl, self.fine_step)
        it = L.interpolate_grid(gt, self.fine_step)
        return il, it, L.fuse(il, it)

    def check(self, methods) -> None:
        """Raise InputError unless every requested method can run."""
        unknown = set(methods) - set(METHODS) - {ORACLE}
        if unknown:
            raise InputError(f"unknown methods {sorted(unknown)}")
        if {"light", "fused"} & set(methods) and (self.light is None or self.temp is None):
            raise InputError("grid localization needs both a light and a temperature model")
        if "baseline" in methods and self.threshold is None:
            raise InputError("baseline needs a calibrated threshold")

    def localize(self, sensor, store, d: date, reference: GeoCoord, methods=METHODS,
                 truth: GeoCoord | None = None, series=None) -> dict:
        """Map method -> (GeoCoord, ill_conditioned) or the exception it raised."""
        self.check(methods)
        series = series if series is not None else preprocess_log(sensor)
        out = {}
        grid_methods = {"light", "fused"} & set(methods)
        if grid_methods:
            try:
                il, _, fused = self.grids(sensor, store, d, reference, series)
                if "light" in methods:
                    e = L.estimate_day(il)
                    out["light"] = (e.coord, e.ill_conditioned)
                if "fused" in methods:
                    e = L.estimate_day(fused)
                    out["fused"] = (e.coord, e.ill_conditioned)
            except LumitrackError as exc:
                for m in grid_methods:
                    out[m] = exc
        if "baseline" in methods:
            try:
                b = L.baseline_localize(series, d, self.threshold)
                out["baseline"] = (b.coord, b.ill_conditioned)
            except LumitrackError as exc:
                out["baseline"] = exc
        if ORACLE in methods:
            if truth is None:
                raise InputError("oracle method needs the true position")
            out[ORACLE] = (truth, False)
        return out


@dataclass
class EvalReport:
    rows: pd.DataFrame      # interval, method, lat_mae, lon_mae, n_days
    days: pd.DataFrame      # one row per (sensor-day, method)
    dropped: pd.DataFrame   # sensor_id, date, method, reason
    config: dict = field(default_factory=dict)
    seed: int = 0

    def mae(self, method: str, mask=None) -> tuple[float, float, int]:
        """(lat MAE, lon MAE, n) over evaluated days of ``method`` (optionally masked)."""
        g = self.days[self.days["method"] == method]
        if mask is not None:
            g = g[mask(g)]
        if g.empty:
            return float("nan"), float("nan"), 0
        return float(g["lat_err"].abs().mean()), float(g["lon_err"].abs().mean()), len(g)

    def equinox_mae(self, method: str, half_window: int = EQUINOX_HALF_WINDOW):
        return self.mae(method, lambda g: g["date"].map(lambda d: near_equinox(d, half_window)))

    def bucket(self, label: str, method: str):
        r = self.rows[(self.rows["interval"] == label) & (self.rows["method"] == method)]
        return r.iloc[0] if len(r) else None

    def non_equinox_average(self, method: str) -> tuple[float, float]:
        """Mean of per-bucket MAEs over all buckets except the equinox one."""
        r = self.rows[(self.rows["method"] == method) & (self.rows["interval"] != self.config.get(
            "equinox_bucket", equinox_bucket())) & (self.rows["n_days"] > 0)]
        return float(r["lat_mae"].mean()), float(r["lon_mae"].mean())

    def to_csv(self) -> str:
        return self.rows.to_csv(index=False, float_format="%.6f", lineterminator="\n")

    def to_json(self) -> str:
        def records(df):
            out = df.copy()
            if "date" in out:
                out["date"] = out["date"].map(lambda d: d.isoformat())
            return out.to_dict(orient="records")

        doc = {"seed": self.seed, "config": self.config, "intervals": records(self.rows),
               "days": records(self.days), "dropped": records(self.dropped)}
        return json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n"

    def write(self, out_dir: Path, stem: str = "eval_report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
        atomic_write(csv_path, self.to_csv())
        atomic_write(json_path, self.to_json())
        return csv_path, json_path


def run_eval(world, days: pd.DataFrame, localizer: Localizer, methods=METHODS,
             intervals=HALF_MONTHS, seed: int = 0, config: dict | None = None,
             progress=None) -> EvalReport:
    """Localize every listed sensor-day with every method and aggregate errors.

    The grid reference is the ground truth of each day.  Days a method cannot
    handle (coverage or degenerate grids) are listed in ``dropped``.
    """
    if days.empty:
        raise InputError("no test days to evaluate")
    localizer.check(methods)
    records, dropped = [], []
    for sid, g in days.groupby("sensor_id", sort=True):
        sensor = world.logs.by_id(sid)
        series = preprocess_log(sensor)
        for r in g.sort_values("date").itertuples():
            truth = GeoCoord(float(r.true_lat), float(r.true_lon))
            res = localizer.localize(sensor, world.store, r.date, truth, methods, truth, series)
            for m in methods:
                val = res[m]
                if isinstance(val, Exception):
                    dropped.append((sid, r.date, m, f"{type(val).__name__}: {val}"))
                    continue
                coord, ill = val
                records.append((sid, r.date, m, bucket_of(r.date, intervals), coord.lat, coord.lon,
                                coord.lat - truth.lat, float(lon_error(coord.lon, truth.lon)), bool(ill)))
            if progress:
                progress(sid, r.date)
    cols = ["sensor_id", "date", "method", "interval", "est_lat", "est_lon", "lat_err", "lon_err",
            "ill_conditioned"]
    per_day = pd.DataFrame(records, columns=cols)
    rows = []
    for label, *_ in intervals:
        for m in methods:
            sel = per_day[(per_day["interval"] == label) & (per_day["method"] == m)]
            n = len(sel)
            rows.append((label, m, float(sel["lat_err"].abs().mean()) if n else float("nan"),
                         float(sel["lon_err"].abs().mean()) if n else float("nan"), n))
    table = pd.DataFrame(rows, columns=["interval", "method", "lat_mae", "lon_mae", "n_days"])
    outside = per_day["interval"].isna().sum()
    if outside:
        log.warning("%d evaluated sensor-days fall outside every interval", outside)
    cfg = dict(config or {})
    cfg.setdefault("equinox_bucket", equinox_bucket(intervals))
    cfg.update({"methods": list(methods), "half_span": localizer.half_span, "step": localizer.step,
                "fine_step": localizer.fine_step, "threshold": localizer.threshold})
    return EvalReport(table, per_day,
                      pd.DataFrame(dropped, columns=["sensor_id", "date", "method", "reason"]), cfg, seed)


def export_heatmaps(out_dir: Path, localizer: Localizer, sensor, store, d: date,
                    reference: GeoCoord, stem: str | None = None):
    """Write light/temp/fused grids as CSV and PGM; returns (paths, fused estimate)."""
    out_dir = Path(out_dir)
    stem = stem or f"{sensor.id}_{d.isoformat()}"
    grids = dict(zip(("light", "temp", "fused"), localizer.grids(sensor, store, d, reference)))
    paths = []
    for name, g in grids.items():
        paths.append(atomic_write(out_dir / f"{stem}_{name}.csv", L.grid_csv(g)))
        paths.append(atomic_write(out_dir / f"{stem}_{name}.pgm", L.grid_pgm(g)))
    return paths, L.estimate_day(grids["fused"])
