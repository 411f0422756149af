"""Night-centred normalisation of light curves and temperature pairing.

The light transform shifts a curve so the candidate night center sits at the
window center, then rescales time uniformly so the candidate night spans
12 hours.  The resulting 961-sample vector (1-min steps over ±8 h of
normalised time) is what the light discriminator sees.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date

import numpy as np

from . import astro
from .astro import GeoCoord, NightWindow
from .errors import CoverageError, InputError
from .sensorio import HOUR, SensorLog, WeatherStore, station_night_series

MINUTE = 60.0
HALF_WINDOW_MIN = 480
N_SAMPLES = 2 * HALF_WINDOW_MIN + 1  # 961
CENTER_INDEX = HALF_WINDOW_MIN
TAU_MINUTES = np.arange(-HALF_WINDOW_MIN, HALF_WINDOW_MIN + 1, dtype=float)
NORMAL_NIGHT = 12 * HOUR
LOG_OFFSET = 0.01  # lux
MAX_MISSING_MINUTES = 30
TEMP_HALF_SPAN_H = 8
N_TEMP = 2 * TEMP_HALF_SPAN_H + 1  # 17


@dataclass(frozen=True)
class MinuteSeries:
    """Regular 1-min log10-lux series; sample k is the mean over minute ``t0 + 60 k``.

    Sample times are minute midpoints: ``times = t0 + 30 + 60 k``.
    """
    t0: float
    values: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.t0 + 0.5 * MINUTE + MINUTE * np.arange(self.values.size)

    @property
    def span(self) -> tuple[float, float]:
        return self.t0 + 0.5 * MINUTE, self.t0 + 0.5 * MINUTE + MINUTE * (self.values.size - 1)


@dataclass(frozen=True)
class NormalizedLightCurve:
    values: np.ndarray
    sensor_id: str = ""
    date: date | None = None
    candidate: GeoCoord | None = None

    def __post_init__(self):
        if self.values.shape != (N_SAMPLES,):
            raise InputError(f"normalised curve must have {N_SAMPLES} samples")
        if not np.all(np.isfinite(self.values)):
            raise InputError("normalised curve contains non-finite values")


@dataclass(frozen=True)
class TempPairVector:
    sensor_part: np.ndarray
    station_part: np.ndarray
    sensor_id: str = ""
    date: date | None = None
    station_id: str = ""
    candidate: GeoCoord | None = None

    def __post_init__(self):
        for part in (self.sensor_part, self.station_part):
            if part.shape != (N_TEMP,) or not np.all(np.isfinite(part)):
                raise InputError(f"temperature parts must be {N_TEMP} finite samples")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.sensor_part, self.station_part])


def _runs(mask: np.ndarray):
    """(start, length) of runs of True in a boolean vector."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return edges[::2], edges[1::2] - edges[::2]


def preprocess_light(t, lux) -> MinuteSeries:
    """Per-minute mean of raw lux, then log10(lux + 0.01).

    Empty minute bins are linearly interpolated; a gap of 30 or more
    consecutive empty minutes raises CoverageError.
    """
    t = np.asarray(t, dtype=float)
    lux = np.asarray(lux, dtype=float)
    if t.size == 0:
        raise InputError("empty light series")
    if np.any(lux < 0) or not np.all(np.isfinite(lux)):
        raise InputError("light values must be finite and non-negative")
    t0 = np.floor(t[0] / MINUTE) * MINUTE
    idx = ((t - t0) // MINUTE).astype(np.int64)
    n = int(idx[-1]) + 1
    counts = np.bincount(idx, minlength=n)
    sums = np.bincount(idx, weights=lux, minlength=n)
    empty = counts == 0
    if empty.any():
        starts, lengths = _runs(empty)
        worst = int(np.argmax(lengths))
        if lengths[worst] >= MAX_MISSING_MINUTES:
            a = t0 + MINUTE * starts[worst]
            raise CoverageError(f"{lengths[worst]} consecutive minutes without light samples "
                                f"from {a:.0f} to {a + MINUTE * lengths[worst]:.0f}")
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = np.log10(sums / counts + LOG_OFFSET)
    if empty.any():
        k = np.arange(n)
        vals[empty] = np.interp(k[empty], k[~empty], vals[~empty])
    return MinuteSeries(float(t0), vals)


def preprocess_log(log: SensorLog) -> MinuteSeries:
    return preprocess_light(log.light_t, log.light_lux)


def raw_times(centers, lengths) -> np.ndarray:
    """Raw instants sampled for each (center, length) window, shape (n, 961)."""
    centers = np.atleast_1d(np.asarray(centers, dtype=float))
    lengths = np.atleast_1d(np.asarray(lengths, dtype=float))
    scale = lengths / NORMAL_NIGHT
    return centers[:, None] + (TAU_MINUTES * MINUTE)[None, :] * scale[:, None]


def reshape_windows(series: MinuteSeries, centers, lengths):
    """Vectorised reshape: returns (curves (n, 961), covered (n,) bool).

    Rows whose raw window leaves the series span are NaN and marked uncovered.
    """
    t = raw_times(centers, lengths)
    lo, hi = series.span
    covered = (t[:, 0] >= lo - 1e-6) & (t[:, -1] <= hi + 1e-6)
    pos = (t - lo) / MINUTE
    pos = np.clip(pos, 0.0, series.values.size - 1.0)
    i0 = np.minimum(np.floor(pos).astype(np.int64), series.values.size - 2)
    frac = pos - i0
    v = series.values
    out = v[i0] * (1.0 - frac) + v[i0 + 1] * frac
    out[~covered] = np.nan
    return out, covered


def reshape_window(series: MinuteSeries, window: NightWindow) -> np.ndarray:
    """Reshape about an explicit night window; CoverageError names the missing span."""
    out, covered = reshape_windows(series, window.center, window.length)
    if not covered[0]:
        t = raw_times(window.center, window.length)[0]
        lo, hi = series.span
        raise CoverageError(f"light series covers [{lo:.0f}, {hi:.0f}] but window needs "
                            f"[{t[0]:.0f}, {t[-1]:.0f}]")
    return out[0]


def reshape_light(series: MinuteSeries, candidate: GeoCoord, d: date,
                  sensor_id: str = "") -> NormalizedLightCurve:
    window = astro.night_window(candidate, d)
    return NormalizedLightCurve(reshape_window(series, window), sensor_id, d, candidate)


def write_curve_csv(curve: NormalizedLightCurve, dest) -> None:
    """Debug dump: ``tau_min,log_lux`` rows."""
    rows = "".join(f"{int(tau)},{v!r}\n" for tau, v in zip(TAU_MINUTES, curve.values.tolist()))
    with open(dest, "w") as fh:
        fh.write("tau_min,log_lux\n" + rows)


# -- temperature ---------------------------------------------------------------

def sensor_hourly_bins(temp_t, temp_c, centers, half_span_h: int = TEMP_HALF_SPAN_H):
    """Mean sensor temperature in 1-h bins centred on whole hours from each center.

    Returns (bins (n, 2h+1), covered (n,) bool); empty bins leave a row uncovered.
    """
    temp_t = np.asarray(temp_t, dtype=float)
    csum = np.concatenate([[0.0], np.cumsum(np.asarray(temp_c, dtype=float))])
    centers = np.atleast_1d(np.asarray(centers, dtype=float))
    k = np.arange(-half_span_h, half_span_h + 1) * HOUR
    mids = centers[:, None] + k[None, :]
    lo = np.searchsorted(temp_t, mids - 0.5 * HOUR, side="left")
    hi = np.searchsorted(temp_t, mids + 0.5 * HOUR, side="left")
    n = hi - lo
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (csum[hi] - csum[lo]) / n
    covered = np.all(n > 0, axis=1)
    out[~covered] = np.nan
    return out, covered


def make_temp_pair(sensor: SensorLog, store: WeatherStore, candidate: GeoCoord,
                   d: date, station_id: str | None = None) -> TempPairVector:
    """Sensor night temperatures paired with the candidate's nearest station.

    ``station_id`` overrides the nearest-station lookup.
    """
    window = astro.night_window(candidate, d)
    if station_id is None:
        idx, _ = store.nearest_indices(candidate.lat, candidate.lon)
        station_id = store.ids[int(idx)]
    bins, covered = sensor_hourly_bins(sensor.temp_t, sensor.temp_c, window.center)
    if not covered[0]:
        raise CoverageError(f"sensor {sensor.id} lacks temperature samples around "
                            f"night center {window.center:.0f}")
    station = station_night_series(store, station_id, window, TEMP_HALF_SPAN_H * HOUR)
    return TempPairVector(bins[0], station, sensor.id, d, station_id, candidate)


def station_parts(store: WeatherStore, station_idx, centers):
    """Station samples for many (station index, center) pairs: ((n, 17), covered)."""
    station_idx = np.asarray(station_idx)
    centers = np.asarray(centers, dtype=float)
    out = np.full((centers.size, N_TEMP), np.nan)
    covered = np.zeros(centers.size, dtype=bool)
    offsets = np.arange(-TEMP_HALF_SPAN_H, TEMP_HALF_SPAN_H + 1) * HOUR
    ids = store.ids
    for s in np.unique(station_idx):
        rows = np.flatnonzero(station_idx == s)
        series = store[ids[int(s)]]
        try:
            out[rows] = series.sample(centers[rows, None] + offsets)
            covered[rows] = True
            continue
        except CoverageError:
            pass
        for r in rows:
            try:
                out[r] = series.sample(centers[r] + offsets)
                covered[r] = True
            except CoverageError:
                pass
    return out, covered


def temp_pair_matrix(sensor: SensorLog, store: WeatherStore, lats, lons, d: date):
    """Vectorised temperature pairs for many candidates.

    Returns (pairs (n, 34), station indices (n,), covered (n,) bool).
    """
    lats = np.asarray(lats, dtype=float)
    lons = np.asarray(lons, dtype=float)
    centers, _ = astro.night_arrays(lats, lons, d)
    idx, _ = store.nearest_indices(lats, lons)
    sens, ok_s = sensor_hourly_bins(sensor.temp_t, sensor.temp_c, np.nan_to_num(centers))
    stat, ok_w = station_parts(store, idx, np.nan_to_num(centers))
    covered = ok_s & ok_w & np.isfinite(centers)
    pairs = np.concatenate([sens, stat], axis=1)
    pairs[~covered] = np.nan
    return pairs, idx, covered
