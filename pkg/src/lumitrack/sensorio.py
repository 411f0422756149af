"""Sensor logs, weather-station storage and the remote weather contract.

Sensor log CSV::

    timestamp_utc,light_lux,temp_c
    2018-09-01T00:00:00Z,0.1,17.3
    2018-09-01T00:00:10Z,0.1,

Either value cell may be empty; a row contributes to each series whose cell
is filled.  Weather CSV::

    station_id,lat,lon,timestamp_utc,temp_c
"""
from __future__ import annotations

import io
import logging
import os
import urllib.parse
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np
import pandas as pd

from .astro import GeoCoord, NightWindow
from .errors import CoverageError, InputError, LumitrackError
from .io_utils import atomic_write

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088
HOUR = 3600
MAX_STATION_GAP = 2 * HOUR  # seconds between available samples
SENSOR_HEADER = ["timestamp_utc", "light_lux", "temp_c"]
WEATHER_HEADER = ["station_id", "lat", "lon", "timestamp_utc", "temp_c"]
KEY_ENV = "LUMITRACK_WEATHER_KEY"


class SensorLogError(InputError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class WeatherValidationError(InputError):
    pass


class FetchError(LumitrackError):
    """Transport failure while fetching remote weather.  Safe to retry."""
    retryable = True


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance; broadcasts over numpy arrays."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dp / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def great_circle_deg(lat1, lon1, lat2, lon2):
    return np.degrees(haversine_km(lat1, lon1, lat2, lon2) / EARTH_RADIUS_KM)


@dataclass(frozen=True)
class Region:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self):
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise InputError(f"degenerate region {self}")
        if self.lat_min < -90 or self.lat_max > 90 or self.lon_min < -180 or self.lon_max > 180:
            raise InputError(f"region {self} outside the globe")

    def contains(self, lat, lon):
        return ((lat >= self.lat_min) & (lat <= self.lat_max)
                & (lon >= self.lon_min) & (lon <= self.lon_max))

    def expanded(self, margin: float) -> "Region":
        return Region(max(-90.0, self.lat_min - margin), min(90.0, self.lat_max + margin),
                      max(-180.0, self.lon_min - margin), min(180.0, self.lon_max + margin))


def _strictly_increasing(t):
    return t.size < 2 or bool(np.all(np.diff(t) > 0))


@dataclass(eq=False)
class SensorLog:
    """One deployment: light (lux) and temperature (deg C) series.

    Times are POSIX seconds (float64, UTC).
    """
    id: str
    light_t: np.ndarray
    light_lux: np.ndarray
    temp_t: np.ndarray
    temp_c: np.ndarray
    truth: GeoCoord | None = None

    def __post_init__(self):
        for name in ("light_t", "light_lux", "temp_t", "temp_c"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.light_t.size == 0 or self.temp_t.size == 0:
            raise InputError(f"sensor {self.id}: empty series")
        if self.light_t.shape != self.light_lux.shape or self.temp_t.shape != self.temp_c.shape:
            raise InputError(f"sensor {self.id}: time/value length mismatch")
        if not (_strictly_increasing(self.light_t) and _strictly_increasing(self.temp_t)):
            raise InputError(f"sensor {self.id}: timestamps not strictly increasing")
        if np.any(self.light_lux < 0) or not np.all(np.isfinite(self.light_lux)):
            raise InputError(f"sensor {self.id}: lux must be finite and non-negative")
        if not np.all(np.isfinite(self.temp_c)):
            raise InputError(f"sensor {self.id}: non-finite temperature")

    def __eq__(self, other):
        if not isinstance(other, SensorLog):
            return NotImplemented
        return (self.id == other.id and self.truth == other.truth
                and all(np.array_equal(getattr(self, n), getattr(other, n))
                        for n in ("light_t", "light_lux", "temp_t", "temp_c")))


def _format_times(t: np.ndarray) -> np.ndarray:
    ms = np.round(np.asarray(t) * 1000).astype("int64")
    whole = np.all(ms % 1000 == 0)
    unit = "s" if whole else "ms"
    stamps = np.datetime_as_string(ms.astype("datetime64[ms]"), unit=unit)
    return np.char.add(stamps, "Z")


def _parse_times(col: pd.Series, first_line: int, err=SensorLogError) -> np.ndarray:
    parsed = pd.to_datetime(col, format="ISO8601", utc=True, errors="coerce")
    bad = np.flatnonzero(parsed.isna().to_numpy())
    if bad.size:
        i = int(bad[0])
        raise err(f"unparseable timestamp {col.iloc[i]!r}", first_line + i)
    ns = parsed.to_numpy(dtype="datetime64[ns]").astype("int64")
    return ns / 1e9


def _parse_numbers(col: pd.Series, name: str, first_line: int, allow_empty: bool) -> np.ndarray:
    raw = col.fillna("").astype(str).str.strip()
    empty = (raw == "").to_numpy()
    vals = pd.to_numeric(raw.where(~empty, None), errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~empty & ~np.isfinite(vals))
    if bad.size:
        i = int(bad[0])
        raise SensorLogError(f"bad {name} value {raw.iloc[i]!r}", first_line + i)
    if not allow_empty and empty.any():
        i = int(np.flatnonzero(empty)[0])
        raise SensorLogError(f"missing {name}", first_line + i)
    # pandas' fast parser is not correctly rounded; numpy's is
    vals[~empty] = raw.to_numpy()[~empty].astype(float)
    return vals


def _read_table(data, header, err):
    if isinstance(data, (bytes, bytearray)):
        data = io.BytesIO(data)
    try:
        frame = pd.read_csv(data, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise err(f"malformed CSV: {exc}", None) from exc
    except pd.errors.EmptyDataError:
        raise err("empty file", 1)
    if list(frame.columns) != header:
        raise err(f"header must be {','.join(header)}, got {','.join(map(str, frame.columns))}", 1)
    return frame


def parse_sensor_log(data, sensor_id: str = "sensor", truth: GeoCoord | None = None) -> SensorLog:
    """Parse sensor-log CSV (bytes, path or file object).

    Raises SensorLogError naming the first offending line (header is line 1).
    """
    frame = _read_table(data, SENSOR_HEADER, SensorLogError)
    if frame.empty:
        raise SensorLogError("no data rows", 2)
    t = _parse_times(frame["timestamp_utc"], 2)
    lux = _parse_numbers(frame["light_lux"], "light_lux", 2, allow_empty=True)
    temp = _parse_numbers(frame["temp_c"], "temp_c", 2, allow_empty=True)
    both_empty = np.flatnonzero(np.isnan(lux) & np.isnan(temp))
    if both_empty.size:
        raise SensorLogError("row has neither light nor temperature", 2 + int(both_empty[0]))
    neg = np.flatnonzero(lux < 0)
    if neg.size:
        raise SensorLogError(f"negative lux {lux[neg[0]]}", 2 + int(neg[0]))
    for mask in (~np.isnan(lux), ~np.isnan(temp)):
        rows = np.flatnonzero(mask)
        steps = np.diff(t[rows])
        bad = np.flatnonzero(steps <= 0)
        if bad.size:
            raise SensorLogError("timestamps not strictly increasing", 2 + int(rows[bad[0] + 1]))
    has_l, has_t = ~np.isnan(lux), ~np.isnan(temp)
    if not has_l.any() or not has_t.any():
        raise SensorLogError("log needs both light and temperature samples", None)
    return SensorLog(sensor_id, t[has_l], lux[has_l], t[has_t], temp[has_t], truth)


def _emit(text: str, dest) -> None:
    if isinstance(dest, (str, os.PathLike)):
        atomic_write(Path(dest), text)
    else:
        dest.write(text)


def write_sensor_log(log: SensorLog, dest) -> None:
    """Write ``log`` as sensor CSV.  Floats use shortest round-trip repr."""
    times = np.union1d(log.light_t, log.temp_t)
    lux = np.full(times.shape, np.nan)
    temp = np.full(times.shape, np.nan)
    lux[np.searchsorted(times, log.light_t)] = log.light_lux
    temp[np.searchsorted(times, log.temp_t)] = log.temp_c
    frame = pd.DataFrame({"timestamp_utc": _format_times(times), "light_lux": lux, "temp_c": temp})
    _emit(frame.to_csv(index=False, na_rep="", lineterminator="\n"), dest)


@dataclass(eq=False)
class WeatherStationSeries:
    """Hourly station temperatures; ``times`` are whole-hour POSIX seconds."""
    station_id: str
    location: GeoCoord
    times: np.ndarray
    temps: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype="int64")
        self.temps = np.asarray(self.temps, dtype=float)
        if self.times.shape != self.temps.shape or self.times.size == 0:
            raise WeatherValidationError(f"station {self.station_id}: empty or mismatched series")
        if np.any(self.times % HOUR):
            raise WeatherValidationError(f"station {self.station_id}: timestamps off the hour")
        if not _strictly_increasing(self.times):
            raise WeatherValidationError(f"station {self.station_id}: timestamps not increasing")
        if not np.all(np.isfinite(self.temps)):
            raise WeatherValidationError(f"station {self.station_id}: non-finite temperature")

    def sample(self, when: np.ndarray) -> np.ndarray:
        """Linear interpolation at ``when``; CoverageError across gaps > 2 h."""
        when = np.asarray(when, dtype=float)
        t = self.times
        if when.min() < t[0] or when.max() > t[-1]:
            raise CoverageError(f"station {self.station_id}: no data for requested span")
        lo = np.searchsorted(t, when, side="right") - 1
        hi = np.minimum(lo + 1, t.size - 1)
        on_sample = t[lo] == when
        if np.any(~on_sample & (t[hi] - t[lo] > MAX_STATION_GAP)):
            raise CoverageError(f"station {self.station_id}: data gap over 2 h in requested span")
        return np.interp(when, t, self.temps)


class WeatherStore:
    """Station series indexed by id with brute-force great-circle lookup.

    Read-only after construction/merge, so concurrent readers are safe.
    """

    def __init__(self, series: Iterable[WeatherStationSeries] = ()):
        self._series: dict[str, WeatherStationSeries] = {}
        self._index = None
        for s in series:
            self.add(s)

    def add(self, series: WeatherStationSeries) -> None:
        if series.station_id in self._series:
            raise WeatherValidationError(f"duplicate station id {series.station_id}")
        self._series[series.station_id] = series
        self._index = None

    def __len__(self):
        return len(self._series)

    def __contains__(self, station_id):
        return station_id in self._series

    def __getitem__(self, station_id) -> WeatherStationSeries:
        try:
            return self._series[station_id]
        except KeyError:
            raise InputError(f"unknown station {station_id!r}") from None

    def __iter__(self):
        return iter(self._series[k] for k in self.ids)

    @property
    def ids(self) -> list[str]:
        return sorted(self._series)

    def _coords(self):
        if self._index is None:
            ids = self.ids
            lat = np.array([self._series[k].location.lat for k in ids])
            lon = np.array([self._series[k].location.lon for k in ids])
            self._index = (ids, lat, lon)
        return self._index

    def nearest_indices(self, lat, lon):
        """Vectorised nearest-station lookup: (index into ``ids``, distance km)."""
        if not self._series:
            raise InputError("weather store is empty")
        ids, slat, slon = self._coords()
        lat, lon = np.broadcast_arrays(np.asarray(lat, dtype=float), np.asarray(lon, dtype=float))
        flat_lat, flat_lon = lat.ravel(), lon.ravel()
        idx = np.empty(flat_lat.size, dtype=np.intp)
        dist = np.empty(flat_lat.size)
        chunk = max(1, 4_000_000 // len(ids))
        for s in range(0, flat_lat.size, chunk):
            d = haversine_km(flat_lat[s:s + chunk, None], flat_lon[s:s + chunk, None], slat, slon)
            # ids are sorted, argmin takes the first minimum: lexicographic tie-break
            idx[s:s + chunk] = np.argmin(d, axis=-1)
            dist[s:s + chunk] = d[np.arange(d.shape[0]), idx[s:s + chunk]]
        if lat.ndim == 0:
            return idx[0], dist[0]
        return idx.reshape(lat.shape), dist.reshape(lat.shape)

    def __eq__(self, other):
        if not isinstance(other, WeatherStore) or self.ids != other.ids:
            return False
        for a, b in zip(self, other):
            if (a.location != b.location or not np.array_equal(a.times, b.times)
                    or not np.array_equal(a.temps, b.temps)):
                return False
        return True


def nearest_station(store: WeatherStore, coord: GeoCoord) -> str:
    idx, _ = store.nearest_indices(coord.lat, coord.lon)
    return store.ids[int(idx)]


def station_night_series(store: WeatherStore, station_id: str, window: NightWindow,
                         half_span: float = 8 * HOUR) -> np.ndarray:
    """Station temperatures at whole-hour offsets from the night center."""
    n = int(round(half_span / HOUR))
    offsets = np.arange(-n, n + 1) * HOUR
    return store[station_id].sample(window.center + offsets)


# -- weather CSV -------------------------------------------------------------

def _rows_to_series(frame: pd.DataFrame) -> list[WeatherStationSeries]:
    """Group validated rows into series, keeping the first of duplicate hours."""
    frame = frame.drop_duplicates(subset=["station_id", "t"], keep="first")
    out = []
    for sid, grp in frame.groupby("station_id", sort=True):
        lats, lons = grp["lat"].unique(), grp["lon"].unique()
        if lats.size != 1 or lons.size != 1:
            raise WeatherValidationError(f"station {sid}: inconsistent location")
        grp = grp.sort_values("t", kind="stable")
        out.append(WeatherStationSeries(str(sid), GeoCoord(float(lats[0]), float(lons[0])),
                                        grp["t"].to_numpy(), grp["temp_c"].to_numpy()))
    return out


def parse_weather_csv(data) -> list[WeatherStationSeries]:
    def err(msg, line):
        return WeatherValidationError(msg if line is None else f"line {line}: {msg}")

    frame = _read_table(data, WEATHER_HEADER, err)
    t = _parse_times(frame["timestamp_utc"], 2, err=err)
    out = pd.DataFrame({"station_id": frame["station_id"].astype(str)})
    for col in ("lat", "lon", "temp_c"):
        vals = pd.to_numeric(frame[col], errors="coerce").to_numpy(dtype=float)
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            raise err(f"bad {col} value {frame[col].iloc[bad[0]]!r}", 2 + int(bad[0]))
        out[col] = frame[col].to_numpy().astype(float)
    if np.any(np.round(t) % HOUR):
        bad = int(np.flatnonzero(np.round(t) % HOUR)[0])
        raise err("timestamp not on the hour", 2 + bad)
    out["t"] = np.round(t).astype("int64")
    return _rows_to_series(out)


def write_weather_csv(store: WeatherStore, dest) -> None:
    parts = []
    for s in store:
        parts.append(pd.DataFrame({
            "station_id": s.station_id, "lat": s.location.lat, "lon": s.location.lon,
            "timestamp_utc": _format_times(s.times.astype(float)), "temp_c": s.temps}))
    frame = pd.concat(parts) if parts else pd.DataFrame(columns=WEATHER_HEADER)
    _emit(frame.to_csv(index=False, lineterminator="\n"), dest)


# -- remote fetch contract ---------------------------------------------------

class WeatherFetcher(Protocol):
    def fetch(self, region: Region, start: float, end: float) -> Iterable[WeatherStationSeries]:
        """Series for stations inside ``region`` covering [start, end] (POSIX s)."""


@dataclass
class FileWeatherFetcher:
    """Default fetcher: reads every ``*.csv`` weather file in a directory."""
    directory: Path

    def fetch(self, region, start, end):
        files = sorted(Path(self.directory).glob("*.csv"))
        for path in files:
            for s in parse_weather_csv(path):
                yield s


@dataclass
class HttpWeatherFetcher:
    """Fetch weather CSV over HTTP.

    ``url_template`` is formatted with lat_min, lat_max, lon_min, lon_max,
    start and end (POSIX seconds).  The API key is read from
    ``LUMITRACK_WEATHER_KEY`` and sent as the ``key`` query parameter.
    """
    url_template: str
    timeout: float = 30.0
    opener: object = field(default=None, repr=False)

    def fetch(self, region, start, end):
        key = os.environ.get(KEY_ENV)
        if not key:
            raise InputError(f"{KEY_ENV} is not set")
        url = self.url_template.format(lat_min=region.lat_min, lat_max=region.lat_max,
                                       lon_min=region.lon_min, lon_max=region.lon_max,
                                       start=int(start), end=int(end))
        sep = "&" if "?" in url else "?"
        full = url + sep + urllib.parse.urlencode({"key": key})
        opener = self.opener or urllib.request.urlopen
        log.info("fetching weather from %s", url)  # never the keyed URL
        try:
            with opener(full, timeout=self.timeout) as resp:
                body = resp.read()
        except OSError as exc:
            raise FetchError(f"weather fetch failed: {type(exc).__name__}") from None
        return parse_weather_csv(body)


def fetch_remote_weather(fetcher: WeatherFetcher, region: Region, start: float, end: float,
                         store: WeatherStore | None = None) -> WeatherStore:
    """Validate fetched series, keep stations in ``region`` and merge into ``store``.

    Rows for an existing (station, hour) are dropped in favour of the first
    one seen; that includes rows already in ``store``.
    """
    store = WeatherStore() if store is None else store
    fetched = list(fetcher.fetch(region, start, end))
    rows = []
    for s in fetched:
        if not region.contains(s.location.lat, s.location.lon):
            continue
        keep = (s.times >= start - HOUR) & (s.times <= end + HOUR)
        if keep.any():
            rows.append(pd.DataFrame({"station_id": s.station_id, "lat": s.location.lat,
                                      "lon": s.location.lon, "t": s.times[keep],
                                      "temp_c": s.temps[keep]}))
    if not rows:
        return store
    frame = pd.concat(rows, ignore_index=True)
    existing = [sid for sid in frame["station_id"].unique() if sid in store]
    if existing:
        prior = pd.concat(pd.DataFrame({"station_id": s.station_id, "lat": s.location.lat,
                                        "lon": s.location.lon, "t": s.times, "temp_c": s.temps})
                          for s in (store[sid] for sid in existing))
        frame = pd.concat([prior, frame], ignore_index=True)
    for series in _rows_to_series(frame):
        if series.station_id in store:
            store._series[series.station_id] = series
            store._index = None
        else:
            store.add(series)
    return store
