"""Synthetic world: stationary light/temperature loggers plus a station network.

Every constant of the generative model lives in this module.  Nothing here is
fitted to real data; the model is built so that temperature carries latitude
information and light is corrupted by slowly varying cloud attenuation.

Random streams are split by hashing: ``child_seed(seed, tag)`` takes the first
8 bytes (little-endian) of SHA-256 over ``f"{seed}:{tag}"``.  Tags are the
sensor id, ``"station:" + id``, ``"layout"``, ``"stations"`` and
``"microclimate"``, so any single sensor can be regenerated on its own.
"""
from __future__ import annotations

import functools
import hashlib
import json
import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.interpolate import PchipInterpolator
from scipy.signal import lfilter

from . import astro
from .astro import GeoCoord
from .errors import InputError
from .io_utils import atomic_write
from .sensorio import (
    EARTH_RADIUS_KM,
    Region,
    SensorLog,
    WeatherStationSeries,
    WeatherStore,
    parse_sensor_log,
    parse_weather_csv,
    write_sensor_log,
    write_weather_csv,
)

log = logging.getLogger(__name__)

L_MAX = 100_000.0  # lux, clear-sky overhead sun
NIGHT_FLOOR = 0.1  # lux
LIGHT_STEP = 10  # s
TEMP_STEP = 15  # s
CLOUD_TAU = 45 * 60.0  # s, attenuation correlation time

# log10(lux) against solar elevation (deg).  Twilight climbs to ~1000 lux at
# sunrise, then the direct beam lifts the curve to half of L_MAX within half a
# degree.  Below -9 deg the night floor applies.
_LIGHT_KNOTS = np.array([
    [-9.0, -1.0],
    [-6.0, 0.4],
    [-3.0, 1.8],
    [-0.833, 3.0],
    [-0.4, np.log10(0.5 * L_MAX)],
    [1.0, 4.9],
    [5.0, 4.98],
    [15.0, 5.0],
])
_log_lux = PchipInterpolator(_LIGHT_KNOTS[:, 0], _LIGHT_KNOTS[:, 1], extrapolate=False)

TEMP_BASE = 30.0  # deg C at lat 25 on Sep 1
TEMP_LAT_GRADIENT = -0.7  # deg C per degree latitude
TEMP_SEASON_TREND = -0.08  # deg C per day since Sep 1
TEMP_AMPLITUDE = 6.0  # deg C, diurnal
TEMP_PEAK_HOUR = 15.0  # apparent solar time of the daily maximum
MICRO_SD = 1.5  # deg C
MICRO_LENGTH = 2.0  # degrees
STATION_NOISE_SD = 0.3  # deg C
COVERAGE_DEG = 3.0


def child_seed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def child_rng(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(child_seed(seed, tag))


# -- light -------------------------------------------------------------------

def lux_from_elevation(elev):
    elev = np.asarray(elev, dtype=float)
    logl = _log_lux(np.clip(elev, _LIGHT_KNOTS[0, 0], _LIGHT_KNOTS[-1, 0]))
    return 10.0 ** logl


def clear_sky_light(coord: GeoCoord, instant):
    """Clear-sky illuminance (lux) at POSIX ``instant`` (scalar or array)."""
    out = lux_from_elevation(astro.solar_elevation(coord.lat, coord.lon, instant))
    return float(out) if np.ndim(out) == 0 else out


def cloud_attenuation(n: int, step: float, cloud_strength: float, rng) -> np.ndarray:
    """Multiplicative attenuation: exp of a stationary AR(1) log process."""
    if cloud_strength == 0:
        return np.ones(n)
    phi = np.exp(-step / CLOUD_TAU)
    sd = cloud_strength * 1.0
    shocks = rng.standard_normal(n) * sd * np.sqrt(1 - phi * phi)
    shocks[0] = rng.standard_normal() * sd
    return np.exp(lfilter([1.0], [1.0, -phi], shocks))


def light_series(coord: GeoCoord, t: np.ndarray, cloud_strength: float, rng) -> np.ndarray:
    """Cloud-attenuated lux at regularly spaced instants ``t``.

    Attenuation acts on the part of the signal above the night floor, so the
    dark floor itself is never brightened by the log-normal process.
    """
    step = float(t[1] - t[0]) if t.size > 1 else LIGHT_STEP
    excess = np.maximum(clear_sky_light(coord, t) - NIGHT_FLOOR, 0.0)
    return NIGHT_FLOOR + excess * cloud_attenuation(t.size, step, cloud_strength, rng)


def generate_light_curve(coord: GeoCoord, d: date, cloud_strength: float, rng):
    """One UTC day of 10 s light samples: (times, lux)."""
    t = astro.utc_midnight(d) + LIGHT_STEP * np.arange(86400 // LIGHT_STEP, dtype=float)
    return t, light_series(coord, t, cloud_strength, rng)


# -- temperature ---------------------------------------------------------------

@dataclass(frozen=True)
class Microclimate:
    """Smooth Gaussian random field via random Fourier features.

    Covariance is ``sd**2 * exp(-d**2 / (2 * length**2))`` with ``d`` the
    distance in plain (lat, lon) degrees.
    """
    seed: int
    sd: float = MICRO_SD
    length: float = MICRO_LENGTH
    n_features: int = 512

    @functools.cached_property
    def _features(self):
        rng = child_rng(self.seed, "microclimate")
        k = rng.standard_normal((self.n_features, 2)) / self.length
        phase = rng.uniform(0, 2 * np.pi, self.n_features)
        return k, phase

    def __call__(self, lat, lon):
        k, phase = self._features
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        arg = lat[..., None] * k[:, 0] + lon[..., None] * k[:, 1] + phase
        return self.sd * np.sqrt(2.0 / self.n_features) * np.cos(arg).sum(axis=-1)


def _days_since_season_start(posix):
    posix = np.asarray(posix, dtype=float)
    years = (posix * 1e3).astype("int64").astype("datetime64[ms]").astype("datetime64[Y]")
    sep1 = (years.astype("datetime64[D]") + np.timedelta64(243, "D"))
    # Sep 1 is day 244 (245 in leap years)
    leap = (years.astype(int) + 1970) % 4 == 0
    sep1 = sep1 + leap.astype("timedelta64[D]")
    start = sep1.astype("datetime64[s]").astype("int64")
    return (posix - start) / 86400.0


def temperature_field(coord: GeoCoord, instant, micro: Microclimate | None = None):
    """Noise-free air temperature (deg C) at ``coord`` and POSIX ``instant``."""
    return _temperature(coord.lat, coord.lon, instant, micro)


def _temperature(lat, lon, instant, micro):
    day = _days_since_season_start(instant)
    base = TEMP_BASE + TEMP_LAT_GRADIENT * (np.asarray(lat) - 25.0) + TEMP_SEASON_TREND * day
    hour = astro.apparent_solar_hour(lon, instant)
    out = base + TEMP_AMPLITUDE * np.cos(2 * np.pi * (hour - TEMP_PEAK_HOUR) / 24.0)
    if micro is not None:
        out = out + micro(lat, lon)
    return out


# -- world ---------------------------------------------------------------------

DEFAULT_REGION = Region(25.0, 49.0, -125.0, -67.0)


@dataclass(frozen=True)
class SynthConfig:
    n_sensors: int = 82
    region: Region = DEFAULT_REGION
    start: date = date(2018, 9, 1)
    end: date = date(2018, 12, 19)
    n_stations: int = 1800
    station_margin: float = 10.0  # degrees of station coverage beyond region
    cloud_strength: float = 0.5
    temp_noise_sd: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_sensors <= 0 or self.n_stations <= 0:
            raise InputError("n_sensors and n_stations must be positive")
        if self.end <= self.start:
            raise InputError("date range must contain at least one night")
        if not 0.0 <= self.cloud_strength <= 1.0:
            raise InputError("cloud_strength must lie in [0, 1]")
        if self.temp_noise_sd < 0 or self.station_margin < 0:
            raise InputError("temp_noise_sd and station_margin must be non-negative")
        if not 0 <= self.seed < 2 ** 64:
            raise InputError("seed must be a 64-bit unsigned integer")

    @property
    def nights(self) -> list[date]:
        return [self.start + timedelta(days=k) for k in range((self.end - self.start).days)]

    @property
    def span(self) -> tuple[float, float]:
        return astro.utc_midnight(self.start), astro.utc_midnight(self.end + timedelta(days=1))

    def to_json(self) -> dict:
        out = asdict(self)
        out["region"] = asdict(self.region)
        out["start"], out["end"] = self.start.isoformat(), self.end.isoformat()
        return out

    @classmethod
    def from_json(cls, data: dict) -> "SynthConfig":
        data = dict(data)
        data["region"] = Region(**data["region"])
        data["start"] = date.fromisoformat(data["start"])
        data["end"] = date.fromisoformat(data["end"])
        return cls(**data)


def sensor_ids(config: SynthConfig) -> list[str]:
    width = max(3, len(str(config.n_sensors - 1)))
    return [f"S{i:0{width}d}" for i in range(config.n_sensors)]


def sensor_locations(config: SynthConfig) -> list[GeoCoord]:
    rng = child_rng(config.seed, "layout")
    r = config.region
    lat = rng.uniform(r.lat_min, r.lat_max, config.n_sensors)
    lon = rng.uniform(r.lon_min, r.lon_max, config.n_sensors)
    return [GeoCoord(float(a), float(b)) for a, b in zip(lat, lon)]


def station_locations(config: SynthConfig) -> list[tuple[str, GeoCoord]]:
    """Jittered regular grid over the region plus margin."""
    box = config.region.expanded(config.station_margin)
    h, w = box.lat_max - box.lat_min, box.lon_max - box.lon_min
    spacing = np.sqrt(h * w / config.n_stations)
    rows, cols = max(1, round(h / spacing)), max(1, round(w / spacing))
    dlat, dlon = h / rows, w / cols
    rng = child_rng(config.seed, "stations")
    lat = box.lat_min + dlat * (np.arange(rows)[:, None] + 0.5 + rng.uniform(-0.2, 0.2, (rows, cols)))
    lon = box.lon_min + dlon * (np.arange(cols)[None, :] + 0.5 + rng.uniform(-0.2, 0.2, (rows, cols)))
    width = len(str(rows * cols - 1))
    return [(f"W{i:0{width}d}", GeoCoord(float(a), float(b)))
            for i, (a, b) in enumerate(zip(lat.ravel(), lon.ravel()))]


def generate_sensor_log(config: SynthConfig, sensor_id: str, coord: GeoCoord,
                        micro: Microclimate) -> SensorLog:
    rng = child_rng(config.seed, sensor_id)
    t0, t1 = config.span
    lt = t0 + LIGHT_STEP * np.arange(int((t1 - t0) // LIGHT_STEP), dtype=float)
    lux = light_series(coord, lt, config.cloud_strength, rng)
    tt = t0 + TEMP_STEP * np.arange(int((t1 - t0) // TEMP_STEP), dtype=float)
    temp = _temperature(coord.lat, coord.lon, tt, micro) + rng.normal(0, config.temp_noise_sd, tt.size)
    return SensorLog(sensor_id, lt, lux, tt, temp, truth=coord)


def generate_store(config: SynthConfig, micro: Microclimate) -> WeatherStore:
    t0, t1 = config.span
    hours = np.arange(int(t0), int(t1), 3600, dtype="int64")
    series = []
    for sid, loc in station_locations(config):
        rng = child_rng(config.seed, "station:" + sid)
        temps = _temperature(loc.lat, loc.lon, hours.astype(float), micro)
        temps = temps + rng.normal(0, STATION_NOISE_SD, hours.size)
        series.append(WeatherStationSeries(sid, loc, hours, temps))
    return WeatherStore(series)


class SensorLogs(Sequence):
    """Lazily generated (or loaded) sensor logs; a small LRU keeps recent ones."""

    def __init__(self, ids, loader, cache_size: int = 2):
        self.ids = list(ids)
        self._load = functools.lru_cache(maxsize=cache_size)(loader)

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[k] for k in range(*i.indices(len(self)))]
        return self._load(self.ids[i])

    def by_id(self, sensor_id: str) -> SensorLog:
        return self._load(sensor_id)


@dataclass
class SynthWorld:
    config: SynthConfig
    logs: SensorLogs
    store: WeatherStore
    manifest: pd.DataFrame = field(repr=False)
    truths: dict = field(default_factory=dict, repr=False)


def _manifest(ids, coords, nights) -> pd.DataFrame:
    rows = [(sid, d, c.lat, c.lon) for sid, c in zip(ids, coords) for d in nights]
    return pd.DataFrame(rows, columns=["sensor_id", "date", "true_lat", "true_lon"])


def generate_world(config: SynthConfig) -> SynthWorld:
    """Build a deterministic world; sensor logs are generated on access."""
    micro = Microclimate(config.seed)
    ids = sensor_ids(config)
    coords = sensor_locations(config)
    store = generate_store(config, micro)
    _, dist = store.nearest_indices([c.lat for c in coords], [c.lon for c in coords])
    dist_deg = np.degrees(dist / EARTH_RADIUS_KM)
    if np.any(dist_deg > COVERAGE_DEG):
        raise InputError(f"station network leaves a sensor {dist_deg.max():.2f} deg from "
                         f"the nearest station (limit {COVERAGE_DEG}); raise n_stations")
    truths = dict(zip(ids, coords))
    logs = SensorLogs(ids, lambda sid: generate_sensor_log(config, sid, truths[sid], micro))
    return SynthWorld(config, logs, store, _manifest(ids, coords, config.nights), truths)


# -- persistence -----------------------------------------------------------------

def write_world(world: SynthWorld, out_dir: Path) -> None:
    """Sensor CSVs under ``sensors/``, ``weather/weather.csv``, ``manifest.csv``, ``config.json``."""
    out_dir = Path(out_dir)
    (out_dir / "sensors").mkdir(parents=True, exist_ok=True)
    (out_dir / "weather").mkdir(exist_ok=True)
    for sensor in world.logs:
        write_sensor_log(sensor, out_dir / "sensors" / f"{sensor.id}.csv")
    write_weather_csv(world.store, out_dir / "weather" / "weather.csv")
    man = world.manifest.copy()
    man["date"] = [d.isoformat() for d in man["date"]]
    atomic_write(out_dir / "manifest.csv", man.to_csv(index=False, lineterminator="\n"))
    atomic_write(out_dir / "config.json", json.dumps(world.config.to_json(), indent=2, sort_keys=True) + "\n")


def read_world(path: Path) -> SynthWorld:
    """Load a world written by :func:`write_world`; logs are parsed on access."""
    path = Path(path)
    config = SynthConfig.from_json(json.loads((path / "config.json").read_text()))
    man = pd.read_csv(path / "manifest.csv", dtype={"sensor_id": str}, float_precision="round_trip")
    man["date"] = [date.fromisoformat(d) for d in man["date"]]
    first = man.drop_duplicates("sensor_id")
    truths = {r.sensor_id: GeoCoord(float(r.true_lat), float(r.true_lon)) for r in first.itertuples()}
    store = WeatherStore(parse_weather_csv(path / "weather" / "weather.csv"))

    def load(sid):
        return parse_sensor_log(path / "sensors" / f"{sid}.csv", sid, truth=truths[sid])

    return SynthWorld(config, SensorLogs(list(truths), load), store, man, truths)
