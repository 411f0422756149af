"""Solar geometry: declination, equation of time, rise/set and night windows.

Sun position comes from the low-precision ephemeris of the Astronomical
Almanac (mean longitude / mean anomaly series, good to ~0.01 degree in
declination and a few seconds in the equation of time).  Rise/set times are
accurate to well under a minute away from the polar circles.

Instants are POSIX seconds (UTC) throughout; dates are ``datetime.date``.
Most internals are vectorised over numpy arrays so that grids of candidate
coordinates can be evaluated in one call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import date, datetime, timedelta, timezone

import numpy as np

from .errors import CoverageError, InputError

ZENITH_RISE_SET = 90.833  # degrees; refraction + solar semi-diameter
SECONDS_PER_DAY = 86400.0
SIDEREAL_RATE = 15.0  # degrees of longitude per hour of clock time

# |dL/dlat| below this (minutes per degree) makes latitude unobservable
ILL_CONDITIONED_SLOPE = 1.0

REFERENCE_YEAR = 2018  # default epoch for day-of-year helpers
_POSIX_TO_J2000 = 2440587.5 - 2451545.0


class NoSunEvent(CoverageError):
    """Raised when the sun does not rise or set (polar day or night)."""


@dataclass(frozen=True)
class GeoCoord:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise InputError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise InputError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise InputError(f"longitude {self.lon} outside [-180, 180]")

    def offset(self, dlat: float, dlon: float) -> "GeoCoord":
        """Coordinate displaced by (dlat, dlon) degrees, clamped/wrapped into range."""
        lat = min(90.0, max(-90.0, self.lat + dlat))
        lon = (self.lon + dlon + 180.0) % 360.0 - 180.0
        return GeoCoord(lat, lon)


@dataclass(frozen=True)
class NightWindow:
    """Night following civil date ``date``: sunset(D) to sunrise(D+1).

    ``center`` is POSIX seconds, ``length`` is seconds.
    """
    center: float
    length: float

    def __post_init__(self):
        if not 0.0 < self.length < SECONDS_PER_DAY:
            raise InputError(f"night length {self.length} s outside (0, 24 h)")

    @property
    def sunset(self) -> float:
        return self.center - 0.5 * self.length

    @property
    def sunrise(self) -> float:
        return self.center + 0.5 * self.length

    def shifted(self, dcenter: float = 0.0, dlength: float = 0.0) -> "NightWindow":
        return NightWindow(self.center + dcenter, self.length + dlength)


def day_of_year(d: date) -> int:
    return d.timetuple().tm_yday


def utc_midnight(d: date) -> float:
    return datetime(d.year, d.month, d.day, tzinfo=timezone.utc).timestamp()


def _check_doy(doy):
    arr = np.asarray(doy)
    if np.any((arr < 1) | (arr > 366)):
        raise InputError(f"day_of_year must be in [1, 366], got {doy}")


def _sun_at(posix):
    """(declination rad, equation of time min) at POSIX instants."""
    n = np.asarray(posix, dtype=float) / SECONDS_PER_DAY + _POSIX_TO_J2000
    mean_long = (280.460 + 0.9856474 * n) % 360.0
    anomaly = np.radians((357.528 + 0.9856003 * n) % 360.0)
    ecl_long = np.radians(mean_long + 1.915 * np.sin(anomaly) + 0.020 * np.sin(2 * anomaly))
    obliquity = np.radians(23.439 - 0.0000004 * n)
    decl = np.arcsin(np.sin(obliquity) * np.sin(ecl_long))
    ra = np.degrees(np.arctan2(np.cos(obliquity) * np.sin(ecl_long), np.cos(ecl_long)))
    eot = 4.0 * ((mean_long - ra + 180.0) % 360.0 - 180.0)
    return decl, eot


def _doy_posix(day_of_year, hour, year):
    _check_doy(day_of_year)
    jan1 = utc_midnight(date(year, 1, 1))
    return jan1 + (np.asarray(day_of_year) - 1) * SECONDS_PER_DAY + np.asarray(hour) * 3600.0


def solar_declination(day_of_year: int, hour: float = 12.0, year: int = REFERENCE_YEAR):
    """Solar declination in radians for a day of year at a UTC hour."""
    out = _sun_at(_doy_posix(day_of_year, hour, year))[0]
    return float(out) if np.ndim(out) == 0 else out


def equation_of_time(day_of_year: int, hour: float = 12.0, year: int = REFERENCE_YEAR):
    """Equation of time in minutes (apparent minus mean solar time)."""
    out = _sun_at(_doy_posix(day_of_year, hour, year))[1]
    return float(out) if np.ndim(out) == 0 else out


def solar_elevation(lat, lon, posix):
    """Geometric solar elevation in degrees (no refraction)."""
    decl, eot = _sun_at(posix)
    minutes = (np.asarray(posix, dtype=float) % SECONDS_PER_DAY) / 60.0
    true_solar = minutes + eot + 4.0 * np.asarray(lon)
    ha = np.radians(true_solar / 4.0 - 180.0)
    latr = np.radians(lat)
    s = np.sin(latr) * np.sin(decl) + np.cos(latr) * np.cos(decl) * np.cos(ha)
    return np.degrees(np.arcsin(np.clip(s, -1.0, 1.0)))


def apparent_solar_hour(lon, posix):
    """Local apparent solar time in hours [0, 24)."""
    _, eot = _sun_at(posix)
    minutes = (np.asarray(posix, dtype=float) % SECONDS_PER_DAY) / 60.0
    return ((minutes + eot + 4.0 * np.asarray(lon)) / 60.0) % 24.0


def _event_posix(lat, lon, d: date, rising: bool, iterations: int = 2):
    """Vectorised rise/set instants on civil date ``d``; NaN where no event.

    The solar terms are re-evaluated at the previous estimate of the event
    time, so the declination is that of the event itself.
    """
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    midnight = utc_midnight(d)
    minutes = 720.0 - 4.0 * lon
    cos_z = math.cos(math.radians(ZENITH_RISE_SET))
    latr = np.radians(lat)
    for i in range(iterations + 1):
        decl, eot = _sun_at(midnight + 60.0 * minutes)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos_ha = cos_z / (np.cos(latr) * np.cos(decl)) - np.tan(latr) * np.tan(decl)
        ha = np.degrees(np.arccos(np.where(np.abs(cos_ha) <= 1.0, cos_ha, np.nan)))
        noon = 720.0 - 4.0 * lon - eot
        minutes = noon - 4.0 * ha if rising else noon + 4.0 * ha
        if i < iterations:
            minutes = np.where(np.isnan(minutes), 720.0 - 4.0 * lon, minutes)
    return midnight + 60.0 * minutes


def sunrise_sunset(coord: GeoCoord, d: date) -> tuple[float, float]:
    """Sunrise and sunset on the local solar day of civil date ``d``.

    Raises NoSunEvent during polar day or polar night.
    """
    rise = float(_event_posix(coord.lat, coord.lon, d, rising=True))
    sset = float(_event_posix(coord.lat, coord.lon, d, rising=False))
    if math.isnan(rise) or math.isnan(sset):
        raise NoSunEvent(f"no sunrise/sunset at ({coord.lat}, {coord.lon}) on {d}")
    return rise, sset


def night_arrays(lat, lon, d: date):
    """Vectorised (center, length) of the night after ``d``; NaN if undefined."""
    sset = _event_posix(lat, lon, d, rising=False)
    rise = _event_posix(lat, lon, d + timedelta(days=1), rising=True)
    return 0.5 * (sset + rise), rise - sset


def night_window(coord: GeoCoord, d: date) -> NightWindow:
    center, length = night_arrays(coord.lat, coord.lon, d)
    if not (np.isfinite(center) and np.isfinite(length)):
        raise NoSunEvent(f"no night window at ({coord.lat}, {coord.lon}) after {d}")
    return NightWindow(float(center), float(length))


def _bisect(f, lo, hi, tol=1e-5, max_iter=80):
    """Elementwise bisection for a root of f on [lo, hi].

    Where f(lo) and f(hi) share a sign the endpoint with the smaller |f| is
    returned and ``bracketed`` is False.
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    flo, fhi = f(lo), f(hi)
    bracketed = np.sign(flo) != np.sign(fhi)
    fallback = np.where(np.abs(flo) <= np.abs(fhi), lo, hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fmid = f(mid)
        left = np.sign(fmid) == np.sign(flo)
        lo = np.where(left, mid, lo)
        flo = np.where(left, fmid, flo)
        hi = np.where(left, hi, mid)
        if np.all(hi - lo < tol):
            break
    return np.where(bracketed, 0.5 * (lo + hi), fallback), bracketed


def latitude_from_night_length(length, d: date, hemisphere: int = 1, lon=0.0,
                               max_abs_lat: float = 65.0):
    """Invert night length (seconds) to latitude on the hinted hemisphere.

    Returns ``(lat, ill_conditioned)``.  The flag is raised where the
    length/latitude map is too flat to resolve latitude (equinox) or where the
    requested length is not attainable within the search range.  Accepts
    arrays for ``length`` and ``lon``.
    """
    length = np.asarray(length, dtype=float)
    if np.any((length <= 0) | (length >= SECONDS_PER_DAY)):
        raise InputError("night length must lie in (0, 24 h)")
    if hemisphere not in (-1, 1):
        raise InputError("hemisphere must be +1 or -1")
    lon = np.broadcast_to(np.asarray(lon, dtype=float), length.shape)

    def resid(lat_abs):
        _, nl = night_arrays(hemisphere * lat_abs, lon, d)
        # polar cells: treat as extreme so bisection still brackets
        return np.nan_to_num(nl, nan=SECONDS_PER_DAY) - length

    lat_abs, bracketed = _bisect(resid, np.zeros(length.shape),
                                 np.full(length.shape, max_abs_lat))
    h = 0.25
    _, l_hi = night_arrays(hemisphere * np.minimum(lat_abs + h, max_abs_lat), lon, d)
    _, l_lo = night_arrays(hemisphere * np.maximum(lat_abs - h, 0.0), lon, d)
    span = np.minimum(lat_abs + h, max_abs_lat) - np.maximum(lat_abs - h, 0.0)
    slope = np.abs(l_hi - l_lo) / 60.0 / span
    ill = (~bracketed) | (slope < ILL_CONDITIONED_SLOPE)
    lat = hemisphere * lat_abs
    if lat.ndim == 0:
        return float(lat), bool(ill)
    return lat, ill


def longitude_from_night_center(center, d: date, lat):
    """Invert a night-center instant (POSIX s) to longitude in degrees."""
    center = np.asarray(center, dtype=float)
    lat = np.broadcast_to(np.asarray(lat, dtype=float), center.shape)

    def resid(lon):
        # center decreases as longitude increases (east = earlier)
        c, _ = night_arrays(lat, lon, d)
        return center - c

    lon, _ = _bisect(resid, np.full(center.shape, -180.0), np.full(center.shape, 180.0))
    return float(lon) if lon.ndim == 0 else lon
