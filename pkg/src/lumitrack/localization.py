"""Grid likelihood evaluation, fusion, argmax readout and the threshold baseline."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from datetime import date, timedelta

import numpy as np
from scipy import ndimage

from . import astro
from .astro import GeoCoord
from .errors import CoverageError, InputError, NumericalError
from .reshape import MinuteSeries, reshape_windows, temp_pair_matrix
from .sensorio import haversine_km, EARTH_RADIUS_KM

log = logging.getLogger(__name__)

HALF_SPAN = 10.0
GRID_STEP = 1.0
FINE_STEP = 0.1
ILL_LEVEL = 0.9
ILL_SPAN = 5.0  # degrees
TIE_RTOL = 1e-12
THRESHOLDS = np.round(np.arange(-1.5, 3.5 + 1e-9, 0.05), 10)  # log10 lux
FAIL_PENALTY_DEG = 90.0


class DegenerateGrid(NumericalError):
    """Raised when a grid has no positive mass to read a maximum from."""


@dataclass
class LikelihoodGrid:
    origin: GeoCoord
    lat_offsets: np.ndarray
    lon_offsets: np.ndarray
    values: np.ndarray  # (n_lat, n_lon)
    missing: np.ndarray | None = None
    sources: tuple = ()
    degenerate: bool = False

    def __post_init__(self):
        self.lat_offsets = np.asarray(self.lat_offsets, dtype=float)
        self.lon_offsets = np.asarray(self.lon_offsets, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.missing is None:
            self.missing = np.zeros(self.values.shape, dtype=bool)
        for ax in (self.lat_offsets, self.lon_offsets):
            if ax.ndim != 1 or ax.size < 1 or np.any(np.diff(ax) <= 0):
                raise InputError("grid axes must be strictly increasing")
        if self.values.shape != (self.lat_offsets.size, self.lon_offsets.size):
            raise InputError("grid values do not match axis sizes")
        ok = self.values[~self.missing]
        if not np.all(np.isfinite(ok)) or np.any(ok < 0):
            raise InputError("grid values must be finite and non-negative")

    @property
    def shape(self):
        return self.values.shape

    def coords(self):
        """Candidate (lat, lon) arrays for every cell, longitude wrapped."""
        lat = self.origin.lat + self.lat_offsets[:, None] + 0 * self.lon_offsets[None, :]
        lon = self.origin.lon + self.lon_offsets[None, :] + 0 * self.lat_offsets[:, None]
        return lat, (lon + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class DayEstimate:
    coord: GeoCoord
    peak: float
    lat_offset: float
    lon_offset: float
    sources: tuple = ()
    ill_conditioned: bool = False


def grid_axis(half_span: float = HALF_SPAN, step: float = GRID_STEP) -> np.ndarray:
    if not (half_span > 0 and step > 0):
        raise InputError("half_span and step must be positive")
    n = half_span / step
    if abs(n - round(n)) > 1e-9:
        raise InputError("half_span must be a whole number of steps")
    n = int(round(n))
    return np.arange(-n, n + 1) * step


def _candidate_axes(reference, half_span, step):
    axis = grid_axis(half_span, step)
    lat = reference.lat + axis[:, None] + np.zeros(axis.size)[None, :]
    lon = reference.lon + axis[None, :] + np.zeros(axis.size)[:, None]
    return axis, lat, (lon + 180.0) % 360.0 - 180.0


def evaluate_light_grid(model, series: MinuteSeries, d: date, reference: GeoCoord,
                        half_span: float = HALF_SPAN, step: float = GRID_STEP) -> LikelihoodGrid:
    """Light score at every candidate of a square grid around ``reference``.

    Cells whose candidate has no night window or whose reshape window is not
    covered by the series are marked missing.
    """
    axis, lat, lon = _candidate_axes(reference, half_span, step)
    valid = np.abs(lat) <= 90.0
    centers, lengths = astro.night_arrays(np.clip(lat, -90, 90), lon, d)
    valid &= np.isfinite(centers) & np.isfinite(lengths)
    values = np.full(lat.shape, np.nan)
    flat = np.flatnonzero(valid.ravel())
    curves, covered = reshape_windows(series, centers.ravel()[flat], lengths.ravel()[flat])
    rows = flat[covered]
    if rows.size:
        values.ravel()[rows] = model.score(curves[covered])
    missing = np.isnan(values)
    return LikelihoodGrid(reference, axis, axis, np.where(missing, 0.0, values), missing, ("light",))


def evaluate_temp_grid(model, sensor, store, d: date, reference: GeoCoord,
                       half_span: float = HALF_SPAN, step: float = GRID_STEP) -> LikelihoodGrid:
    axis, lat, lon = _candidate_axes(reference, half_span, step)
    valid = (np.abs(lat) <= 90.0).ravel()
    values = np.full(lat.size, np.nan)
    pairs, _, covered = temp_pair_matrix(sensor, store, np.clip(lat, -90, 90).ravel(), lon.ravel(), d)
    ok = valid & covered
    if ok.any():
        values[ok] = model.score(pairs[ok])
    values = values.reshape(lat.shape)
    missing = np.isnan(values)
    return LikelihoodGrid(reference, axis, axis, np.where(missing, 0.0, values), missing, ("temp",))


def fill_missing(grid: LikelihoodGrid) -> LikelihoodGrid:
    """Replace missing cells by their nearest non-missing neighbour."""
    if not grid.missing.any():
        return grid
    if grid.missing.all():
        raise CoverageError("every grid cell is missing")
    _, (ii, jj) = ndimage.distance_transform_edt(grid.missing, return_indices=True)
    return replace(grid, values=grid.values[ii, jj], missing=np.zeros(grid.shape, dtype=bool))


def _fine_axis(axis, fine_step):
    step = axis[1] - axis[0]
    ratio = step / fine_step
    r = int(round(ratio))
    if r < 1 or abs(ratio - r) > 1e-9 or not np.allclose(np.diff(axis), step):
        raise InputError("fine step must divide a uniform coarse step")
    n = (axis.size - 1) * r + 1
    idx = np.minimum(np.arange(n) // r, axis.size - 2)
    frac = (np.arange(n) - idx * r) / r
    return axis[0] + np.arange(n) * (step / r), idx, frac


def interpolate_grid(grid: LikelihoodGrid, fine_step: float = FINE_STEP) -> LikelihoodGrid:
    """Bilinear upsampling onto ``fine_step`` spacing; coarse nodes kept exactly."""
    if grid.shape[0] < 2 or grid.shape[1] < 2:
        raise InputError("interpolation needs at least a 2 x 2 grid")
    g = fill_missing(grid)
    lat_ax, i, fi = _fine_axis(g.lat_offsets, fine_step)
    lon_ax, j, fj = _fine_axis(g.lon_offsets, fine_step)
    v = g.values
    fi, fj = fi[:, None], fj[None, :]
    out = ((1 - fi) * (1 - fj) * v[i][:, j] + (1 - fi) * fj * v[i][:, j + 1]
           + fi * (1 - fj) * v[i + 1][:, j] + fi * fj * v[i + 1][:, j + 1])
    # exact node values (the weights above are exact there, this guards the sum)
    nodes_i = np.flatnonzero(fi[:, 0] == 0)
    nodes_j = np.flatnonzero(fj[0] == 0)
    out[np.ix_(nodes_i, nodes_j)] = v[np.ix_(i[nodes_i], j[nodes_j])]
    out = np.clip(out, v.min(), v.max())
    return LikelihoodGrid(g.origin, lat_ax, lon_ax, out, None, g.sources)


def fuse(a: LikelihoodGrid, b: LikelihoodGrid) -> LikelihoodGrid:
    """Elementwise product normalised to unit sum (argmax unaffected)."""
    if not (np.array_equal(a.lat_offsets, b.lat_offsets)
            and np.array_equal(a.lon_offsets, b.lon_offsets) and a.origin == b.origin):
        raise InputError("fused grids must share origin and axes")
    prod = fill_missing(a).values * fill_missing(b).values
    total = prod.sum()
    sources = tuple(a.sources) + tuple(b.sources)
    if not total > 0:
        return LikelihoodGrid(a.origin, a.lat_offsets, a.lon_offsets, np.zeros(prod.shape),
                              None, sources, degenerate=True)
    return LikelihoodGrid(a.origin, a.lat_offsets, a.lon_offsets, prod / total, None, sources)


def estimate_day(grid: LikelihoodGrid) -> DayEstimate:
    """Argmax of the grid with deterministic tie-breaking and an ambiguity flag.

    Ties (within 1e-12 relative) go to the cell nearest the grid center,
    then to the smallest (lat offset, lon offset).  The estimate is flagged
    ill-conditioned when the cells at >= 90% of the maximum span more than
    5 degrees along either axis.
    """
    g = fill_missing(grid)
    top = g.values.max()
    if grid.degenerate or not top > 0:
        raise DegenerateGrid("grid has no positive likelihood")
    cand = np.argwhere(g.values >= top * (1 - TIE_RTOL))
    dlat = g.lat_offsets[cand[:, 0]]
    dlon = g.lon_offsets[cand[:, 1]]
    best = np.lexsort((dlon, dlat, np.hypot(dlat, dlon)))[0]
    i, j = cand[best]
    region = np.argwhere(g.values >= ILL_LEVEL * top)
    span_lat = np.ptp(g.lat_offsets[region[:, 0]])
    span_lon = np.ptp(g.lon_offsets[region[:, 1]])
    lat = float(np.clip(g.origin.lat + g.lat_offsets[i], -90, 90))
    lon = float((g.origin.lon + g.lon_offsets[j] + 180.0) % 360.0 - 180.0)
    return DayEstimate(GeoCoord(lat, lon), float(g.values[i, j]), float(g.lat_offsets[i]),
                       float(g.lon_offsets[j]), g.sources, bool(span_lat > ILL_SPAN or span_lon > ILL_SPAN))


def half_max_widths(grid: LikelihoodGrid) -> tuple[float, float]:
    """Contiguous half-maximum extent (lat, lon) through the argmax cell."""
    g = fill_missing(grid)
    i, j = np.unravel_index(np.argmax(g.values), g.shape)
    half = 0.5 * g.values[i, j]

    def extent(line, k, axis):
        lo = k
        while lo > 0 and line[lo - 1] >= half:
            lo -= 1
        hi = k
        while hi < line.size - 1 and line[hi + 1] >= half:
            hi += 1
        return axis[hi] - axis[lo]

    return extent(g.values[:, j], i, g.lat_offsets), extent(g.values[i, :], j, g.lon_offsets)


# -- export -------------------------------------------------------------------------------

def grid_csv(grid: LikelihoodGrid) -> str:
    lines = ["lat_offset,lon_offset,value"]
    for a, la in enumerate(grid.lat_offsets.tolist()):
        for b, lo in enumerate(grid.lon_offsets.tolist()):
            lines.append(f"{la!r},{lo!r},{float(grid.values[a, b])!r}")
    return "\n".join(lines) + "\n"


def grid_pgm(grid: LikelihoodGrid) -> bytes:
    """8-bit binary PGM, north (largest lat offset) on the top row."""
    v = fill_missing(grid).values[::-1]
    lo, hi = v.min(), v.max()
    scaled = np.zeros(v.shape) if hi == lo else (v - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    head = f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode()
    return head + pix.tobytes()


# -- threshold baseline ------------------------------------------------------------------------

@dataclass(frozen=True)
class BaselineEstimate:
    coord: GeoCoord
    sunset: float
    sunrise: float
    ill_conditioned: bool


def _search_span(d: date):
    start = astro.utc_midnight(d) + 11.5 * 3600
    return start, start + 25 * 3600


def night_crossings(series: MinuteSeries, d: date, thresholds):
    """Sunset/sunrise instants for each threshold (NaN where not found).

    The night is the longest below-threshold run whose midpoint falls in
    [D 11:30, D+1 12:30 UTC]; crossings are linearly interpolated between
    the bracketing minute samples.
    """
    thresholds = np.atleast_1d(np.asarray(thresholds, dtype=float))
    t = series.times
    lo, hi = _search_span(d)
    sel = np.flatnonzero((t >= lo - 12 * 3600) & (t <= hi + 12 * 3600))
    t, v = t[sel], series.values[sel]
    sset = np.full(thresholds.size, np.nan)
    rise = np.full(thresholds.size, np.nan)
    for k, th in enumerate(thresholds):
        below = v < th
        padded = np.concatenate([[False], below, [False]])
        edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
        starts, ends = edges[::2], edges[1::2] - 1
        # runs touching the selection edge have no crossing on that side
        inner = (starts > 0) & (ends < v.size - 1)
        mids = 0.5 * (t[starts] + t[ends])
        ok = inner & (mids >= lo) & (mids <= hi)
        if not ok.any():
            continue
        cand = np.flatnonzero(ok)
        r = cand[np.argmax(ends[cand] - starts[cand])]
        a, b = starts[r], ends[r]
        sset[k] = np.interp(th, [v[a], v[a - 1]], [t[a], t[a - 1]])
        rise[k] = np.interp(th, [v[b], v[b + 1]], [t[b], t[b + 1]])
    return sset, rise


def invert_night(d: date, sunset, sunrise, hemisphere: int = 1):
    """(lat, lon, ill) from sunset/sunrise instants (arrays; NaN in -> NaN out)."""
    sunset = np.atleast_1d(np.asarray(sunset, dtype=float))
    sunrise = np.atleast_1d(np.asarray(sunrise, dtype=float))
    center = 0.5 * (sunset + sunrise)
    length = sunrise - sunset
    ok = np.isfinite(center) & (length > 0) & (length < 86400)
    lat = np.full(center.shape, np.nan)
    lon = np.full(center.shape, np.nan)
    ill = np.ones(center.shape, dtype=bool)
    if ok.any():
        c, L = center[ok], length[ok]
        lon_k = astro.longitude_from_night_center(c, d, np.full(c.shape, 45.0 * hemisphere))
        for _ in range(2):
            lat_k, ill_k = astro.latitude_from_night_length(L, d, hemisphere, lon=lon_k)
            lon_k = astro.longitude_from_night_center(c, d, lat_k)
        lat[ok], lon[ok], ill[ok] = lat_k, lon_k, ill_k
    return lat, lon, ill


def baseline_localize(series: MinuteSeries, d: date, threshold: float,
                      hemisphere: int = 1) -> BaselineEstimate:
    """Threshold sunset/sunrise detection followed by astronomical inversion."""
    sset, rise = night_crossings(series, d, [threshold])
    if not np.isfinite(sset[0]):
        raise CoverageError(f"no threshold crossings at log10 lux {threshold} for night of {d}")
    lat, lon, ill = invert_night(d, sset, rise, hemisphere)
    if not np.isfinite(lat[0]):
        raise CoverageError(f"crossings for night of {d} do not form a valid night")
    return BaselineEstimate(GeoCoord(float(lat[0]), float(lon[0])), float(sset[0]),
                            float(rise[0]), bool(ill[0]))


def baseline_errors(series: MinuteSeries, d: date, truth: GeoCoord, thresholds=THRESHOLDS,
                    hemisphere: int = 1) -> np.ndarray:
    """Great-circle error (deg) per threshold; failures cost FAIL_PENALTY_DEG."""
    sset, rise = night_crossings(series, d, thresholds)
    lat, lon, _ = invert_night(d, sset, rise, hemisphere)
    err = np.degrees(haversine_km(truth.lat, truth.lon, lat, lon) / EARTH_RADIUS_KM)
    return np.where(np.isfinite(err), err, FAIL_PENALTY_DEG)


def calibrate_threshold(days, thresholds=THRESHOLDS, hemisphere: int = 1):
    """Threshold (log10 lux) minimising mean great-circle error.

    ``days`` yields (MinuteSeries, date, truth).  Returns (threshold, mean
    error per threshold).
    """
    total = np.zeros(len(thresholds))
    n = 0
    for series, d, truth in days:
        total += baseline_errors(series, d, truth, thresholds, hemisphere)
        n += 1
    if n == 0:
        raise InputError("threshold calibration needs at least one day")
    mean = total / n
    return float(thresholds[int(np.argmin(mean))]), mean
