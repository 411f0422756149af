"""Labelled training sets for the light and temperature discriminators.

Light: per sensor-day one matched curve reshaped about the true night window,
plus ``k`` unmatched curves whose night center and length are each offset by
an independent random amount in [2 min, 2 h] with random sign.

Temperature: per sensor-day one matched pair (sensor vs the station nearest
to the true position) plus up to ``k`` pairs at random positions in a ±20°
box, each paired with its own nearest station.  Positions with no station
within the vicinity radius are dropped, not replaced.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd

from . import astro
from .errors import CoverageError, InputError
from .io_utils import atomic_write
from .reshape import preprocess_log, reshape_windows, sensor_hourly_bins, station_parts
from .sensorio import EARTH_RADIUS_KM
from .synth import child_rng

log = logging.getLogger(__name__)

MAGIC = b"LUMITRACK-DS\0\0\0\1"
DEFAULT_SPLIT_RATIO = 1300 / 1604
MAX_REDRAWS = 100


@dataclass
class Dataset:
    """Feature matrix, labels and per-row provenance columns."""
    kind: str
    X: np.ndarray
    y: np.ndarray
    provenance: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.float64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise InputError("dataset X must be (n, dim) with one label per row")
        if not np.all((self.y == 0) | (self.y == 1)):
            raise InputError("labels must be 0 or 1")
        for k, v in self.provenance.items():
            if len(v) != self.X.shape[0]:
                raise InputError(f"provenance column {k} has wrong length")

    def __len__(self):
        return self.X.shape[0]

    @property
    def counts(self) -> tuple[int, int]:
        n1 = int(self.y.sum())
        return len(self) - n1, n1

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        prov = {k: [v[i] for i in rows] for k, v in self.provenance.items()}
        return Dataset(self.kind, self.X[rows], self.y[rows], prov, dict(self.meta))


# -- split -------------------------------------------------------------------------

def split_train_test(manifest: pd.DataFrame, ratio: float = DEFAULT_SPLIT_RATIO, seed: int = 0):
    """Split sensor-days by sensor id so that about ``ratio`` of days train.

    The training sensors are the subset whose total day count is closest to
    ``ratio * total`` (exact subset-sum over per-sensor counts).  Sensors are
    first shuffled with a seeded stream, which decides among equally good
    subsets.
    """
    if not 0.0 < ratio < 1.0:
        raise InputError(f"split ratio must lie strictly between 0 and 1, got {ratio}")
    if manifest.empty:
        raise InputError("manifest is empty")
    days = manifest.groupby("sensor_id", sort=True).size()
    if len(days) < 2:
        raise InputError("need at least two sensors to split by sensor")
    ids = np.array(days.index)
    order = child_rng(seed, "split").permutation(len(ids))
    counts = [int(c) for c in days.values[order]]
    total = sum(counts)
    # reach[i]: bitset of day totals attainable with the first i shuffled sensors
    reach = [1]
    for c in counts:
        reach.append(reach[-1] | (reach[-1] << c))
    target = ratio * total
    best = min((s for s in range(1, total) if reach[-1] >> s & 1),
               key=lambda s: (abs(s - target), s))
    chosen, s = [], best
    for i in range(len(counts) - 1, -1, -1):
        if not reach[i] >> s & 1:
            chosen.append(ids[order[i]])
            s -= counts[i]
    train_ids = set(chosen)
    is_train = manifest["sensor_id"].isin(train_ids)
    key = ["sensor_id", "date"]
    train = manifest[is_train].sort_values(key).reset_index(drop=True)
    test = manifest[~is_train].sort_values(key).reset_index(drop=True)
    return train, test


def sample_days(days: pd.DataFrame, n: int | None, seed: int = 0) -> pd.DataFrame:
    """At most ``n`` sensor-days drawn without replacement (seeded), sorted."""
    if n is None or n >= len(days):
        return days.sort_values(["sensor_id", "date"]).reset_index(drop=True)
    if n < 1:
        raise InputError("day cap must be positive")
    rows = np.sort(child_rng(seed, "cap-days").choice(len(days), size=n, replace=False))
    return days.iloc[rows].sort_values(["sensor_id", "date"]).reset_index(drop=True)


def _by_sensor(days: pd.DataFrame):
    for sid, group in days.groupby("sensor_id", sort=True):
        yield sid, sorted(group["date"])


def _day_rng(seed, kind, sid, d):
    return child_rng(seed, f"{kind}:{sid}:{d.isoformat()}")


# -- light ---------------------------------------------------------------------------

def light_offsets(rng, k: int, lo_min: float = 2.0, hi_min: float = 120.0):
    """(dcenter, dlength) in minutes, independent |offset| ~ U[lo, hi] with random sign."""
    mag = rng.uniform(lo_min, hi_min, size=(k, 2))
    sign = np.where(rng.random((k, 2)) < 0.5, -1.0, 1.0)
    return mag * sign


def build_light_training_set(world, days: pd.DataFrame, k_unmatched: int = 24,
                             offset_range=(2.0, 120.0), seed: int = 0) -> Dataset:
    """Matched and perturbed-window light examples for each sensor-day."""
    X, y = [], []
    prov = {"sensor_id": [], "date": [], "dcenter_min": [], "dlength_min": []}
    for sid, dates in _by_sensor(days):
        sensor = world.logs.by_id(sid)
        series = preprocess_log(sensor)
        truth = world.truths[sid]
        for d in dates:
            try:
                w = astro.night_window(truth, d)
            except CoverageError as exc:
                log.warning("skipping %s %s: %s", sid, d, exc)
                continue
            offs = np.vstack([[0.0, 0.0], light_offsets(_day_rng(seed, "light", sid, d), k_unmatched,
                                                        *offset_range)])
            curves, ok = reshape_windows(series, w.center + 60.0 * offs[:, 0],
                                         w.length + 60.0 * offs[:, 1])
            if not ok.all():
                log.warning("skipping %s %s: light window not covered", sid, d)
                continue
            X.append(curves)
            y.append(np.r_[1.0, np.zeros(k_unmatched)])
            prov["sensor_id"] += [sid] * len(offs)
            prov["date"] += [d.isoformat()] * len(offs)
            prov["dcenter_min"] += offs[:, 0].tolist()
            prov["dlength_min"] += offs[:, 1].tolist()
    if not X:
        raise CoverageError("no sensor-day produced light examples")
    meta = {"k_unmatched": k_unmatched, "offset_range_min": list(offset_range), "seed": seed}
    return Dataset("light", np.vstack(X), np.concatenate(y), prov, meta)


# -- temperature -------------------------------------------------------------------------

def _has_night(lat, lon, d):
    centers, _ = astro.night_arrays(np.array([lat]), lon, d)
    return bool(np.isfinite(centers[0]))


def _candidates(rng, truth, store, matched_idx, k, box, vicinity_deg, d):
    """Candidate positions and their stations; see build_temp_training_set."""
    out = []
    for _ in range(k):
        for _ in range(MAX_REDRAWS):
            dlat, dlon = rng.uniform(-box, box, 2)
            lat = float(np.clip(truth.lat + dlat, -90.0, 90.0))
            lon = float((truth.lon + dlon + 180.0) % 360.0 - 180.0)
            idx, dist = store.nearest_indices(lat, lon)
            if int(idx) != matched_idx and _has_night(lat, lon, d):
                break
        else:
            continue
        if np.degrees(dist / EARTH_RADIUS_KM) > vicinity_deg:
            continue  # outlier: no station in the vicinity
        out.append((lat, lon, int(idx), float(dlat), float(dlon)))
    return out


def build_temp_training_set(world, days: pd.DataFrame, k_unmatched: int = 15,
                            offset_box: float = 20.0, vicinity_deg: float = 1.5,
                            seed: int = 0) -> Dataset:
    """Matched (truth-nearest station) and random-position temperature pairs.

    A random position whose nearest station is the matched station, or
    which has no night that day (polar night or midnight sun), is redrawn,
    so class counts follow ``days * k`` on worlds with no vicinity outliers.
    """
    store = world.store
    ids = store.ids
    X, y = [], []
    prov = {"sensor_id": [], "date": [], "station_id": [], "dlat": [], "dlon": []}
    for sid, dates in _by_sensor(days):
        sensor = world.logs.by_id(sid)
        truth = world.truths[sid]
        matched = int(store.nearest_indices(truth.lat, truth.lon)[0])
        for d in dates:
            rng = _day_rng(seed, "temp", sid, d)
            cands = _candidates(rng, truth, store, matched, k_unmatched, offset_box, vicinity_deg, d)
            lats = np.array([truth.lat] + [c[0] for c in cands])
            lons = np.array([truth.lon] + [c[1] for c in cands])
            sidx = np.array([matched] + [c[2] for c in cands])
            centers, _ = astro.night_arrays(lats, lons, d)
            if not np.isfinite(centers[0]):
                log.warning("skipping %s %s: no night window at truth", sid, d)
                continue
            finite = np.isfinite(centers)
            sens, ok_s = sensor_hourly_bins(sensor.temp_t, sensor.temp_c, np.nan_to_num(centers))
            stat, ok_w = station_parts(store, sidx, np.nan_to_num(centers))
            ok = ok_s & ok_w & finite
            if not ok[0]:
                log.warning("skipping %s %s: matched pair lacks coverage", sid, d)
                continue
            rows = np.flatnonzero(ok)
            X.append(np.concatenate([sens[rows], stat[rows]], axis=1))
            y.append((rows == 0).astype(float))
            offs = [(0.0, 0.0)] + [(c[3], c[4]) for c in cands]
            prov["sensor_id"] += [sid] * rows.size
            prov["date"] += [d.isoformat()] * rows.size
            prov["station_id"] += [ids[sidx[r]] for r in rows]
            prov["dlat"] += [offs[r][0] for r in rows]
            prov["dlon"] += [offs[r][1] for r in rows]
    if not X:
        raise CoverageError("no sensor-day produced temperature examples")
    meta = {"k_unmatched": k_unmatched, "offset_box_deg": offset_box,
            "vicinity_deg": vicinity_deg, "seed": seed}
    return Dataset("temp", np.vstack(X), np.concatenate(y), prov, meta)


# -- persistence -------------------------------------------------------------------------

def dataset_bytes(ds: Dataset) -> bytes:
    head = MAGIC + struct.pack("<QQ", ds.X.shape[0], ds.X.shape[1])
    return head + ds.X.astype("<f8").tobytes() + ds.y.astype("<f8").tobytes()


def sidecar_json(ds: Dataset) -> str:
    return json.dumps({"kind": ds.kind, "meta": ds.meta, "provenance": ds.provenance},
                      sort_keys=True) + "\n"


def save_dataset(ds: Dataset, path: Path) -> None:
    """Binary record file at ``path`` plus JSON provenance at ``path + '.json'``."""
    path = Path(path)
    atomic_write(path, dataset_bytes(ds))
    atomic_write(Path(str(path) + ".json"), sidecar_json(ds))


def parse_dataset(blob: bytes, sidecar: str | None = None) -> Dataset:
    if len(blob) < 32 or blob[:16] != MAGIC:
        raise InputError("not a dataset file (bad magic)")
    n, dim = struct.unpack("<QQ", blob[16:32])
    expected = 32 + 8 * n * (dim + 1)
    if len(blob) != expected:
        raise InputError(f"dataset file has {len(blob)} bytes, expected {expected}")
    X = np.frombuffer(blob, dtype="<f8", count=n * dim, offset=32).reshape(n, dim)
    y = np.frombuffer(blob, dtype="<f8", count=n, offset=32 + 8 * n * dim)
    kind, meta, prov = "unknown", {}, {}
    if sidecar is not None:
        side = json.loads(sidecar)
        kind, meta, prov = side["kind"], side["meta"], side["provenance"]
    return Dataset(kind, X.astype(np.float64), y.astype(np.float64), prov, meta)


def load_dataset(path: Path) -> Dataset:
    path = Path(path)
    side = Path(str(path) + ".json")
    return parse_dataset(path.read_bytes(), side.read_text() if side.exists() else None)
