"""End-to-end experiment: world -> split -> datasets -> models -> baseline -> report."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import pandas as pd

from . import dataset, discriminators, evaluation, localization
from .astro import GeoCoord
from .reshape import preprocess_log
from .synth import SynthConfig, generate_world

log = logging.getLogger(__name__)

TRAIN_DAY_CAP = 1300
LIGHT_EPOCHS = 5
TEMP_EPOCHS = 20
TEMP_LR = 1e-3


@dataclass(frozen=True)
class ExperimentConfig:
    world: SynthConfig = field(default_factory=SynthConfig)
    split_ratio: float = dataset.DEFAULT_SPLIT_RATIO
    train_day_cap: int | None = TRAIN_DAY_CAP
    light_epochs: int = LIGHT_EPOCHS
    temp_epochs: int = TEMP_EPOCHS
    batch_size: int = 64
    light_lr: float = 1e-3
    temp_lr: float = TEMP_LR
    half_span: float = localization.HALF_SPAN
    grid_step: float = localization.GRID_STEP
    seed: int = 0

    def to_json(self) -> dict:
        out = asdict(self)
        out["world"] = self.world.to_json()
        return out


@dataclass
class Experiment:
    config: ExperimentConfig
    world: object
    train_days: pd.DataFrame
    test_days: pd.DataFrame
    light_ds: dataset.Dataset
    temp_ds: dataset.Dataset
    localizer: evaluation.Localizer
    reports: dict
    report: evaluation.EvalReport
    timings: dict


def training_days(world, ratio: float, cap: int | None, seed: int):
    """(capped training days, all test days) split by sensor."""
    train, test = dataset.split_train_test(world.manifest, ratio, seed)
    return dataset.sample_days(train, cap, seed), test


def calibrate_baseline(world, days: pd.DataFrame):
    """Threshold for the baseline from the truth of ``days``."""
    def stream():
        for sid, g in days.groupby("sensor_id", sort=True):
            series = preprocess_log(world.logs.by_id(sid))
            for r in g.sort_values("date").itertuples():
                yield series, r.date, GeoCoord(float(r.true_lat), float(r.true_lon))

    return localization.calibrate_threshold(stream())


def run_experiment(cfg: ExperimentConfig, methods=evaluation.METHODS, progress=None) -> Experiment:
    timings = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = now - clock
        clock = now
        log.info("%s done in %.1f s", name, timings[name])
        if progress:
            progress(name, timings[name])

    world = generate_world(cfg.world)
    train, test = training_days(world, cfg.split_ratio, cfg.train_day_cap, cfg.seed)
    lap("world")
    light_ds = dataset.build_light_training_set(world, train, seed=cfg.seed)
    temp_ds = dataset.build_temp_training_set(world, train, seed=cfg.seed)
    lap("datasets")
    light, light_rep = discriminators.train("light", light_ds, cfg.light_epochs, cfg.batch_size,
                                            cfg.light_lr, cfg.seed)
    temp, temp_rep = discriminators.train("temp", temp_ds, cfg.temp_epochs, cfg.batch_size,
                                          cfg.temp_lr, cfg.seed)
    lap("training")
    threshold, _ = calibrate_baseline(world, train)
    lap("baseline")
    loc = evaluation.Localizer(light, temp, threshold, cfg.half_span, cfg.grid_step)
    report = evaluation.run_eval(world, test, loc, methods, seed=cfg.seed, config=cfg.to_json())
    lap("evaluation")
    return Experiment(cfg, world, train, test, light_ds, temp_ds, loc,
                      {"light": light_rep, "temp": temp_rep}, report, timings)
