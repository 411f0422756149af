"""Light and temperature geolocation: synth, build-dataset, train, localize, eval.

Every command validates its arguments before doing any work, writes its
outputs atomically and echoes its run configuration next to them.  Failures
exit non-zero with a single JSON line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import date
from pathlib import Path

import pandas as pd

from . import __version__, astro, dataset, discriminators, evaluation, localization, pipeline, synth
from .astro import GeoCoord
from .errors import CoverageError, InputError, LumitrackError
from .io_utils import atomic_write
from .reshape import preprocess_log
from .sensorio import (FileWeatherFetcher, HttpWeatherFetcher, Region, WeatherStore,
                       fetch_remote_weather, parse_sensor_log, parse_weather_csv)

log = logging.getLogger("lumitrack")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n"


def _echo_config(out_dir: Path, command: str, args: argparse.Namespace) -> dict:
    # paths are echoed by name only so identical runs in different places agree byte for byte
    cfg = {k: (v.name if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
           if k not in ("func", "verbose", "out_dir")}
    cfg = {**cfg, "command": command, "version": __version__}
    atomic_write(out_dir / f"{command}_config.json", _dump(cfg))
    return cfg


def _positive(kind):
    def check(text):
        v = kind(text)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return check


def _unit(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return v


def _seed(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return v


def _existing(text):
    p = Path(text)
    if not p.exists():
        raise argparse.ArgumentTypeError(f"{text} does not exist")
    return p


def _read_days(path: Path) -> pd.DataFrame:
    days = pd.read_csv(path, dtype={"sensor_id": str}, float_precision="round_trip")
    missing = {"sensor_id", "date", "true_lat", "true_lon"} - set(days.columns)
    if missing:
        raise InputError(f"{path}: missing columns {sorted(missing)}")
    days["date"] = [date.fromisoformat(d) for d in days["date"]]
    return days


def _days_csv(days: pd.DataFrame) -> str:
    out = days.copy()
    out["date"] = [d.isoformat() for d in out["date"]]
    return out.to_csv(index=False, lineterminator="\n")


# -- commands -------------------------------------------------------------------------------

def cmd_synth(args) -> dict:
    cfg = synth.SynthConfig(n_sensors=args.n_sensors, start=args.start, end=args.end,
                            n_stations=args.n_stations, cloud_strength=args.cloud_strength,
                            temp_noise_sd=args.temp_noise_sd, seed=args.seed)
    world = synth.generate_world(cfg)
    synth.write_world(world, args.out_dir)
    _echo_config(args.out_dir, "synth", args)
    return {"world": str(args.out_dir), "sensor_days": len(world.manifest), "stations": len(world.store)}


def cmd_build_dataset(args) -> dict:
    world = synth.read_world(args.world)
    train, test = pipeline.training_days(world, args.split_ratio, args.max_train_days, args.seed)
    out = args.out_dir
    atomic_write(out / "train_days.csv", _days_csv(train))
    atomic_write(out / "test_days.csv", _days_csv(test))
    light = dataset.build_light_training_set(world, train, seed=args.seed)
    temp = dataset.build_temp_training_set(world, train, seed=args.seed)
    cfg = _echo_config(out, "build-dataset", args)
    for ds in (light, temp):
        ds.meta["run_config"] = cfg
    dataset.save_dataset(light, out / "light.ds")
    dataset.save_dataset(temp, out / "temp.ds")
    return {"train_days": len(train), "test_days": len(test),
            "light": list(light.counts), "temp": list(temp.counts)}


def cmd_train(args) -> dict:
    ds = dataset.load_dataset(args.dataset)
    kind = args.kind or ds.kind
    if kind != ds.kind:
        raise InputError(f"dataset holds {ds.kind} examples, not {kind}")
    epochs = args.epochs or (pipeline.LIGHT_EPOCHS if kind == "light" else pipeline.TEMP_EPOCHS)
    lr = args.lr or (1e-3 if kind == "light" else pipeline.TEMP_LR)
    model, report = discriminators.train(kind, ds, epochs, args.batch_size, lr, args.seed)
    report["run_config"] = _echo_config(args.out_dir, f"train-{kind}", args)
    model.save(args.out_dir / f"{kind}.model")
    atomic_write(args.out_dir / f"{kind}_report.json", discriminators.report_json(report))
    return {"model": str(args.out_dir / f"{kind}.model"), "final": report["history"][-1]}


def _load_store(args, reference: GeoCoord, d: date) -> WeatherStore:
    if args.weather_url:
        pad = args.half_span + 5.0
        region = Region(max(-90.0, reference.lat - pad), min(90.0, reference.lat + pad),
                        max(-180.0, reference.lon - pad), min(180.0, reference.lon + pad))
        start = astro.utc_midnight(d)
        return fetch_remote_weather(HttpWeatherFetcher(args.weather_url), region,
                                    start, start + 2 * 86400)
    if args.weather is None:
        raise InputError("either --weather or --weather-url is required")
    if args.weather.is_dir():
        return WeatherStore(FileWeatherFetcher(args.weather).fetch(None, None, None))
    return WeatherStore(parse_weather_csv(args.weather))


def cmd_localize(args) -> dict:
    reference = GeoCoord(args.ref_lat, args.ref_lon)
    light = discriminators.load_discriminator(args.light_model, "light")
    temp = discriminators.load_discriminator(args.temp_model, "temp")
    sensor = parse_sensor_log(args.log, args.log.stem)
    store = _load_store(args, reference, args.date)
    loc = evaluation.Localizer(light, temp, args.threshold, args.half_span, args.grid_step)
    cfg = _echo_config(args.out_dir, "localize", args)
    paths, est = evaluation.export_heatmaps(args.out_dir, loc, sensor, store, args.date, reference)
    result = {"sensor_id": sensor.id, "date": args.date.isoformat(),
              "lat": est.coord.lat, "lon": est.coord.lon, "peak": est.peak,
              "sources": list(est.sources), "ill_conditioned": est.ill_conditioned,
              "rasters": [p.name for p in paths], "run_config": cfg}
    if args.threshold is not None:
        try:
            b = localization.baseline_localize(preprocess_log(sensor), args.date, args.threshold)
            result["baseline"] = {"lat": b.coord.lat, "lon": b.coord.lon,
                                  "ill_conditioned": b.ill_conditioned}
        except CoverageError as exc:
            result["baseline"] = {"error": str(exc)}
    atomic_write(args.out_dir / "estimate.json", _dump(result))
    return {k: result[k] for k in ("lat", "lon", "ill_conditioned")}


def cmd_eval(args) -> dict:
    world = synth.read_world(args.world)
    test = _read_days(args.split / "test_days.csv")
    methods = [evaluation.ORACLE] if args.oracle else list(args.methods)
    light = temp = None
    threshold = args.threshold
    if {"light", "fused"} & set(methods):
        if args.light_model is None or args.temp_model is None:
            raise InputError("light and fused methods need --light-model and --temp-model")
        light = discriminators.load_discriminator(args.light_model, "light")
        temp = discriminators.load_discriminator(args.temp_model, "temp")
    if "baseline" in methods and threshold is None:
        threshold, curve = pipeline.calibrate_baseline(world, _read_days(args.split / "train_days.csv"))
        atomic_write(args.out_dir / "threshold.json", _dump({
            "threshold_log10_lux": threshold,
            "mean_error_deg": dict(zip(map(str, localization.THRESHOLDS.tolist()), curve.tolist()))}))
    loc = evaluation.Localizer(light, temp, threshold, args.half_span, args.grid_step)
    cfg = _echo_config(args.out_dir, "eval", args)
    report = evaluation.run_eval(world, test, loc, methods, seed=args.seed, config={"run_config": cfg})
    report.write(args.out_dir)
    if args.heatmaps:
        first = test.sort_values(["sensor_id", "date"]).iloc[0]
        if light is not None and temp is not None:
            evaluation.export_heatmaps(args.out_dir / "heatmaps", loc, world.logs.by_id(first.sensor_id),
                                       world.store, first.date,
                                       GeoCoord(float(first.true_lat), float(first.true_lon)))
    return {"report": str(args.out_dir / "eval_report.csv"), "dropped": len(report.dropped),
            "days": int(report.rows["n_days"].sum())}


# -- parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lumitrack", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--seed", type=_seed, default=0)
        if out:
            sp.add_argument("--out-dir", type=Path, required=True)
        sp.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    def grid(sp):
        sp.add_argument("--grid-step", type=_positive(float), default=localization.GRID_STEP)
        sp.add_argument("--half-span", type=_positive(float), default=localization.HALF_SPAN)

    d = synth.SynthConfig()
    sp = sub.add_parser("synth", help="generate a synthetic world")
    common(sp)
    sp.add_argument("--n-sensors", type=_positive(int), default=d.n_sensors)
    sp.add_argument("--n-stations", type=_positive(int), default=d.n_stations)
    sp.add_argument("--start", type=date.fromisoformat, default=d.start)
    sp.add_argument("--end", type=date.fromisoformat, default=d.end)
    sp.add_argument("--cloud-strength", type=_unit, default=d.cloud_strength)
    sp.add_argument("--temp-noise-sd", type=float, default=d.temp_noise_sd)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("build-dataset", help="split a world and build both training sets")
    sp.add_argument("world", type=_existing)
    common(sp)
    sp.add_argument("--split-ratio", type=float, default=dataset.DEFAULT_SPLIT_RATIO)
    sp.add_argument("--max-train-days", type=_positive(int), default=pipeline.TRAIN_DAY_CAP)
    sp.set_defaults(func=cmd_build_dataset)

    sp = sub.add_parser("train", help="train a discriminator on a dataset file")
    sp.add_argument("dataset", type=_existing)
    common(sp)
    sp.add_argument("--kind", choices=["light", "temp"])
    sp.add_argument("--epochs", type=_positive(int))
    sp.add_argument("--batch-size", type=_positive(int), default=64)
    sp.add_argument("--lr", type=_positive(float))
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("localize", help="estimate one sensor-day position and emit rasters")
    common(sp)
    grid(sp)
    sp.add_argument("--log", type=_existing, required=True)
    sp.add_argument("--weather", type=_existing, help="weather CSV file or directory of CSVs")
    sp.add_argument("--weather-url", help="URL template for the remote weather fetcher")
    sp.add_argument("--light-model", type=_existing, required=True)
    sp.add_argument("--temp-model", type=_existing, required=True)
    sp.add_argument("--date", type=date.fromisoformat, required=True)
    sp.add_argument("--ref-lat", type=float, required=True)
    sp.add_argument("--ref-lon", type=float, required=True)
    sp.add_argument("--threshold", type=float, help="baseline threshold (log10 lux)")
    sp.set_defaults(func=cmd_localize)

    sp = sub.add_parser("eval", help="per-interval errors on the test days of a split")
    sp.add_argument("world", type=_existing)
    common(sp)
    grid(sp)
    sp.add_argument("--split", type=_existing, required=True, help="build-dataset output directory")
    sp.add_argument("--light-model", type=_existing)
    sp.add_argument("--temp-model", type=_existing)
    sp.add_argument("--methods", nargs="+", choices=list(evaluation.METHODS),
                    default=list(evaluation.METHODS))
    sp.add_argument("--oracle", action="store_true", help="harness self-test: report the truth")
    sp.add_argument("--threshold", type=float, help="skip calibration and use this threshold")
    sp.add_argument("--heatmaps", action="store_true", help="also export rasters for one day")
    sp.set_defaults(func=cmd_eval)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, LumitrackError):
        return exc.exit_code
    if isinstance(exc, (ValueError, OSError, KeyError)):
        return InputError.exit_code
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return 0 if exc.code == 0 else InputError.exit_code
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except (LumitrackError, ValueError, OSError, KeyError) as exc:
        code = _exit_code(exc)
        line = {"status": "error", "exit_code": code, "error": type(exc).__name__,
                "message": " ".join(str(exc).split())}
        print(json.dumps(line, sort_keys=True), file=sys.stderr)
        return code
    print(json.dumps({"status": "ok", "command": args.command, **result}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
