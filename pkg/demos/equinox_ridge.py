"""Why the light curve alone cannot fix latitude near the equinox.

Trains small nets on a dense synthetic world, then scores the same sensor on
an equinox night and a December night.  Near the equinox every latitude has
a 12 h night, so the light grid is a north-south ridge; the temperature grid
is narrow in latitude and the product recovers the position.

    python demos/equinox_ridge.py [out_dir]
"""
import sys
from datetime import date
from pathlib import Path

from lumitrack import dataset, discriminators, evaluation, localization as L, synth
from lumitrack.astro import GeoCoord


def describe(name, grid, truth):
    est = L.estimate_day(grid)
    wlat, wlon = L.half_max_widths(grid)
    print(f"  {name:<6} est ({est.coord.lat:6.2f}, {est.coord.lon:7.2f})  "
          f"lat err {est.coord.lat - truth.lat:+5.2f}  half-max width lat {wlat:4.1f} lon {wlon:4.1f}"
          f"{'  ill-conditioned' if est.ill_conditioned else ''}")


def main(out_dir="demo_ridge"):
    world = synth.generate_world(synth.SynthConfig(n_sensors=12, cloud_strength=0.3, seed=4))
    train, test = dataset.split_train_test(world.manifest, 0.75, seed=4)
    train = dataset.sample_days(train, 500, seed=4)
    light, _ = discriminators.train("light", dataset.build_light_training_set(world, train), epochs=2)
    temp, _ = discriminators.train("temp", dataset.build_temp_training_set(world, train), epochs=15)
    loc = evaluation.Localizer(light, temp)

    sid = test["sensor_id"].iloc[0]
    sensor, truth = world.logs.by_id(sid), world.truths[sid]
    print(f"sensor {sid} at ({truth.lat:.2f}, {truth.lon:.2f})")
    for d in (date(2018, 9, 22), date(2018, 12, 4)):
        print(d)
        il, it, fused = loc.grids(sensor, world.store, d, truth)
        for name, g in (("light", il), ("temp", it), ("fused", fused)):
            describe(name, g, truth)
        paths, _ = evaluation.export_heatmaps(Path(out_dir), loc, sensor, world.store, d, truth)
    print("rasters in", out_dir)


if __name__ == "__main__":
    main(*sys.argv[1:])
