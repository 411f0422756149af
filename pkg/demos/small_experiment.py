"""A reduced end-to-end run: synthetic world, datasets, both nets, baseline, report.

Takes a few minutes on one core.  The full-size reference run used by the
acceptance tests is the same call with 64 sensors and the default caps.

    python demos/small_experiment.py [out_dir]
"""
import sys
from pathlib import Path

from lumitrack import evaluation, pipeline, synth


def main(out_dir="demo_out"):
    cfg = pipeline.ExperimentConfig(
        world=synth.SynthConfig(n_sensors=16, cloud_strength=0.5, seed=1),
        train_day_cap=400, light_epochs=2, temp_epochs=10, seed=1)
    exp = pipeline.run_experiment(cfg, progress=lambda step, s: print(f"{step:<10} {s:6.1f} s"))
    rep = exp.report

    print()
    print(rep.rows.pivot(index="interval", columns="method", values="lat_mae")
          .reindex([h[0] for h in evaluation.HALF_MONTHS]).round(2).to_string())
    print()
    for m in ("baseline", "light", "fused"):
        lat, lon, n = rep.equinox_mae(m)
        print(f"{m:<8} equinox lat {lat:5.2f} lon {lon:5.2f} ({n} days)")

    paths = rep.write(Path(out_dir))
    print("report:", *map(str, paths))


if __name__ == "__main__":
    main(*sys.argv[1:])
