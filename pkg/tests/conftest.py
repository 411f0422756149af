import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lumitrack import pipeline, synth  # noqa: E402

# fixed before the first run and never re-rolled
REFERENCE = pipeline.ExperimentConfig(
    world=synth.SynthConfig(n_sensors=64, cloud_strength=0.5, seed=0), seed=0)


@pytest.fixture(scope="session")
def reference_run():
    """Full-scale experiment on the reference world (several minutes)."""
    return pipeline.run_experiment(REFERENCE)
