import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def default_dataset():
    """20 subjects x 3600 s at seed 0; about half a minute to build."""
    from fatigue_forge.synth import SynthSpec, gen_dataset

    return gen_dataset(SynthSpec(seed=0))


@pytest.fixture(scope="session")
def small_dataset():
    from fatigue_forge.synth import SynthSpec, gen_dataset

    return gen_dataset(SynthSpec(seed=3, subjects=2, duration_s=1500))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULT_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
