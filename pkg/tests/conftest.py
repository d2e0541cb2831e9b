import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tripletnet.evaluation import SyntheticSpec, generate_synthetic

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synth():
    # 4 classes of 6, small images: quick enough for per-test training
    return generate_synthetic(SyntheticSpec(n_classes=4, class_sizes=(6, 6, 6, 6), image_side=16,
                                            separation=3.0, image_separation=2.0), seed=7)


@pytest.fixture(scope="session")
def full_synth():
    return generate_synthetic(SyntheticSpec(), seed=0)


@pytest.fixture
def synth_dir(tmp_path, small_synth):
    paths = small_synth.write(tmp_path / "data")
    return tmp_path, paths


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
