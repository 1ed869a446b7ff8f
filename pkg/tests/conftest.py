import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (passed, detail); filled by the acceptance tests
ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"acceptance criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def _timed_run(cfg, run_dir):
    from threadpoolctl import threadpool_limits

    from segadapt.pipeline import run_pipeline

    t0 = time.time()
    with threadpool_limits(limits=1):
        result = run_pipeline(cfg, run_dir)
    return result, time.time() - t0


@pytest.fixture(scope="session")
def sensor_run(tmp_path_factory):
    """The shipped desk configuration on the sensor-shift-only benchmark."""
    from segadapt.config import desk_config

    cfg = desk_config()
    run_dir = tmp_path_factory.mktemp("sensor_a")
    result, seconds = _timed_run(cfg, run_dir)
    return cfg, run_dir, result, seconds


@pytest.fixture(scope="session")
def sensor_rerun(tmp_path_factory, sensor_run):
    cfg = sensor_run[0]
    run_dir = tmp_path_factory.mktemp("sensor_b")
    result, seconds = _timed_run(cfg, run_dir)
    return cfg, run_dir, result, seconds


@pytest.fixture(scope="session")
def class_shift_run(tmp_path_factory):
    from segadapt.config import desk_config

    cfg = desk_config(synth={"sensor_shift": False, "class_representation_shift": True})
    run_dir = tmp_path_factory.mktemp("class_shift")
    result, seconds = _timed_run(cfg, run_dir)
    return cfg, run_dir, result, seconds
