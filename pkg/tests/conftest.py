import numpy as np
import pytest

from wctnet.ecgio import SyntheticConfig, generate_synthetic_dataset
from wctnet.model import ModelConfig
from wctnet.preprocess import preprocess_record
from wctnet.segment import SegmentSet, segment_record

TINY = ModelConfig(conv_filters=4, lstm1_units=8, lstm2_units=4, dense1_units=8)


@pytest.fixture(scope="session")
def tiny_config():
    return TINY


@pytest.fixture(scope="session")
def small_records():
    cfg = SyntheticConfig(n_patients_per_class=2, record_duration_s=5.0, seed=11)
    return generate_synthetic_dataset(cfg)


@pytest.fixture(scope="session")
def small_segments(small_records):
    return SegmentSet.concat(segment_record(preprocess_record(r)) for r in small_records)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary ----------------------------------------------------
# Acceptance tests attach ("criterion", label) and optionally ("detail", text)
# via record_property; one PASS/FAIL line per criterion is printed at the end.

_ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _ACCEPTANCE.append((status, props["criterion"], props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for status, criterion, detail in _ACCEPTANCE:
        line = f"{status}  {criterion}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
