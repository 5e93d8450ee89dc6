import os

import hypothesis
import numpy as np
import pytest

import audit_logger

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=100, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fast"))

RUN_SLOW = os.environ.get("FIRESIGHT_RUN_SLOW") == "1"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance checks (set FIRESIGHT_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="slow; set FIRESIGHT_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def event_log(tmp_path):
    """Each test logs into its own file."""
    previous = audit_logger.EVENT_LOG_PATH
    path = str(tmp_path / "events.log")
    audit_logger.configure(path)
    audit_logger.set_run_id(None)
    yield path
    audit_logger.configure(previous)
