import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SMALL_FIXTURE = {"xbd": 2, "s2looking": 2, "qfabric": 2, "fmow_rgb": 3, "fmow_sentinel": 3,
                 "single_image_corpus": 5}


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    from tempeo.fixtures import FixtureConfig, make_fixtures

    root = tmp_path_factory.mktemp("fixtures")
    make_fixtures(root, FixtureConfig(seed=7, scenes=dict(SMALL_FIXTURE)))
    return root


@pytest.fixture(scope="session")
def fixture_sources(fixture_root):
    from tempeo.fixtures import fixture_sources

    return fixture_sources(fixture_root)


@pytest.fixture(scope="session")
def corpus(fixture_sources):
    from tempeo.taskgen import BuildConfig, emit_corpus

    return list(emit_corpus(fixture_sources, BuildConfig(seed=3)))


def pytest_terminal_summary(terminalreporter):
    from _acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
