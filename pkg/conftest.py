import pytest


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="also run the ten-seed trend checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: ten-seed trend reproduction, minutes of training")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="pass --run-slow to run the ten-seed trend checks")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
