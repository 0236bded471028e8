import pytest

from src.log import configure_logging
from src.protocol.crypto_core import SeededRandom


@pytest.fixture(autouse=True, scope="session")
def _quiet_logs():
    configure_logging("WARNING")


@pytest.fixture(autouse=True)
def _reset_logging_after_test():
    # In-process CLI calls reconfigure logging onto pytest's captured stderr,
    # which is closed once the test ends; rebind to the real stream afterwards.
    yield
    configure_logging("WARNING")


@pytest.fixture
def rng():
    return SeededRandom(1234)
