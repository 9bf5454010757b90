import random

import pytest

from dohmeter.testing import DohServerConfig, FixtureDnsServer, FixtureDohServer, Zone
from dohmeter.testing.lab import Lab


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def zone():
    return Zone(synthesize=True)


@pytest.fixture
def dns_server(zone):
    with FixtureDnsServer(zone) as server:
        yield server


@pytest.fixture
def doh_factory(zone):
    """Start DoH fixtures with arbitrary configs; all are stopped at teardown."""
    started = []

    def make(**config):
        server = FixtureDohServer(zone, DohServerConfig(**config)).start()
        started.append(server)
        return server

    yield make
    for server in started:
        server.stop()


@pytest.fixture
def doh_server(doh_factory):
    return doh_factory()


@pytest.fixture(scope="module")
def lab():
    with Lab() as lab:
        yield lab


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
