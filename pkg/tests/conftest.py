import random
import socket

import pytest

from hygeia.provider import HOSPITAL_RECORDS, InMemoryStore, generate_synthetic, serve_provider
from hygeia.simctl import DEFAULT_DIAGNOSES, DEFAULT_DRUGS, DEFAULT_REGIONS, DEFAULT_TREATMENTS


def free_port_block(n: int) -> int:
    """First port of ``n`` consecutive loopback ports that are currently free."""
    rng = random.Random()
    for _ in range(500):
        base = rng.randint(20000, 60000 - n)
        socks = []
        try:
            for port in range(base, base + n):
                s = socket.socket()
                socks.append(s)
                s.bind(("127.0.0.1", port))
            return base
        except OSError:
            continue
        finally:
            for s in socks:
                s.close()
    raise RuntimeError("no free port block")


def port_is_free(port: int) -> bool:
    with socket.socket() as s:
        try:
            s.bind(("127.0.0.1", port))
        except OSError:
            return False
    return True


def hospital_store(i: int, n: int = 200, seed: int = 42) -> InMemoryStore:
    facility = f"H{i + 1}"
    return InMemoryStore(facility, generate_synthetic(
        seed + i, n, facility, DEFAULT_REGIONS, DEFAULT_DIAGNOSES, DEFAULT_TREATMENTS,
        DEFAULT_DRUGS))


@pytest.fixture
def providers():
    """Factory for HTTP providers on ephemeral ports; all shut down afterwards."""
    started = []

    def start(store, delay_ms=0):
        handle = serve_provider("127.0.0.1:0", HOSPITAL_RECORDS, store, delay_ms=delay_ms)
        started.append(handle)
        return handle

    yield start
    for h in started:
        h.shutdown()


@pytest.fixture
def base_port():
    return free_port_block(12)


@pytest.hookimpl(tryfirst=True, hookwrapper=True)
def pytest_runtest_makereport(item, call):
    """Expose the call-phase report to fixtures as ``item.rep_call``."""
    outcome = yield
    if call.when == "call":
        item.rep_call = outcome.get_result()
