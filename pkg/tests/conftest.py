"""
Shared fixtures: the registry networks and their most used local models.
"""

import sys
from pathlib import Path

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import pytest
from ratefn.local_model import localize
from ratefn.model import load_network


@pytest.fixture(scope="session")
def j1():
    return load_network("J1")


@pytest.fixture(scope="session")
def j1s():
    return load_network("J1s")


@pytest.fixture(scope="session")
def j2():
    return load_network("J2")


@pytest.fixture(scope="session")
def j2u():
    return load_network("J2u")


@pytest.fixture(scope="session")
def j3():
    return load_network("J3")


@pytest.fixture(scope="session")
def p2():
    return load_network("P2")


@pytest.fixture(scope="session")
def p2u():
    return load_network("P2u")


@pytest.fixture(scope="session")
def j2_origin(j2):
    """J2 localized at the origin (both queues constrained)."""
    return localize(j2, [0, 1])


@pytest.fixture(scope="session")
def p2_origin(p2):
    return localize(p2, [0, 1])


@pytest.fixture
def write_network(tmp_path):
    """Write a network dict to a JSON file and return its path."""
    import json

    def _write(data, name="network.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return str(path)

    return _write
