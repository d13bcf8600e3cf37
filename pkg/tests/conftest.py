import json
from pathlib import Path

import pytest

from darkpool import policy, qvi
from darkpool.model import parse_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
_ACCEPTANCE = pytest.StashKey[list]()


def load(name):
    """(document, market, costs, grid) for a shipped config."""
    with open(CONFIGS / f"{name}.json", encoding="utf-8") as fh:
        doc = json.load(fh)
    return (doc, *parse_config(doc))


@pytest.fixture(scope="session")
def solved():
    """Solved surfaces and policy tables for the shipped continuous configs, cached per session."""
    cache = {}

    def get(name, variant):
        if (name, variant) not in cache:
            _, market, costs, grid = load(name)
            surface = qvi.solve(variant, market, costs, grid)
            cache[(name, variant)] = (surface, policy.extract_regions(surface))
        return cache[(name, variant)]

    return get


@pytest.fixture
def acceptance_log(request):
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])
    return lines.append


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
