from pathlib import Path

import pytest

from roomclear.floorplan import load_scenario

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixture_scenario():
    def load(name):
        return load_scenario(FIXTURES / f"{name}.txt")

    return load
