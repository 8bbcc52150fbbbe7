from __future__ import annotations

import pytest

from voltvar_sim.feeder import FeederModel, apply_topology_event
from voltvar_sim.presets import load_builtin_feeder


@pytest.fixture(scope="session")
def ieee4() -> FeederModel:
    return load_builtin_feeder("ieee4_mod")


@pytest.fixture(scope="session")
def ieee4_closed(ieee4: FeederModel) -> FeederModel:
    return apply_topology_event(ieee4, "switch1", "closed")


@pytest.fixture(scope="session")
def feeder30() -> FeederModel:
    return load_builtin_feeder("feeder30")
