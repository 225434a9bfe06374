from __future__ import annotations

import pytest

from carecircle.ontology import load_default_ontology
from carecircle.simbench import SimConfig, build_world, generate_corpus


@pytest.fixture(scope="session")
def schema():
    return load_default_ontology()


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(SimConfig(n_circles=6, seed=11))


@pytest.fixture(scope="session")
def small_world(small_corpus):
    world = build_world(small_corpus)
    yield world
    world.close()
