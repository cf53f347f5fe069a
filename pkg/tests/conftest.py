import logging

import numpy as np
import pytest

from ces import fem, geometry
from ces.basis import BoundaryLayout
from ces.component import ComponentProblem, MeshFidelity

logging.getLogger("ces").setLevel(logging.WARNING)


@pytest.fixture(scope="session")
def material():
    return fem.Material()


@pytest.fixture(scope="session")
def coarse_pore_mesh():
    """Single circular pore, intentionally coarse (16 boundary vertices)."""
    return geometry.build_component_mesh(geometry.PoreShape(0.0, 0.0), 1, 16, 2)


@pytest.fixture(scope="session")
def component_problem(material):
    """2x2-pore component at the desk labeling fidelity."""
    return ComponentProblem(geometry.PoreShape(0.0, 0.0), material, fidelity=MeshFidelity(24, 2))


@pytest.fixture(scope="session")
def layout():
    return BoundaryLayout(10, 2.0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
