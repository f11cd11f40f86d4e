import numpy as np
import pytest

from subkam.geometry import FLAT_TORUS, HEISENBERG, Lagrangian, ModelSpace, Potential


@pytest.fixture
def torus1():
    return ModelSpace(FLAT_TORUS, 1)


@pytest.fixture
def torus2():
    return ModelSpace(FLAT_TORUS, 2)


@pytest.fixture
def heis():
    return ModelSpace(HEISENBERG, 3)


def free_lagrangian(space):
    """L = |u|^2/2 (U = 0, no one-form)."""
    return Lagrangian(space, Potential(space, []))


def bump_lagrangian(space, coeffs=None):
    """Single-max mechanical potential U = 0.5 + 0.5 cos(2 pi x)."""
    cdim = 2 if space.kind == HEISENBERG else space.dim
    k = [0] * cdim
    k[0] = 1
    pot = Potential(space, [([0] * cdim, 0.5, 0.0), (k, 0.5, 0.0)])
    return Lagrangian(space, pot, coeffs)


def cosproduct_lagrangian(space):
    """U = 0.5 + 0.5 cos(2 pi x) cos(2 pi y) on a 2-D-coordinate space,
    written in the sum basis: 0.5 + 0.25 cos(2pi(x+y)) + 0.25 cos(2pi(x-y))."""
    terms = [([0, 0], 0.5, 0.0), ([1, 1], 0.25, 0.0), ([1, -1], 0.25, 0.0)]
    return Lagrangian(space, Potential(space, terms))


@pytest.fixture
def rng():
    return np.random.default_rng(42)
