import numpy as np
import pytest

from beclod.fem import ScalarField
from beclod.lod import build_lod_space, canonical_form, potential_form
from beclod.mesh import build_box_mesh, refine_uniform


def harmonic_field():
    return ScalarField(
        lambda x: 0.5 * (np.asarray(x, float) ** 2).sum(axis=-1),
        label="harmonic",
    )


@pytest.fixture(scope="session")
def space_1d():
    """Small 1d canonical space with saturating localization."""
    coarse = build_box_mesh(1, (-4.0,), (4.0,), (16,))
    pair = refine_uniform(coarse, 2)
    return build_lod_space(pair, canonical_form(), ell=16)


@pytest.fixture(scope="session")
def space_1d_local():
    """1d canonical space with genuinely local patches."""
    coarse = build_box_mesh(1, (-4.0,), (4.0,), (32,))
    pair = refine_uniform(coarse, 4)
    return build_lod_space(pair, canonical_form(), ell=2)


@pytest.fixture(scope="session")
def space_2d():
    """Small 2d potential-adapted space."""
    coarse = build_box_mesh(2, (-1.0, -1.0), (1.0, 1.0), (4, 4))
    pair = refine_uniform(coarse, 2)
    return build_lod_space(pair, potential_form(harmonic_field()), ell=4)


@pytest.fixture
def rng():
    return np.random.default_rng(20260815)
