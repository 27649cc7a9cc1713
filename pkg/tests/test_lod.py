import numpy as np
import pytest
import scipy.sparse as sp

from beclod.fem import (
    assemble_mass,
    assemble_stiffness,
    assemble_weighted_mass,
    interpolation_matrix,
)
from beclod.lod import (
    build_lod_space,
    cache_key,
    canonical_form,
    default_rule,
    form_fingerprint,
    load_space,
    potential_form,
    project_a,
    project_l2,
    save_space,
    solve_corrector,
)
from beclod.mesh import build_box_mesh, refine_uniform

from conftest import harmonic_field


def test_form_validation():
    form = canonical_form()
    assert form.kind == "canonical"
    assert form.potential is None
    with pytest.raises(ValueError):
        potential_form(None)
    pot = potential_form(harmonic_field())
    assert pot.kind == "potential_adapted"
    assert pot.diffusion_factor == 0.5


def test_form_fingerprint_distinguishes():
    f1 = form_fingerprint(canonical_form())
    f2 = form_fingerprint(potential_form(harmonic_field()))
    assert f1 != f2
    from beclod.fem import ScalarField

    unlabeled = ScalarField(lambda x: x[..., 0])
    with pytest.raises(ValueError):
        form_fingerprint(potential_form(unlabeled))


def test_factor_one_space_is_coarse_space():
    coarse = build_box_mesh(1, (0.0,), (1.0,), (8,))
    pair = refine_uniform(coarse, 1)
    space = build_lod_space(pair, canonical_form(), ell=2)
    assert space.Q.nnz == 0
    eye = sp.identity(space.n, format="csr")
    assert (space.Phi != eye).nnz == 0


def test_shapes_and_solvers(space_1d):
    n, nf = space_1d.n, space_1d.pair.fine.n_interior
    assert space_1d.Phi.shape == (n, nf)
    assert space_1d.M_lod.shape == (n, n)
    b = np.linspace(-1.0, 1.0, n)
    x = space_1d.m_solve(b)
    assert np.abs(space_1d.M_lod @ x - b).max() < 1e-12
    xc = space_1d.m_solve(b + 2j * b)
    assert np.abs(space_1d.M_lod @ xc - (b + 2j * b)).max() < 1e-12


def test_galerkin_identities(space_2d, rng):
    space = space_2d
    fine = space.pair.fine
    A_f = space.a_form_fine()
    M_f = assemble_mass(fine)
    P = interpolation_matrix(space.pair)

    # orthogonality of the corrected basis to the coarse quasi-interpolant
    PMQ = (P @ M_f @ space.Q.T).toarray()
    assert np.abs(PMQ).max() < 1e-10
    # consequence: corrected and plain coarse Gram blocks agree
    lhs = (P @ M_f @ space.Phi.T).toarray()
    rhs = (P @ M_f @ P.T).toarray()
    assert np.abs(lhs - rhs).max() < 1e-10

    # Galerkin matrices equal the fine operators restricted to the basis:
    # A_lod is the plain stiffness block, Vmass_lod the weighted-mass block,
    # and together they reassemble the corrector form.
    A_stiff = assemble_stiffness(fine)
    V_f = assemble_weighted_mass(fine, harmonic_field(), default_rule(fine.dim))
    assert np.abs(
        (space.A_lod - space.Phi @ A_stiff @ space.Phi.T).toarray()
    ).max() < 1e-12
    assert np.abs(
        (space.Vmass_lod - space.Phi @ V_f @ space.Phi.T).toarray()
    ).max() < 1e-12
    assert np.abs(
        (space.M_lod - space.Phi @ M_f @ space.Phi.T).toarray()
    ).max() < 1e-12
    assert np.abs(
        (space.a_form_lod() - (0.5 * space.A_lod + space.Vmass_lod)).toarray()
    ).max() < 1e-12
    assert np.abs(
        (space.a_form_lod() - space.Phi @ A_f @ space.Phi.T).toarray()
    ).max() < 1e-12


def test_projection_operators(space_2d, rng):
    space = space_2d
    u = rng.normal(size=space.pair.fine.n_interior)
    a_coef = project_a(space, u)
    # a-orthogonality of the projection error
    res = space.Phi @ (space.a_form_fine() @ (u - space.expand(a_coef)))
    assert np.abs(res).max() < 1e-10
    # idempotence
    again = project_a(space, space.expand(a_coef))
    assert np.abs(again - a_coef).max() < 1e-11

    l_coef = project_l2(space, u)
    M_f = assemble_mass(space.pair.fine)
    res2 = space.Phi @ (M_f @ (u - space.expand(l_coef)))
    assert np.abs(res2).max() < 1e-10


def test_corrector_linearity(space_1d_local, rng):
    space = space_1d_local
    pair, form = space.pair, space.form
    K = pair.coarse.n_simplices // 2
    v1 = rng.normal(size=pair.coarse.n_interior)
    v2 = rng.normal(size=pair.coarse.n_interior)
    w1 = solve_corrector(pair, form, K, 2, v1)
    w2 = solve_corrector(pair, form, K, 2, v2)
    w12 = solve_corrector(pair, form, K, 2, 2.0 * v1 - 3.0 * v2)
    assert np.abs(w12 - (2.0 * w1 - 3.0 * w2)).max() < 1e-11


def test_corrector_against_global_saddle():
    # saturating localization: the patch solve must equal the full-domain one
    coarse = build_box_mesh(1, (0.0,), (1.0,), (8,))
    pair = refine_uniform(coarse, 4)
    form = canonical_form()
    fine = pair.fine
    A = assemble_stiffness(fine).toarray()
    P = interpolation_matrix(pair).toarray()
    M = assemble_mass(fine).toarray()
    B = P @ M
    nf, nc = A.shape[0], B.shape[0]
    saddle = np.zeros((nf + nc, nf + nc))
    saddle[:nf, :nf] = A
    saddle[:nf, nf:] = B.T
    saddle[nf:, :nf] = B

    K = 3
    v = np.zeros(coarse.n_interior)
    v[2] = 1.0
    # element-restricted stiffness rhs for hat dofs of element K
    kids = pair.fine_simplices_of_coarse(K)
    A_K = assemble_stiffness_on(fine, kids)
    hat = _hat_values_on_fine(pair, K, v)
    rhs = np.concatenate([A_K @ hat, np.zeros(nc)])
    sol = np.linalg.lstsq(saddle, rhs, rcond=None)[0][:nf]

    w = solve_corrector(pair, form, K, ell=8, v_H=v)
    assert np.abs(w - sol).max() < 1e-9


def assemble_stiffness_on(fine, elements):
    from beclod.fem import _stiffness_local, scatter_element_matrices

    local = _stiffness_local(fine, elements=elements)
    return scatter_element_matrices(fine, local, elements=elements).toarray()


def _hat_values_on_fine(pair, K, v_interior):
    full = pair.coarse.full_values(v_interior)
    from beclod.mesh import barycentric_coordinates, locate_simplex

    pts = pair.fine.vertices
    idx = locate_simplex(pair.coarse, pts)
    lam = barycentric_coordinates(pair.coarse, idx, pts)
    vals = np.einsum("pi,pi->p", lam, full[pair.coarse.simplices[idx]])
    return vals[~pair.fine.is_boundary]


def test_corrector_decay_with_patch_radius():
    coarse = build_box_mesh(1, (0.0,), (1.0,), (32,))
    pair = refine_uniform(coarse, 2)
    form = canonical_form()
    K = 16
    v = np.zeros(coarse.n_interior)
    v[15] = 1.0
    ref = solve_corrector(pair, form, K, ell=32, v_H=v)
    errs = []
    for ell in range(1, 7):
        w = solve_corrector(pair, form, K, ell=ell, v_H=v)
        errs.append(np.linalg.norm(w - ref))
    assert all(errs[i + 1] <= errs[i] + 1e-15 for i in range(len(errs) - 1))
    assert errs[-1] < 0.05 * errs[0]


def test_build_deterministic_and_threaded():
    coarse = build_box_mesh(2, (0.0, 0.0), (1.0, 1.0), (3, 3))
    pair = refine_uniform(coarse, 2)
    form = canonical_form()
    s1 = build_lod_space(pair, form, ell=1)
    s2 = build_lod_space(pair, form, ell=1)
    s3 = build_lod_space(pair, form, ell=1, threads=3)
    for other in (s2, s3):
        assert (s1.Phi != other.Phi).nnz == 0
        assert np.array_equal(s1.Phi.data, other.Phi.data)
        assert np.array_equal(s1.omega.V, other.omega.V)


def test_cache_roundtrip(tmp_path, space_2d):
    space = space_2d
    path = tmp_path / "space.npz"
    save_space(space, path)
    loaded = load_space(path, space.pair, space.form, ell=4)
    assert np.array_equal(loaded.Phi.data, space.Phi.data)
    assert np.array_equal(loaded.Phi.indices, space.Phi.indices)
    assert np.array_equal(loaded.omega.V, space.omega.V)
    assert np.array_equal(loaded.omega.J, space.omega.J)
    assert np.abs(
        (loaded.M_lod - space.M_lod).toarray()
    ).max() == 0.0

    with pytest.raises(ValueError):
        load_space(path, space.pair, space.form, ell=5)
    with pytest.raises(ValueError):
        load_space(path, space.pair, canonical_form(), ell=4)


def test_cache_key_content(space_2d):
    key = cache_key(space_2d.pair, space_2d.form, 4)
    assert key["ell"] == 4
    other = cache_key(space_2d.pair, canonical_form(), 4)
    assert key["form"] != other["form"]
    assert {k: v for k, v in key.items() if k != "form"} == {
        k: v for k, v in other.items() if k != "form"
    }


def test_save_requires_tensor(tmp_path):
    coarse = build_box_mesh(1, (0.0,), (1.0,), (8,))
    pair = refine_uniform(coarse, 2)
    space = build_lod_space(pair, canonical_form(), ell=2,
                            build_tensor=False)
    assert space.omega is None
    with pytest.raises(ValueError):
        save_space(space, tmp_path / "x.npz")
