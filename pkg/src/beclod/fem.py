"""P1 finite-element kernels: quadrature tables, element matrices, interpolation.

All assembled operators act on interior degrees of freedom (homogeneous
Dirichlet boundary eliminated) unless `include_boundary` is requested.
Quadrature rules live on the reference simplex in barycentric coordinates,
with weights summing to the reference volume 1/dim!.
"""

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sparse

from .mesh import barycentric_coordinates, locate_simplex

__all__ = [
    "ScalarField",
    "QuadratureRule",
    "quadrature_rule",
    "element_geometry",
    "assemble_stiffness",
    "assemble_mass",
    "assemble_weighted_mass",
    "interpolation_matrix",
    "l2_dot",
    "quad_points_physical",
    "p1_at_quad",
    "p1_gradient",
    "integrate_quad",
]


@dataclass(frozen=True)
class ScalarField:
    """Real scalar field on the box; evaluator maps (..., dim) arrays to (...).

    `label` gives the field a stable identity for disk-cache keys;
    `smoothness_tag` is "smooth" or "discontinuous" (discontinuities must be
    aligned with mesh faces so per-element quadrature never straddles a jump).
    """

    evaluator: Callable
    smoothness_tag: str = "smooth"
    label: Optional[str] = None

    def __call__(self, x):
        return self.evaluator(x)


@dataclass(frozen=True)
class QuadratureRule:
    dim: int
    degree_exact: int
    points: np.ndarray  # (n, dim+1) barycentric coordinates
    weights: np.ndarray  # (n,), summing to the reference-simplex volume


def _orbit(points, weights, seed, w):
    """Append all distinct permutations of a barycentric seed."""
    for lam in sorted(set(itertools.permutations(seed))):
        points.append(lam)
        weights.append(w)


def _triangle_rule_19():
    # 19-point degree-9 rule of the Lyness-Jespersen/Dunavant family:
    # centroid + four 3-point orbits + one 6-point orbit, positive weights.
    # Parameters refined to full double precision by least-squares matching of
    # all monomial moments of degree <= 9 (max relative error 3.4e-16).
    # Weights below are unit-normalized (sum 1) and get scaled by the area 1/2.
    w1 = 9.713579628279310485e-02
    w2 = 3.133470022713173014e-02
    w3 = 7.782754100478170289e-02
    w4 = 7.964773892720587722e-02
    w5 = 2.557767565869674062e-02
    w6 = 4.328353937729313011e-02
    c = 4.896825191987432269e-01
    e = 4.370895914929395221e-01
    g = 1.882035356190386866e-01
    s = 4.472951339445141450e-02
    t = 7.411985987844983415e-01
    u = 3.683841205474042840e-02
    pts, wts = [], []
    third = 1.0 / 3.0
    _orbit(pts, wts, (third, third, third), w1)
    for p, w in ((c, w2), (e, w3), (g, w4), (s, w5)):
        _orbit(pts, wts, (1.0 - 2.0 * p, p, p), w)
    _orbit(pts, wts, (1.0 - t - u, t, u), w6)
    points = np.array(pts)
    weights = 0.5 * np.array(wts)
    assert points.shape == (19, 3)
    return QuadratureRule(2, 9, points, weights)


def _tetrahedron_rule_45():
    # 45-point degree-8 rule (centroid + 2x4 + 2x6 + 2x12 orbits).  The
    # centroid weight is negative; its corrected value is pinned exactly and
    # the remaining parameters are refined by least-squares moment matching
    # over all degree <= 8 monomials (max relative error 4.7e-16).  Weights
    # sum to the reference volume 1/6.
    w1 = -0.393270066412926145e-1
    w2 = 4.081316059342501162e-03
    w3 = 6.580867733043241135e-04
    w4 = 4.384258825122838363e-03
    w5 = 1.383006384250963505e-02
    w6 = 4.240437424683877153e-03
    w7 = 2.238739739614217968e-03
    a2 = 6.175871903000813568e-01
    a3 = 9.037635088221033230e-01
    a4 = 4.502229043567193001e-01
    a5 = 3.162695526014490666e-01
    x6 = 2.319010893971502063e-01
    y6 = 5.132800333608807941e-01
    x7 = 3.797004847182881837e-02
    y7 = 7.303134278075394947e-01
    pts, wts = [], []
    _orbit(pts, wts, (0.25, 0.25, 0.25, 0.25), w1)
    for a, w in ((a2, w2), (a3, w3)):
        b = (1.0 - a) / 3.0
        _orbit(pts, wts, (b, b, b, a), w)
    for a, w in ((a4, w4), (a5, w5)):
        _orbit(pts, wts, (a, a, 0.5 - a, 0.5 - a), w)
    for x, y, w in ((x6, y6, w6), (x7, y7, w7)):
        _orbit(pts, wts, (x, x, y, 1.0 - 2.0 * x - y), w)
    points = np.array(pts)
    weights = np.array(wts)
    assert points.shape == (45, 4)
    return QuadratureRule(3, 8, points, weights)


_TRI19 = _triangle_rule_19()
_TET45 = _tetrahedron_rule_45()


def quadrature_rule(dim, requested_degree):
    """Rule exact for polynomials up to the requested degree.

    1d: Gauss-Legendre with ceil((degree+1)/2) points, any degree.
    2d: the fixed 19-point degree-9 triangle rule (degree <= 9).
    3d: the fixed 45-point degree-8 tetrahedron rule (degree <= 8).
    """
    if requested_degree < 0:
        raise ValueError(f"degree must be >= 0, got {requested_degree}")
    if dim == 1:
        n = max((requested_degree + 2) // 2, 1)
        x, w = np.polynomial.legendre.leggauss(n)
        s = 0.5 * (x + 1.0)
        points = np.stack([1.0 - s, s], axis=1)
        return QuadratureRule(1, 2 * n - 1, points, 0.5 * w)
    if dim == 2:
        if requested_degree > 9:
            raise ValueError(f"no 2d rule beyond degree 9 ({requested_degree})")
        return _TRI19
    if dim == 3:
        if requested_degree > 8:
            raise ValueError(f"no 3d rule beyond degree 8 ({requested_degree})")
        return _TET45
    raise ValueError(f"dim must be 1, 2 or 3, got {dim}")


def element_geometry(mesh):
    """Per-element volumes and constant P1 basis gradients.

    Returns (volumes (ne,), grads (ne, dim+1, dim)); cached on the mesh.
    """
    if "geometry" not in mesh._cache:
        d = mesh.dim
        verts = mesh.vertices[mesh.simplices]
        edges = verts[:, 1:, :] - verts[:, :1, :]  # row k: (v_{k+1} - v_0)^T
        vol = np.abs(np.linalg.det(edges)) / math.factorial(d)
        winv = np.linalg.inv(edges)  # column k: gradient of barycentric k+1
        grads = np.empty((mesh.n_simplices, d + 1, d))
        grads[:, 1:, :] = winv.transpose(0, 2, 1)
        grads[:, 0, :] = -winv.sum(axis=2)
        mesh._cache["geometry"] = (vol, grads)
    return mesh._cache["geometry"]


def scatter_element_matrices(mesh, local, include_boundary=False, elements=None):
    """Sum (nel, dim+1, dim+1) local matrices into a global sparse operator."""
    sim = mesh.simplices if elements is None else mesh.simplices[elements]
    d1 = mesh.dim + 1
    rows = np.repeat(sim, d1, axis=1).reshape(-1)
    cols = np.tile(sim, (1, d1)).reshape(-1)
    vals = local.reshape(-1)
    if not include_boundary:
        dof = mesh.dof_of_vertex
        rows = dof[rows]
        cols = dof[cols]
        keep = (rows >= 0) & (cols >= 0)
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
        n = mesh.n_interior
    else:
        n = mesh.n_vertices
    out = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    out.sum_duplicates()
    return out


def _stiffness_local(mesh, elements=None):
    vol, grads = element_geometry(mesh)
    if elements is not None:
        vol, grads = vol[elements], grads[elements]
    return np.einsum("eid,ejd,e->eij", grads, grads, vol)


def _mass_local(mesh, elements=None):
    d = mesh.dim
    vol, _ = element_geometry(mesh)
    if elements is not None:
        vol = vol[elements]
    base = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    return vol[:, None, None] * base


def _weighted_mass_local(mesh, V, rule, elements=None):
    vol, _ = element_geometry(mesh)
    if elements is not None:
        vol = vol[elements]
    x = quad_points_physical(mesh, rule, elements=elements)
    vvals = np.asarray(V(x), dtype=float)
    lam = rule.points
    scale = vol * math.factorial(mesh.dim)
    return np.einsum("eq,q,qi,qj,e->eij", vvals, rule.weights, lam, lam, scale)


def assemble_stiffness(mesh, include_boundary=False):
    """Sparse matrix of (grad psi_i, grad psi_j); exact for P1."""
    return scatter_element_matrices(mesh, _stiffness_local(mesh), include_boundary)


def assemble_mass(mesh, include_boundary=False):
    """Sparse matrix of (psi_i, psi_j); exact closed-form P1 mass."""
    return scatter_element_matrices(mesh, _mass_local(mesh), include_boundary)


def assemble_weighted_mass(mesh, V, rule, include_boundary=False):
    """Sparse matrix of (V psi_i, psi_j) by per-element quadrature."""
    return scatter_element_matrices(
        mesh, _weighted_mass_local(mesh, V, rule), include_boundary
    )


def interpolation_matrix(pair, include_boundary_cols=False):
    """Hat-function values of coarse nodes at fine vertices.

    Row i holds phi_i evaluated at every fine vertex; rows are indexed by
    coarse interior dofs, columns by fine interior dofs (or by all fine
    vertices when `include_boundary_cols` is set).
    """
    coarse, fine = pair.coarse, pair.fine
    els = locate_simplex(coarse, fine.vertices)
    lam = barycentric_coordinates(coarse, els, fine.vertices)
    rows_v = coarse.simplices[els].reshape(-1)
    cols_v = np.repeat(np.arange(fine.n_vertices), coarse.dim + 1)
    vals = lam.reshape(-1)
    keep = vals > 1e-12  # drop zero/noise slots of the containing simplex
    rows_v, cols_v, vals = rows_v[keep], cols_v[keep], vals[keep]

    rows = coarse.dof_of_vertex[rows_v]
    keep = rows >= 0
    rows, cols_v, vals = rows[keep], cols_v[keep], vals[keep]
    if include_boundary_cols:
        cols, ncols = cols_v, fine.n_vertices
    else:
        cols = fine.dof_of_vertex[cols_v]
        keep = cols >= 0
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
        ncols = fine.n_interior
    out = sparse.coo_matrix(
        (vals, (rows, cols)), shape=(coarse.n_interior, ncols)
    ).tocsr()
    out.sum_duplicates()
    return out


def l2_dot(mesh, coeffs_u, coeffs_v, mass):
    """Discrete inner product (u, v) = integral of u * conj(v)."""
    if len(coeffs_u) != mass.shape[0] or len(coeffs_v) != mass.shape[0]:
        raise ValueError("coefficient length does not match the mass matrix")
    return complex(np.vdot(coeffs_v, mass @ coeffs_u))


def quad_points_physical(mesh, rule, elements=None):
    """Physical coordinates of all quadrature points, shape (ne, nq, dim)."""
    verts = mesh.vertices[mesh.simplices]
    if elements is not None:
        verts = verts[elements]
    return np.einsum("qa,ead->eqd", rule.points, verts)


def p1_at_quad(mesh, rule, nodal, elements=None):
    """Values of a P1 function (full nodal vector) at quadrature points."""
    vals = nodal[mesh.simplices]
    if elements is not None:
        vals = vals[elements]
    return np.einsum("ea,qa->eq", vals, rule.points)


def p1_gradient(mesh, nodal, elements=None):
    """Constant per-element gradient of a P1 function, shape (ne, dim)."""
    vol, grads = element_geometry(mesh)
    vals = nodal[mesh.simplices]
    if elements is not None:
        vals, grads = vals[elements], grads[elements]
    return np.einsum("ea,ead->ed", vals, grads)


def integrate_quad(mesh, rule, values, elements=None):
    """Integrate per-quadrature-point values (ne, nq) over the mesh."""
    vol, _ = element_geometry(mesh)
    if elements is not None:
        vol = vol[elements]
    scale = math.factorial(mesh.dim)
    return scale * np.einsum("eq,q,e->", values, rule.weights, vol)
