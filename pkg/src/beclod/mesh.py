"""Simplicial meshes on axis-aligned boxes with nested uniform refinement.

Vertices are the nodes of a uniform tensor grid, ordered lexicographically by
grid index.  Squares are split into two triangles along the low-low/high-high
diagonal; cubes into the six Kuhn tetrahedra, one per ordering of the local
coordinates.  Both splits are reproduced under integer grid refinement, so the
fine mesh of `refine_uniform` is nested in the coarse one.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse

__all__ = [
    "InvalidDomainError",
    "SimplicialMesh",
    "MeshPair",
    "build_box_mesh",
    "refine_uniform",
    "patch",
    "node_patch_support",
    "locate_simplex",
    "barycentric_coordinates",
]


class InvalidDomainError(ValueError):
    """Degenerate box, bad cell count, or malformed refinement request."""


def _unit_cell_simplices(dim):
    """Corner-offset tuples of the simplices tiling one grid cell.

    The 3d Kuhn tetrahedron for the axis ordering s is
    {0 <= xi_{s2} <= xi_{s1} <= xi_{s0} <= 1}; odd orderings have their last
    two vertices swapped so every tetrahedron is positively oriented.
    """
    if dim == 1:
        return [((0,), (1,))]
    if dim == 2:
        return [((0, 0), (1, 0), (1, 1)), ((0, 0), (1, 1), (0, 1))]
    out = []
    for perm in itertools.permutations(range(3)):
        verts = [(0, 0, 0)]
        cur = [0, 0, 0]
        for axis in perm:
            cur = list(cur)
            cur[axis] = 1
            verts.append(tuple(cur))
        inversions = sum(
            perm[a] > perm[b] for a in range(3) for b in range(a + 1, 3)
        )
        if inversions % 2:
            verts[2], verts[3] = verts[3], verts[2]
        out.append(tuple(verts))
    return out


# ordering-code -> Kuhn sub-simplex index, code = 9*s0 + 3*s1 + s2
_KUHN_SUB = np.full(27, -1, dtype=np.int64)
for _i, _p in enumerate(itertools.permutations(range(3))):
    _KUHN_SUB[9 * _p[0] + 3 * _p[1] + _p[2]] = _i


@dataclass
class SimplicialMesh:
    """Conforming simplicial mesh of an axis-aligned box.

    Interior degrees of freedom exclude every vertex on the box boundary
    (homogeneous Dirichlet conditions); `dof_of_vertex` maps vertex index to
    interior dof index, -1 on the boundary.
    """

    dim: int
    lower: np.ndarray
    upper: np.ndarray
    cells: tuple
    vertices: np.ndarray
    simplices: np.ndarray
    is_boundary: np.ndarray
    interior: np.ndarray = field(init=False)
    dof_of_vertex: np.ndarray = field(init=False)

    def __post_init__(self):
        self.interior = np.flatnonzero(~self.is_boundary)
        dof = np.full(self.n_vertices, -1, dtype=np.int64)
        dof[self.interior] = np.arange(self.interior.size)
        self.dof_of_vertex = dof
        self._cache = {}

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_simplices(self):
        return self.simplices.shape[0]

    @property
    def n_interior(self):
        return self.interior.size

    @property
    def mesh_size(self):
        """Longest edge over all simplices."""
        if "mesh_size" not in self._cache:
            hmax = 0.0
            verts = self.vertices
            for a, b in itertools.combinations(range(self.dim + 1), 2):
                d = verts[self.simplices[:, a]] - verts[self.simplices[:, b]]
                hmax = max(hmax, float(np.sqrt((d * d).sum(axis=1)).max()))
            self._cache["mesh_size"] = hmax
        return self._cache["mesh_size"]

    def _incidence(self):
        """Sparse simplex-by-vertex incidence (entries 1)."""
        if "incidence" not in self._cache:
            ne, nv = self.n_simplices, self.n_vertices
            rows = np.repeat(np.arange(ne), self.dim + 1)
            cols = self.simplices.reshape(-1)
            inc = sparse.csr_matrix(
                (np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(ne, nv)
            )
            self._cache["incidence"] = inc
        return self._cache["incidence"]

    def element_adjacency(self):
        """Boolean simplex adjacency graph (sharing at least one vertex)."""
        if "adjacency" not in self._cache:
            inc = self._incidence()
            adj = (inc @ inc.T).astype(bool).tocsr()
            self._cache["adjacency"] = adj
        return self._cache["adjacency"]

    def vertex_to_simplices(self):
        """CSC incidence; column j lists the simplices containing vertex j."""
        if "vtos" not in self._cache:
            self._cache["vtos"] = self._incidence().tocsc()
        return self._cache["vtos"]

    def full_values(self, coeffs):
        """Expand an interior-dof vector to all vertices, zero on the boundary."""
        out = np.zeros(self.n_vertices, dtype=np.result_type(coeffs, float))
        out[self.interior] = coeffs
        return out


@dataclass
class MeshPair:
    """A coarse mesh and its nested uniform refinement."""

    coarse: SimplicialMesh
    fine: SimplicialMesh
    refinement_factor: int
    parent_map: np.ndarray  # fine simplex -> coarse simplex

    def __post_init__(self):
        self._cache = {}

    def fine_simplices_of_coarse(self, k):
        """Fine simplex indices refining coarse simplex k (sorted)."""
        if "children" not in self._cache:
            order = np.argsort(self.parent_map, kind="stable")
            starts = np.searchsorted(
                self.parent_map[order], np.arange(self.coarse.n_simplices + 1)
            )
            self._cache["children"] = (order, starts)
        order, starts = self._cache["children"]
        return np.sort(order[starts[k] : starts[k + 1]])


def build_box_mesh(dim, lower_corner, upper_corner, cells_per_axis):
    """Uniform simplicial mesh of a box with `cells_per_axis` grid cells."""
    if dim not in (1, 2, 3):
        raise InvalidDomainError(f"dim must be 1, 2 or 3, got {dim}")
    try:
        lower = np.broadcast_to(
            np.asarray(lower_corner, dtype=float), (dim,)
        ).copy()
        upper = np.broadcast_to(
            np.asarray(upper_corner, dtype=float), (dim,)
        ).copy()
        cells = np.broadcast_to(
            np.asarray(cells_per_axis, dtype=np.int64), (dim,)
        ).copy()
    except ValueError as err:
        raise InvalidDomainError(
            f"corners/cells do not broadcast to dim={dim}: {err}"
        ) from err
    if np.any(upper <= lower):
        raise InvalidDomainError(f"degenerate box: lower={lower}, upper={upper}")
    if np.any(cells < 1):
        raise InvalidDomainError(f"need at least one cell per axis, got {cells}")

    axes = [np.linspace(lower[a], upper[a], cells[a] + 1) for a in range(dim)]
    grids = np.meshgrid(*axes, indexing="ij")
    vertices = np.stack([g.reshape(-1) for g in grids], axis=1)

    vshape = tuple(int(c) + 1 for c in cells)
    vidx = np.unravel_index(np.arange(vertices.shape[0]), vshape)
    is_boundary = np.zeros(vertices.shape[0], dtype=bool)
    for a in range(dim):
        is_boundary |= (vidx[a] == 0) | (vidx[a] == cells[a])

    cell_idx = np.stack(
        np.meshgrid(*[np.arange(c) for c in cells], indexing="ij"), axis=-1
    ).reshape(-1, dim)
    blocks = []
    for offsets in _unit_cell_simplices(dim):
        ids = [
            np.ravel_multi_index(tuple((cell_idx + np.asarray(o)).T), vshape)
            for o in offsets
        ]
        blocks.append(np.stack(ids, axis=1))
    # cell-major ordering: simplex index = cell * per_cell + sub
    simplices = np.stack(blocks, axis=1).reshape(-1, dim + 1)

    return SimplicialMesh(
        dim=dim,
        lower=lower,
        upper=upper,
        cells=tuple(int(c) for c in cells),
        vertices=vertices,
        simplices=np.ascontiguousarray(simplices, dtype=np.int64),
        is_boundary=is_boundary,
    )


def locate_simplex(mesh, points):
    """Indices of simplices containing the given points.

    Points on internal facets are assigned consistently (lower cell, first
    matching coordinate ordering), which is harmless for evaluating continuous
    piecewise-linear functions.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    cells = np.asarray(mesh.cells)
    steps = (mesh.upper - mesh.lower) / cells
    rel = (points - mesh.lower) / steps
    cidx = np.clip(np.floor(rel).astype(np.int64), 0, cells - 1)
    xi = rel - cidx
    lin = np.ravel_multi_index(tuple(cidx.T), tuple(mesh.cells))
    if mesh.dim == 1:
        return lin
    if mesh.dim == 2:
        sub = (xi[:, 1] > xi[:, 0]).astype(np.int64)
        return 2 * lin + sub
    order = np.argsort(-xi, axis=1, kind="stable")
    sub = _KUHN_SUB[9 * order[:, 0] + 3 * order[:, 1] + order[:, 2]]
    return 6 * lin + sub


def barycentric_coordinates(mesh, elements, points):
    """Barycentric coordinates of points w.r.t. the given simplices."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    verts = mesh.vertices[mesh.simplices[elements]]  # (n, d+1, d)
    T = (verts[:, 1:, :] - verts[:, :1, :]).transpose(0, 2, 1)  # columns v_k - v_0
    lam = np.linalg.solve(T, (points - verts[:, 0, :])[..., None])[..., 0]
    lam0 = 1.0 - lam.sum(axis=1)
    return np.concatenate([lam0[:, None], lam], axis=1)


def refine_uniform(coarse, factor):
    """Refine every grid cell by an integer factor and re-split."""
    factor = int(factor)
    if factor < 1:
        raise InvalidDomainError(f"refinement factor must be >= 1, got {factor}")
    fine = build_box_mesh(
        coarse.dim,
        coarse.lower,
        coarse.upper,
        tuple(c * factor for c in coarse.cells),
    )
    centers = fine.vertices[fine.simplices].mean(axis=1)
    parent_map = locate_simplex(coarse, centers)
    return MeshPair(
        coarse=coarse, fine=fine, refinement_factor=factor, parent_map=parent_map
    )


def patch(mesh, k, ell):
    """Simplex indices of the ell-layer vertex-adjacency patch around k.

    Layer 0 is {k}; each further layer adds every simplex sharing a vertex
    with the current patch.
    """
    ne = mesh.n_simplices
    if not 0 <= k < ne:
        raise IndexError(f"simplex index {k} out of range")
    if ell < 0:
        raise ValueError(f"patch layers must be >= 0, got {ell}")
    mask = np.zeros(ne, dtype=bool)
    mask[k] = True
    if ell > 0:
        adj = mesh.element_adjacency()
        for _ in range(ell):
            if mask.all():
                break
            mask = (adj @ mask.astype(np.int64)) > 0
    return np.flatnonzero(mask)


def node_patch_support(mesh, j):
    """Simplices forming the support of the interior hat function at vertex j."""
    if not 0 <= j < mesh.n_vertices:
        raise IndexError(f"vertex index {j} out of range")
    if mesh.is_boundary[j]:
        raise ValueError(f"vertex {j} lies on the boundary and carries no dof")
    return np.sort(mesh.vertex_to_simplices()[:, j].indices)
