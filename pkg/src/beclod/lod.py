"""Localized orthogonal decomposition spaces over nested mesh pairs.

The coarse P1 space is corrected element by element: for every coarse simplex
K and every interior hat function phi_j with K in its support, a fine-scale
corrector is solved on an ell-layer patch around K, constrained to the detail
space (fine functions whose local L2 quantities of interest vanish).  The
corrected basis Phi = P - Q spans the LOD space; all coarse operators are
Galerkin restrictions Phi * (fine matrix) * Phi^T.
"""

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from . import tritensor
from .fem import (
    ScalarField,
    assemble_mass,
    assemble_stiffness,
    assemble_weighted_mass,
    interpolation_matrix,
    quadrature_rule,
    _stiffness_local,
    _weighted_mass_local,
)
from .mesh import barycentric_coordinates, patch as mesh_patch

__all__ = [
    "BilinearFormChoice",
    "canonical_form",
    "potential_form",
    "IllPosedPatchError",
    "LodSpace",
    "solve_corrector",
    "build_lod_space",
    "project_a",
    "project_l2",
    "default_rule",
    "form_fingerprint",
    "save_space",
    "load_space",
]

_RESIDUAL_TOL = 1e-10


class IllPosedPatchError(RuntimeError):
    """Patch saddle problem is singular beyond the constrained-null case."""


@dataclass(frozen=True)
class BilinearFormChoice:
    """Bilinear form steering the corrector problems.

    kind "canonical": a(u,v) = (grad u, grad v).
    kind "potential_adapted": a(u,v) = 1/2 (grad u, grad v) + (V u, v).
    """

    kind: str
    potential: Optional[ScalarField] = None
    diffusion_factor: float = 1.0

    def __post_init__(self):
        if self.kind not in ("canonical", "potential_adapted"):
            raise ValueError(f"unknown form kind {self.kind!r}")
        if self.kind == "potential_adapted" and self.potential is None:
            raise ValueError("potential_adapted form requires a potential")


def canonical_form():
    return BilinearFormChoice("canonical", None, 1.0)


def potential_form(V):
    return BilinearFormChoice("potential_adapted", V, 0.5)


def default_rule(dim):
    """Quadrature used for potential terms and the interaction tensor."""
    return quadrature_rule(dim, 9 if dim < 3 else 8)


def form_fingerprint(form):
    """Stable hash of a form choice, used in disk-cache keys."""
    pot = form.potential
    if pot is None:
        plabel = "none"
    elif pot.label is not None:
        plabel = pot.label
    else:
        raise ValueError("caching requires the potential to carry a label")
    payload = f"{form.kind}|{form.diffusion_factor!r}|{plabel}"
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class LodSpace:
    """A corrected coarse space with its Galerkin operators.

    P, Q, Phi map coarse interior dofs to fine interior dofs (N_H x N_h);
    Phi = P - Q holds the fine-mesh coefficients of the corrected basis.
    """

    pair: object
    ell: int
    form: BilinearFormChoice
    P: sparse.csr_matrix
    Q: sparse.csr_matrix
    Phi: sparse.csr_matrix
    M_lod: sparse.csr_matrix
    A_lod: sparse.csr_matrix
    Vmass_lod: sparse.csr_matrix
    omega: Optional[object] = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self):
        return self.Phi.shape[0]

    def expand(self, alpha):
        """Fine interior-dof coefficients of a LOD-space function."""
        return self.Phi.T @ alpha

    def fine_nodal(self, alpha):
        """Fine full nodal values (zeros on the boundary)."""
        return self.pair.fine.full_values(self.expand(alpha))

    def m_solve(self, b):
        """Solve M_lod x = b with a cached factorization."""
        if "m_lu" not in self._cache:
            self._cache["m_lu"] = spla.splu(self.M_lod.tocsc())
        return _solve_real(self._cache["m_lu"], b)

    def galerkin(self, fine_matrix):
        """Restrict a fine interior-dof operator to the LOD space."""
        return (self.Phi @ fine_matrix @ self.Phi.T).tocsr()

    def a_form_fine(self):
        """The corrector form's matrix on the fine mesh (cached)."""
        if "a_form_fine" not in self._cache:
            self._cache["a_form_fine"] = _assemble_form(self.pair.fine, self.form)
        return self._cache["a_form_fine"]

    def a_form_lod(self):
        if "a_form_lod" not in self._cache:
            self._cache["a_form_lod"] = self.galerkin(self.a_form_fine())
        return self._cache["a_form_lod"]


def _solve_real(lu, b):
    """Solve with a real factorization, allowing complex right-hand sides."""
    if np.iscomplexobj(b):
        return lu.solve(np.real(b)) + 1j * lu.solve(np.imag(b))
    return lu.solve(b)


def _clean_noise(w, tol=1e-14):
    """Zero out direct-solver noise in corrector coefficients.

    Hat functions have unit nodal scale, so entries this small carry no
    information and would otherwise pollute the sparsity pattern of the
    corrected basis (and with it the tensor preallocation)."""
    w[np.abs(w) < tol] = 0.0
    return w


def _assemble_form(fine, form, rule=None):
    a = form.diffusion_factor * assemble_stiffness(fine)
    if form.potential is not None:
        rule = rule or default_rule(fine.dim)
        a = a + assemble_weighted_mass(fine, form.potential, rule)
    return a.tocsr()


class _CorrectorContext:
    """Assembled fine-level operators shared by all corrector solves."""

    def __init__(self, pair, form, rule=None):
        self.pair = pair
        self.form = form
        fine = pair.fine
        self.rule = rule or default_rule(fine.dim)
        self.stiff = assemble_stiffness(fine)
        self.mass = assemble_mass(fine)
        if form.potential is not None:
            self.vmass = assemble_weighted_mass(fine, form.potential, self.rule)
            self.a_form = (form.diffusion_factor * self.stiff + self.vmass).tocsr()
        else:
            self.vmass = None
            self.a_form = (form.diffusion_factor * self.stiff).tocsr()
        self.P = interpolation_matrix(pair)
        self.PM = (self.P @ self.mass).tocsc()
        self.vertex_degree = np.diff(fine.vertex_to_simplices().indptr)

    def patch_fine_dofs(self, coarse_elements):
        """Fine interior dofs strictly inside the union of coarse elements."""
        pair, fine = self.pair, self.pair.fine
        fine_els = np.concatenate(
            [pair.fine_simplices_of_coarse(k) for k in coarse_elements]
        )
        pverts = fine.simplices[fine_els].reshape(-1)
        counts = np.bincount(pverts, minlength=fine.n_vertices)
        inside = np.flatnonzero(counts == self.vertex_degree)
        dofs = fine.dof_of_vertex[inside]
        return np.sort(dofs[dofs >= 0]), fine_els

    def constraint_rows(self, pdofs):
        """Quantity-of-interest rows with support meeting the patch dofs."""
        sub = self.PM[:, pdofs].tocsr()
        sub.eliminate_zeros()
        rows = np.flatnonzero(np.diff(sub.indptr))
        return sub[rows], rows

    def element_rhs(self, K, hat_slots, pdofs):
        """r = a_K(phi_j, .) over element K only, restricted to patch dofs.

        hat_slots are local vertex slots of K; returns (len(pdofs), n_rhs).
        """
        pair, coarse, fine = self.pair, self.pair.coarse, self.pair.fine
        children = pair.fine_simplices_of_coarse(K)
        loc = self.form.diffusion_factor * _stiffness_local(fine, children)
        if self.form.potential is not None:
            loc = loc + _weighted_mass_local(fine, self.form.potential, self.rule, children)

        child_verts = np.unique(fine.simplices[children])
        vloc = np.searchsorted(child_verts, fine.simplices[children])
        lam = barycentric_coordinates(
            coarse, np.full(child_verts.size, K), fine.vertices[child_verts]
        )
        out = np.zeros((pdofs.size, len(hat_slots)))
        pverts = fine.interior[pdofs]
        pos = np.searchsorted(child_verts, pverts)
        pos = np.clip(pos, 0, child_verts.size - 1)
        present = child_verts[pos] == pverts
        for col, slot in enumerate(hat_slots):
            vvals = lam[vloc, slot]
            contrib = np.einsum("eij,ej->ei", loc, vvals)
            r_local = np.zeros(child_verts.size)
            np.add.at(r_local, vloc, contrib)
            out[present, col] = r_local[pos[present]]
        return out

    def solve_patch(self, pdofs, B, rhs):
        """Constrained patch solves; rhs is (n_pdofs, n_rhs)."""
        n_p, n_c = pdofs.size, B.shape[0]
        A_pp = self.a_form[pdofs][:, pdofs].tocsc()
        full_rhs = np.vstack([rhs, np.zeros((n_c, rhs.shape[1]))])
        scale = max(np.abs(rhs).max(), 1e-300)

        saddle = sparse.bmat([[A_pp, B.T], [B, None]], format="csc")
        try:
            lu = spla.splu(saddle)
            sol = lu.solve(full_rhs)
            res = saddle @ sol - full_rhs
            if np.abs(res).max() <= _RESIDUAL_TOL * scale:
                return _clean_noise(sol[:n_p])
        except RuntimeError:
            pass

        # Singular saddle (e.g. redundant constraints when the detail space is
        # trivial): the corrector is still unique, recover it through the
        # Schur complement with a least-squares multiplier.
        try:
            a_lu = spla.splu(A_pp)
        except RuntimeError as exc:
            raise IllPosedPatchError(f"singular patch block: {exc}") from exc
        Bd = B.toarray()
        ainv_bt = a_lu.solve(Bd.T)
        ainv_r = a_lu.solve(rhs)
        schur = Bd @ ainv_bt
        mu, *_ = np.linalg.lstsq(schur, Bd @ ainv_r, rcond=None)
        w = ainv_r - ainv_bt @ mu
        if np.abs(B @ w).max() > _RESIDUAL_TOL * scale:
            raise IllPosedPatchError("patch constraints not satisfiable")
        return _clean_noise(w)

    def element_correctors(self, K, ell, hat_slots):
        """Correctors of the hats of K (local slots), on the ell-layer patch."""
        coarse = self.pair.coarse
        patch_els = mesh_patch(coarse, K, ell)
        pdofs, _ = self.patch_fine_dofs(patch_els)
        if pdofs.size == 0:
            return pdofs, np.zeros((0, len(hat_slots)))
        B, _ = self.constraint_rows(pdofs)
        rhs = self.element_rhs(K, hat_slots, pdofs)
        return pdofs, self.solve_patch(pdofs, B, rhs)


def solve_corrector(pair, form, K, ell, v_H, rule=None, context=None):
    """Fine-scale correction of a coarse function, localized to element K.

    v_H may be a coarse interior-dof vector or a full coarse nodal vector.
    Returns the corrector as a fine interior-dof vector (zero off the patch).
    """
    ctx = context or _CorrectorContext(pair, form, rule)
    coarse, fine = pair.coarse, pair.fine
    v_H = np.asarray(v_H, dtype=float)
    if v_H.shape[0] == coarse.n_interior:
        v_full = coarse.full_values(v_H)
    elif v_H.shape[0] == coarse.n_vertices:
        v_full = v_H
    else:
        raise ValueError("coarse coefficient vector has the wrong length")

    patch_els = mesh_patch(coarse, K, ell)
    pdofs, _ = ctx.patch_fine_dofs(patch_els)
    out = np.zeros(fine.n_interior)
    if pdofs.size == 0:
        return out
    B, _ = ctx.constraint_rows(pdofs)

    # a_K(v_H, .) for the P1 function v_H, element K only
    slots = list(range(coarse.dim + 1))
    rhs_hats = ctx.element_rhs(K, slots, pdofs)
    rhs = rhs_hats @ v_full[coarse.simplices[K]]
    w = ctx.solve_patch(pdofs, B, rhs[:, None])
    out[pdofs] = w[:, 0]
    return out


def build_lod_space(
    pair,
    form,
    ell,
    tensor_rule=None,
    build_tensor=True,
    threads=1,
):
    """Assemble the corrected coarse space and its Galerkin operators."""
    coarse, fine = pair.coarse, pair.fine
    ctx = _CorrectorContext(pair, form, tensor_rule)
    n_H, n_h = ctx.P.shape

    interior_slot = coarse.dof_of_vertex[coarse.simplices] >= 0

    def corrector_block(K):
        slots = np.flatnonzero(interior_slot[K])
        if slots.size == 0:
            return None
        pdofs, W = ctx.element_correctors(K, ell, list(slots))
        return coarse.dof_of_vertex[coarse.simplices[K][slots]], pdofs, W

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(corrector_block, range(coarse.n_simplices)))
    else:
        blocks = [corrector_block(K) for K in range(coarse.n_simplices)]

    rows, cols, vals = [], [], []
    for block in blocks:  # deterministic accumulation in element order
        if block is None:
            continue
        qrows, pdofs, W = block
        for col, qrow in enumerate(qrows):
            rows.append(np.full(pdofs.size, qrow))
            cols.append(pdofs)
            vals.append(W[:, col])
    if rows:
        Q = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_H, n_h),
        ).tocsr()
        Q.sum_duplicates()
        Q.eliminate_zeros()
    else:
        Q = sparse.csr_matrix((n_H, n_h))

    return _finish_space(pair, form, ell, ctx, Q, tensor_rule, build_tensor)


def _finish_space(pair, form, ell, ctx, Q, tensor_rule, build_tensor, Phi=None):
    if Phi is None:
        Phi = (ctx.P - Q).tocsr()
        Phi.eliminate_zeros()
    Phi.sort_indices()
    vmass = ctx.vmass
    lod = LodSpace(
        pair=pair,
        ell=ell,
        form=form,
        P=ctx.P,
        Q=Q,
        Phi=Phi,
        M_lod=(Phi @ ctx.mass @ Phi.T).tocsr(),
        A_lod=(Phi @ ctx.stiff @ Phi.T).tocsr(),
        Vmass_lod=(Phi @ vmass @ Phi.T).tocsr()
        if vmass is not None
        else sparse.csr_matrix((Phi.shape[0], Phi.shape[0])),
        omega=None,
    )
    lod._cache["a_form_fine"] = ctx.a_form
    lod._cache["fine_mass"] = ctx.mass
    if build_tensor:
        rule = tensor_rule or default_rule(pair.fine.dim)
        skeleton = tritensor.preallocate(lod.M_lod)
        lod.omega = tritensor.assemble(skeleton, lod, rule)
    return lod


def project_a(lod, u_fine):
    """Ritz projection onto the LOD space w.r.t. the construction form."""
    if "a_form_lu" not in lod._cache:
        lod._cache["a_form_lu"] = spla.splu(lod.a_form_lod().tocsc())
    rhs = lod.Phi @ (lod.a_form_fine() @ u_fine)
    return _solve_real(lod._cache["a_form_lu"], rhs)


def project_l2(lod, u_fine):
    """L2 projection onto the LOD space."""
    if "fine_mass" not in lod._cache:
        lod._cache["fine_mass"] = assemble_mass(lod.pair.fine)
    rhs = lod.Phi @ (lod._cache["fine_mass"] @ u_fine)
    return lod.m_solve(rhs)


# ---------------------------------------------------------------------------
# disk cache


_CACHE_VERSION = 1


def cache_key(pair, form, ell):
    coarse = pair.coarse
    return {
        "version": _CACHE_VERSION,
        "dim": coarse.dim,
        "lower": list(coarse.lower),
        "upper": list(coarse.upper),
        "cells": list(coarse.cells),
        "factor": pair.refinement_factor,
        "ell": int(ell),
        "form": form_fingerprint(form),
    }


def save_space(lod, path):
    """Binary cache of the corrected basis and interaction tensor."""
    header = json.dumps(cache_key(lod.pair, lod.form, lod.ell), sort_keys=True)
    omega = lod.omega
    if omega is None:
        raise ValueError("refusing to cache a space without its tensor")
    np.savez(
        path,
        header=np.frombuffer(header.encode(), dtype=np.uint8),
        phi_indptr=lod.Phi.indptr,
        phi_indices=lod.Phi.indices,
        phi_data=lod.Phi.data,
        phi_shape=np.array(lod.Phi.shape, dtype=np.int64),
        omega_iptr=omega.Iptr,
        omega_j=omega.J,
        omega_k=omega.K,
        omega_v=omega.V,
    )


def load_space(path, pair, form, ell):
    """Rebuild a LodSpace from a cache file; KeyError/ValueError on mismatch."""
    with np.load(path) as dat:
        header = bytes(dat["header"]).decode()
        expected = json.dumps(cache_key(pair, form, ell), sort_keys=True)
        if header != expected:
            raise ValueError("cache key mismatch")
        shape = tuple(dat["phi_shape"])
        Phi = sparse.csr_matrix(
            (dat["phi_data"], dat["phi_indices"], dat["phi_indptr"]), shape=shape
        )
        omega = tritensor.TriTensor(
            n=shape[0],
            Iptr=dat["omega_iptr"],
            J=dat["omega_j"],
            K=dat["omega_k"],
            V=dat["omega_v"],
        )
    ctx = _CorrectorContext(pair, form)
    Q = (ctx.P - Phi).tocsr()
    lod = _finish_space(pair, form, ell, ctx, Q, None, False, Phi=Phi)
    lod.omega = omega
    return lod
