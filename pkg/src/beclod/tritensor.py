"""Sparse symmetric three-valence interaction tensor of a corrected basis.

Stores omega_ijk = (phi_i phi_j, phi_k) for the canonical triples i <= j <= k
in compressed form: Iptr points into parallel (J, K, V) arrays, with (J, K)
lexicographically sorted inside every i-block so lookups are two nested
binary searches.  Structure is preallocated from the sparsity of the mass
matrix; assembling into an absent triple is a hard error.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse

from .fem import element_geometry

__all__ = [
    "TriTensor",
    "PreallocationError",
    "preallocate",
    "assemble",
    "get",
    "density_rhs",
    "nonlinear_apply",
    "matrix_of",
]

_DROP_TOL = 1e-16


class PreallocationError(RuntimeError):
    """A computed entry has no slot in the preallocated structure."""


@dataclass
class TriTensor:
    n: int
    Iptr: np.ndarray
    J: np.ndarray
    K: np.ndarray
    V: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def triple_count(self):
        return self.J.size

    def row_keys(self, i):
        """Lex keys j*n+k of block i (sorted ascending)."""
        sl = slice(self.Iptr[i], self.Iptr[i + 1])
        return self.J[sl].astype(np.int64) * self.n + self.K[sl]


def preallocate(M_lod):
    """Structure-only tensor from the coupling pattern of the mass matrix.

    Keeps (i, j, k), i <= j <= k, when j and k both couple to i and
    |M_lod[j, k]| exceeds the drop tolerance.
    """
    M = M_lod.tocsr().copy()
    M.sum_duplicates()
    pattern = sparse.csr_matrix(
        ((np.abs(M.data) > _DROP_TOL), M.indices, M.indptr), shape=M.shape
    )
    pattern.eliminate_zeros()
    pattern.sort_indices()
    n = M.shape[0]
    indptr, indices = pattern.indptr, pattern.indices

    Iptr = np.zeros(n + 1, dtype=np.int64)
    js, ks = [], []
    for i in range(n):
        s = indices[indptr[i] : indptr[i + 1]]
        s = s[s >= i]
        count = 0
        for a, j in enumerate(s):
            row_j = indices[indptr[j] : indptr[j + 1]]
            cand = s[a:]
            pos = np.searchsorted(row_j, cand)
            pos[pos >= row_j.size] = max(row_j.size - 1, 0)
            ok = row_j[pos] == cand if row_j.size else np.zeros(cand.size, bool)
            sel = cand[ok]
            js.append(np.full(sel.size, j, dtype=np.int64))
            ks.append(sel.astype(np.int64))
            count += sel.size
        Iptr[i + 1] = Iptr[i] + count
    J = np.concatenate(js) if js else np.zeros(0, dtype=np.int64)
    K = np.concatenate(ks) if ks else np.zeros(0, dtype=np.int64)
    return TriTensor(n=n, Iptr=Iptr, J=J, K=K, V=np.zeros(J.size))


def assemble(skeleton, lod, rule):
    """Fill the preallocated structure by fine-mesh quadrature.

    Works coarse element by coarse element: the active basis functions are
    read off Phi's column sparsity, their P1 values on the fine simplices are
    contracted against the rule's third-moment slot table, and every nonzero
    i <= j <= k contribution is scattered by binary search.
    """
    pair = lod.pair
    fine, coarse = pair.fine, pair.coarse
    Phi = lod.Phi.tocsr()
    Phic = Phi.tocsc()
    n = skeleton.n
    Iptr = skeleton.Iptr
    keys = skeleton.J.astype(np.int64) * n + skeleton.K
    V = np.zeros(skeleton.J.size)

    vol, _ = element_geometry(fine)
    scale_all = vol * math.factorial(fine.dim)
    lam = rule.points
    # slot table S_abc = sum_q w_q lam_a lam_b lam_c; contracting the basis
    # values against S reproduces the per-quadrature-point sum exactly
    S = np.einsum("q,qa,qb,qc->abc", rule.weights, lam, lam, lam)
    d1 = fine.dim + 1
    triu_cache = {}

    for Kc in range(coarse.n_simplices):
        fels = pair.fine_simplices_of_coarse(Kc)
        dofs = fine.dof_of_vertex[fine.simplices[fels]]  # (nel, d1), -1 boundary
        udofs = np.unique(dofs)
        udofs = udofs[udofs >= 0]
        if udofs.size == 0:
            continue
        active = np.unique(Phic[:, udofs].indices)
        if active.size == 0:
            continue
        dense = Phi[active][:, udofs].toarray()
        dense = np.hstack([dense, np.zeros((active.size, 1))])  # boundary slot
        vidx = np.searchsorted(udofs, dofs)
        vidx[dofs < 0] = udofs.size
        C = dense[:, vidx]  # (n_act, nel, d1)
        scale = scale_all[fels]

        n_act = active.size
        for a in range(n_act):
            D = np.einsum("es,sbc->ebc", C[a] * scale[:, None], S)
            Z = np.einsum("jeb,ebc->jec", C[a:], D)
            rem = n_act - a
            F = Z.reshape(rem, -1) @ C[a:].reshape(rem, -1).T
            if rem not in triu_cache:
                triu_cache[rem] = np.triu_indices(rem)
            bi, ci = triu_cache[rem]
            vals = F[bi, ci]
            nz = vals != 0.0
            if not nz.any():
                continue
            vals = vals[nz]
            j = active[a + bi[nz]]
            k = active[a + ci[nz]]
            i = int(active[a])
            lo, hi = Iptr[i], Iptr[i + 1]
            row = keys[lo:hi]
            target = j * n + k
            pos = np.searchsorted(row, target)
            bad = (pos >= row.size) | (row[np.minimum(pos, row.size - 1)] != target)
            if bad.any():
                b = int(np.flatnonzero(bad)[0])
                raise PreallocationError(
                    f"entry ({i}, {j[b]}, {k[b]}) missing from the skeleton"
                )
            np.add.at(V, lo + pos, vals)

    return TriTensor(n=n, Iptr=Iptr, J=skeleton.J, K=skeleton.K, V=V)


def get(t, i, j, k):
    """Tensor entry by full symmetry; 0.0 for structurally absent triples."""
    i, j, k = sorted((int(i), int(j), int(k)))
    if i < 0 or k >= t.n:
        raise IndexError(f"index ({i}, {j}, {k}) out of range")
    lo, hi = t.Iptr[i], t.Iptr[i + 1]
    J, K = t.J, t.K
    l = lo + np.searchsorted(J[lo:hi], j, side="left")
    r = lo + np.searchsorted(J[lo:hi], j, side="right")
    if l == r:
        return 0.0
    p = l + np.searchsorted(K[l:r], k)
    if p < r and K[p] == k:
        return float(t.V[p])
    return 0.0


def _pair_structures(t):
    """Unordered-pair maps turning contractions into sparse mat-vecs."""
    if "pairs" in t._cache:
        return t._cache["pairs"]
    n = t.n
    I = np.repeat(np.arange(n, dtype=np.int64), np.diff(t.Iptr))
    J, K, V = t.J, t.K, t.V

    # decompositions (output index, unordered pair) of each triple; repeated
    # indices would duplicate a decomposition, so those are masked out
    outs = [I, J, K]
    pairs = [(J, K), (I, K), (I, J)]
    keep = [np.ones(I.size, dtype=bool), J != I, K != J]
    out_idx = np.concatenate([o[m] for o, m in zip(outs, keep)])
    p = np.concatenate([a[m] for (a, _), m in zip(pairs, keep)])
    q = np.concatenate([b[m] for (_, b), m in zip(pairs, keep)])
    vals = np.concatenate([V[m] for m in keep])

    pkeys = p * n + q
    upairs, pair_idx = np.unique(pkeys, return_inverse=True)
    npairs = upairs.size
    pp, qq = upairs // n, upairs % n

    W_n = sparse.csr_matrix(
        (vals, (out_idx, pair_idx)), shape=(n, npairs)
    )
    wb = vals * np.where(p == q, 1.0, 2.0)
    W_b = sparse.csr_matrix((wb, (out_idx, pair_idx)), shape=(n, npairs))

    # symmetric matrix template for matrix_of: entry (p, q) and (q, p) both
    # read the pair value; data carries the pair index during construction
    off = pp != qq
    rows = np.concatenate([pp, qq[off]])
    cols = np.concatenate([qq, pp[off]])
    slot = np.concatenate([np.arange(npairs), np.arange(npairs)[off]])
    template = sparse.csr_matrix(
        (slot.astype(np.float64) + 1.0, (rows, cols)), shape=(n, n)
    )
    template.sort_indices()
    perm = template.data.astype(np.int64) - 1
    template.data = np.zeros(template.data.size)

    out = {
        "p": pp,
        "q": qq,
        "W_n": W_n,
        "W_b": W_b,
        "template": template,
        "perm": perm,
    }
    t._cache["pairs"] = out
    return out


def density_rhs(t, alpha):
    """b_i = (|v|^2, phi_i) for v with coefficients alpha; real output."""
    s = _pair_structures(t)
    alpha = np.asarray(alpha)
    r = np.real(alpha[s["p"]] * np.conj(alpha[s["q"]]))
    return s["W_b"] @ r


def nonlinear_apply(t, rho, alpha):
    """c_i = sum_{k,j} rho_k alpha_j omega_{kji} (full symmetric expansion)."""
    s = _pair_structures(t)
    rho = np.asarray(rho)
    alpha = np.asarray(alpha)
    p, q = s["p"], s["q"]
    y = rho[p] * alpha[q] + rho[q] * alpha[p]
    y[p == q] *= 0.5
    return s["W_n"] @ y


def matrix_of(t, rho):
    """Sparse symmetric matrix N(rho)_{ij} = sum_k rho_k omega_{kij}."""
    s = _pair_structures(t)
    pairvals = s["W_n"].T @ rho
    out = s["template"].copy()
    out.data = pairvals[s["perm"]]
    return out
