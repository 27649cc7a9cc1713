"""Time integration of the Gross-Pitaevskii equation by continuous Galerkin.

The trial space per step is polynomials of degree q in time; the test space
has degree q - 1.  Collocation-like stage unknowns are obtained from the
Galerkin conditions after diagonalizing the time-direction mass/weight pencil,
so each fixed-point sweep solves q decoupled complex-shifted linear systems
with factorizations reused across all steps (uniform step size).  The scheme
conserves mass and, up to fixed-point and quadrature tolerances, the modified
energy: the nonlinearity is evaluated through the projected density, matching
the ground-state energy functional.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.sparse.linalg as spla

from . import tritensor
from .groundstate import exact_energy, modified_energy
from .lod import project_a

__all__ = [
    "CgTables",
    "FixedPointDivergenceError",
    "StageFactorization",
    "Trajectory",
    "build_cg_tables",
    "build_stage_factorization",
    "g_modified",
    "time_step",
    "integrate",
    "relative_errors",
]

_MAX_ORDER = 4


class FixedPointDivergenceError(RuntimeError):
    """Stage fixed-point iteration failed to reach tolerance."""

    def __init__(self, message, iterations, trajectory=None):
        super().__init__(message)
        self.iterations = iterations
        self.trajectory = trajectory


def _lagrange_values(nodes, ts):
    """Values of the Lagrange basis on `nodes` at the points `ts`."""
    nodes = np.asarray(nodes, dtype=float)
    ts = np.asarray(ts, dtype=float)
    vals = np.ones((ts.size, nodes.size))
    for i, xi in enumerate(nodes):
        for k, xk in enumerate(nodes):
            if k != i:
                vals[:, i] *= (ts - xk) / (xi - xk)
    return vals


def _lagrange_derivatives(nodes, ts):
    """Derivatives of the Lagrange basis on `nodes` at the points `ts`."""
    nodes = np.asarray(nodes, dtype=float)
    ts = np.asarray(ts, dtype=float)
    out = np.zeros((ts.size, nodes.size))
    for i, xi in enumerate(nodes):
        for m, xm in enumerate(nodes):
            if m == i:
                continue
            term = np.full(ts.size, 1.0 / (xi - xm))
            for k, xk in enumerate(nodes):
                if k != i and k != m:
                    term *= (ts - xk) / (xi - xk)
            out[:, i] += term
    return out


@dataclass(frozen=True)
class CgTables:
    """Order-dependent coefficient tables of the diagonalized cG(q) scheme."""

    q: int
    nodes: np.ndarray        # q Gauss points on (0, 1)
    weights: np.ndarray      # their Gauss weights
    eval_nodes: np.ndarray   # 2q Gauss points used for the nonlinear term
    Gamma: np.ndarray        # stage shifts (eigenvalues, complex)
    Sigma: np.ndarray        # diagonalizing transform (q, q)
    Sigma_inv: np.ndarray
    A: np.ndarray            # initial-value coupling per stage (q,)
    B: np.ndarray            # quadrature weights of the nonlinear term (q, 2q)
    C0: np.ndarray           # value reconstruction at eval nodes: u0 part (2q,)
    C: np.ndarray            # value reconstruction: stage part (q, 2q)
    endpoint: np.ndarray     # trial basis at t = 1 (q + 1,)


def build_cg_tables(q):
    """Tables for the diagonalized cG(q) scheme, 1 <= q <= 4."""
    if not 1 <= int(q) <= _MAX_ORDER:
        raise ValueError(f"order q={q} outside supported range 1..{_MAX_ORDER}")
    q = int(q)
    x, w = np.polynomial.legendre.leggauss(q)
    s, ws = 0.5 * (x + 1.0), 0.5 * w
    x2, w2 = np.polynomial.legendre.leggauss(2 * q)
    st, wt = 0.5 * (x2 + 1.0), 0.5 * w2

    trial_nodes = np.concatenate(([0.0], s))
    test_at = _lagrange_values(s, st)                 # (2q, q)
    dtrial_at = _lagrange_derivatives(trial_nodes, st)  # (2q, q + 1)
    # m[i, j] = int_0^1 Lhat_j' L_i, exact for the 2q-point rule
    m = np.einsum("v,vi,vj->ij", wt, test_at, dtrial_at)
    M = m[:, 1:]
    Minv = np.linalg.inv(M)
    Gamma, R = np.linalg.eig(Minv @ np.diag(ws))
    Sigma = np.linalg.inv(R)

    A = Sigma @ np.ones(q)
    B = (Sigma @ Minv) @ test_at.T * wt[None, :]
    trial_at = _lagrange_values(trial_nodes, st)      # (2q, q + 1)
    C0 = trial_at[:, 0].copy()
    C = (trial_at[:, 1:] @ R).T
    endpoint = _lagrange_values(trial_nodes, np.array([1.0]))[0]
    return CgTables(
        q=q,
        nodes=s,
        weights=ws,
        eval_nodes=st,
        Gamma=Gamma,
        Sigma=Sigma,
        Sigma_inv=R,
        A=A,
        B=B,
        C0=C0,
        C=C,
        endpoint=endpoint,
    )


@dataclass
class StageFactorization:
    """LU factors of the q shifted stage operators for one step size."""

    tau: float
    lus: list


def build_stage_factorization(p, tables, tau):
    lod = p.lod
    S_lin = p.kinetic_factor * lod.A_lod + p.vmass_lod
    ops = [
        (lod.M_lod + 1j * tau * g * S_lin).tocsc().astype(complex)
        for g in tables.Gamma
    ]
    return StageFactorization(tau=float(tau), lus=[spla.splu(op) for op in ops])


def g_modified(lod, alpha):
    """Nonlinear term through the projected density: N(P|v|^2) v."""
    rho = lod.m_solve(tritensor.density_rhs(lod.omega, alpha))
    return tritensor.nonlinear_apply(lod.omega, rho, alpha)


def time_step(p, tables, fact, u_n, fp_tol=1e-12, fp_max=200, stage_guess=None):
    """Advance one step of size fact.tau from u_n.

    Returns (u_next, fixed-point iterations, final stages); the stages warm
    start the next step.
    """
    lod = p.lod
    q = tables.q
    tau = fact.tau
    u_n = np.asarray(u_n, dtype=complex)
    mu = lod.M_lod @ u_n
    base = tables.A[:, None] * mu[None, :]

    U = np.array(stage_guess, copy=True) if stage_guess is not None \
        else tables.A[:, None] * u_n[None, :]
    blowup = 1e8 * max(np.linalg.norm(u_n), 1e-300)
    iterations = 0
    for iterations in range(1, fp_max + 1):
        Y = tables.C0[:, None] * u_n[None, :] + tables.C.T @ U   # (2q, n)
        G = np.stack([g_modified(lod, y) for y in Y])
        rhs = base - 1j * p.beta * tau * (tables.B @ G)
        U_new = np.stack([fact.lus[i].solve(rhs[i]) for i in range(q)])
        delta = np.linalg.norm(U_new - U, axis=1)
        scale = np.maximum(np.linalg.norm(U_new, axis=1), 1e-300)
        U = U_new
        if scale.max() > blowup or not np.isfinite(scale.max()):
            raise FixedPointDivergenceError(
                f"stage values blew up after {iterations} iterations "
                f"(tau={tau:g}, q={q})",
                iterations=iterations,
            )
        if (delta / scale).max() < fp_tol:
            break
    else:
        raise FixedPointDivergenceError(
            f"fixed point not converged after {fp_max} iterations "
            f"(tau={tau:g}, q={q})",
            iterations=fp_max,
        )
    phys = tables.Sigma_inv @ U                                 # (q, n)
    u_next = tables.endpoint[0] * u_n + tables.endpoint[1:] @ phys
    return u_next, iterations, U


@dataclass
class Trajectory:
    times: List[float] = field(default_factory=list)
    coeffs: List[np.ndarray] = field(default_factory=list)
    energy_mod: List[float] = field(default_factory=list)
    energy: List[float] = field(default_factory=list)
    mass: List[float] = field(default_factory=list)
    fp_iterations: List[int] = field(default_factory=list)

    @property
    def final(self):
        return self.coeffs[-1]


def _record(traj, p, t, alpha, track_exact):
    traj.times.append(t)
    traj.coeffs.append(alpha)
    traj.energy_mod.append(modified_energy(p, alpha))
    if track_exact:
        traj.energy.append(exact_energy(p, alpha))
    traj.mass.append(float(np.real(np.vdot(alpha, p.lod.M_lod @ alpha))))


def integrate(
    p,
    u0_fine,
    T,
    tau,
    q=2,
    tables=None,
    fp_tol=1e-12,
    fp_max=200,
    snapshot_stride=1,
    track_exact_energy=False,
):
    """Propagate the projection of u0_fine from t = 0 to t = T in steps tau.

    tau must divide T.  On fixed-point divergence the raised error carries the
    trajectory accumulated so far.
    """
    n_steps = T / tau
    if abs(n_steps - round(n_steps)) > 1e-9 or round(n_steps) < 1:
        raise ValueError(f"step {tau} does not divide horizon {T}")
    n_steps = int(round(n_steps))
    tables = tables or build_cg_tables(q)
    fact = build_stage_factorization(p, tables, tau)

    alpha = project_a(p.lod, np.asarray(u0_fine, dtype=complex))
    traj = Trajectory()
    _record(traj, p, 0.0, alpha, track_exact_energy)
    stages = None
    for n in range(1, n_steps + 1):
        try:
            alpha, iters, stages = time_step(
                p, tables, fact, alpha, fp_tol=fp_tol, fp_max=fp_max,
                stage_guess=stages,
            )
        except FixedPointDivergenceError as err:
            err.trajectory = traj
            raise
        traj.fp_iterations.append(iters)
        if n % snapshot_stride == 0 or n == n_steps:
            _record(traj, p, n * tau, alpha, track_exact_energy)
    return traj


def relative_errors(lod, alpha, t, exact, rule=None):
    """Relative L2 and H1 errors at time t against a callable exact solution.

    `exact(points, t)` returns values on (..., dim) point arrays; its analytic
    spatial derivative `exact.gradient(points, t)` has a trailing dim axis.
    """
    from .fem import p1_at_quad, p1_gradient, quad_points_physical, integrate_quad
    from .lod import default_rule

    fine = lod.pair.fine
    rule = rule or default_rule(fine.dim)
    u_full = fine.full_values(lod.expand(np.asarray(alpha, dtype=complex)))
    xq = quad_points_physical(fine, rule)

    ve = exact(xq, t)
    uh = p1_at_quad(fine, rule, u_full)
    err2 = np.abs(uh - ve) ** 2
    ref2 = np.abs(ve) ** 2

    ge = exact.gradient(xq, t)
    gh = p1_gradient(fine, u_full)[:, None, :]
    gerr2 = (np.abs(gh - ge) ** 2).sum(axis=-1)
    gref2 = (np.abs(ge) ** 2).sum(axis=-1)

    num_l2 = integrate_quad(fine, rule, err2)
    den_l2 = integrate_quad(fine, rule, ref2)
    num_h1 = num_l2 + integrate_quad(fine, rule, gerr2)
    den_h1 = den_l2 + integrate_quad(fine, rule, gref2)
    return np.sqrt(num_l2 / den_l2), np.sqrt(num_h1 / den_h1)
