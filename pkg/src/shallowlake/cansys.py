"""Spatially discretized canonical system  M du/dt = -G(u).

The state vector is ``u = (P_1..P_n, q_1..q_n)`` of nodal values.  ``K``
discretizes ``-Laplace`` so that ``G(u) = diag(DK, -DK) u - diag(M, M) F(u)``:
diffusion on the state, anti-diffusion on the costate.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import model
from .fem1d import FemOperators, Mesh1D, assemble, avg, build_mesh
from .model import DomainError, ModelParams


@dataclass(frozen=True)
class SystemOperators:
    params: ModelParams
    mesh: Mesh1D
    fem: FemOperators
    blockK: sp.csr_matrix
    blockM: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.mesh.n

    def with_b(self, b: float) -> "SystemOperators":
        return replace(self, params=self.params.with_b(b))

    def split(self, u):
        n = self.n
        return u[:n], u[n:]

    def flat(self, P: float, q: float) -> np.ndarray:
        n = self.n
        return np.concatenate([np.full(n, float(P)), np.full(n, float(q))])


def make_system(params: ModelParams | None = None, mesh: Mesh1D | None = None) -> SystemOperators:
    params = params or ModelParams()
    mesh = mesh or build_mesh()
    fem = assemble(mesh)
    DK = params.D * fem.K
    blockK = sp.block_diag([DK, -DK], format="csr")
    blockM = sp.block_diag([fem.M, fem.M], format="csr")
    return SystemOperators(params, mesh, fem, blockK, blockM)


def _check_admissible(q):
    if np.any(q >= 0):
        raise DomainError(f"costate must be negative at every node (max q = {np.max(q):.3g})")


def nonlinearity(u, sys: SystemOperators) -> np.ndarray:
    """Nodewise F(u) = (state_rhs(P, -1/q), costate_rhs(P, q))."""
    P, q = sys.split(u)
    _check_admissible(q)
    k = -1.0 / q
    return np.concatenate([model.state_rhs(P, k, sys.params), model.costate_rhs(P, q, sys.params)])


def residual_G(u, sys: SystemOperators) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return sys.blockK @ u - sys.blockM @ nonlinearity(u, sys)


def local_jacobian(u, sys: SystemOperators) -> sp.csr_matrix:
    """dF/du: diagonal 2x2 nodal blocks coupling P_i and q_i."""
    P, q = sys.split(u)
    _check_admissible(q)
    p = sys.params
    gp = model.dg(P)
    a = gp - p.b
    bq = 1.0 / q**2
    c = 2.0 * p.gamma - q * model.d2g(P)
    d = p.r + p.b - gp
    return sp.bmat([[sp.diags(a), sp.diags(bq)], [sp.diags(c), sp.diags(d)]], format="csr")


def jacobian_G(u, sys: SystemOperators) -> sp.csr_matrix:
    """Analytic dG/du.  The linearized evolution is  M dv/dt = -jacobian_G(u) v."""
    u = np.asarray(u, dtype=float)
    return (sys.blockK - sys.blockM @ local_jacobian(u, sys)).tocsr()


def residual_G_many(U, sys: SystemOperators) -> np.ndarray:
    """Row-wise residual_G for a stack of states U with shape (m, 2n)."""
    U = np.asarray(U, dtype=float)
    n = sys.n
    P, q = U[:, :n], U[:, n:]
    _check_admissible(q)
    F = np.hstack([model.state_rhs(P, -1.0 / q, sys.params), model.costate_rhs(P, q, sys.params)])
    return (sys.blockK @ U.T - sys.blockM @ F.T).T


class JacobianPattern:
    """Fixed COO sparsity of dG/du; ``data(U)`` returns entries for many states at once."""

    def __init__(self, sys: SystemOperators, stiffness: sp.spmatrix | None = None):
        n = sys.n
        K = (sys.blockK if stiffness is None else stiffness).tocoo()
        M = sys.fem.M.tocoo()
        r, c = M.row, M.col
        self.sys = sys
        self.n = n
        self._K = K.data
        self._m = M.data
        self._c = c
        self.rows = np.concatenate([K.row, r, r, n + r, n + r])
        self.cols = np.concatenate([K.col, c, n + c, c, n + c])

    def data(self, U) -> np.ndarray:
        U = np.atleast_2d(np.asarray(U, dtype=float))
        n, p = self.n, self.sys.params
        P, q = U[:, :n], U[:, n:]
        _check_admissible(q)
        gp = model.dg(P)
        blocks = (gp - p.b, 1.0 / q**2, 2.0 * p.gamma - q * model.d2g(P), p.r + p.b - gp)
        parts = [np.broadcast_to(self._K, (U.shape[0], self._K.size))]
        parts += [-self._m * blk[:, self._c] for blk in blocks]
        return np.hstack(parts)

    def matrix(self, u) -> sp.csr_matrix:
        N = 2 * self.n
        return sp.csr_matrix((self.data(u)[0], (self.rows, self.cols)), shape=(N, N))


def d_residual_db(u, sys: SystemOperators) -> np.ndarray:
    """dG/db at fixed u (for continuation in b)."""
    P, q = sys.split(u)
    dF = np.concatenate([-P, q])
    return -(sys.blockM @ dF)


def objective_density(P, q, sys: SystemOperators) -> float:
    """Spatially averaged current payoff J_ca at one instant."""
    k = model.optimal_control(q)
    return avg(model.current_objective(P, k, sys.params), sys.mesh, sys.fem)


def discount_weights(t, r: float) -> np.ndarray:
    """Weights w with sum(w * f) = int_0^T e^{-rt} f(t) dt exactly for piecewise-linear f."""
    t = np.asarray(t, dtype=float)
    h = np.diff(t)
    x = r * h
    E0 = np.exp(-r * t[:-1])
    I0 = -np.expm1(-x) / r
    I1 = (-np.expm1(-x) - x * np.exp(-x)) / r**2
    w = np.zeros(t.size)
    w[:-1] += E0 * (I0 - I1 / h)
    w[1:] += E0 * I1 / h
    return w


def discounted_objective(t, payoff, r: float) -> float:
    """int_0^T e^{-rt} J_ca dt (payoff linear between nodes) plus the salvage
    tail e^{-rT}/r J_ca(T).  Exact for constant payoff."""
    t = np.asarray(t, dtype=float)
    payoff = np.asarray(payoff, dtype=float)
    return float(discount_weights(t, r) @ payoff + np.exp(-r * t[-1]) / r * payoff[-1])


@dataclass
class Trajectory:
    t: np.ndarray
    P: np.ndarray  # (len(t), n)
    k: np.ndarray  # (len(t), n)
    J: float


def forward_ivp(
    P0,
    control: Callable[[np.ndarray, float], np.ndarray],
    sys: SystemOperators,
    T: float,
    dt: float,
    scheme: str = "euler",
    tol: float = 1e-12,
) -> Trajectory:
    """Integrate the state equation alone under a prescribed control.

    ``control(x, t)`` returns nodal loads.  Backward Euler by default,
    ``scheme="trapezoidal"`` for Crank-Nicolson.  Each implicit step is
    solved by Newton with the exact (tridiagonal) Jacobian.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if scheme not in ("euler", "trapezoidal"):
        raise ValueError(f"unknown scheme {scheme!r}")
    theta = 1.0 if scheme == "euler" else 0.5
    p = sys.params
    M, DK = sys.fem.M, p.D * sys.fem.K
    x = sys.mesh.nodes
    nsteps = int(np.ceil(T / dt - 1e-9))
    t = np.linspace(0.0, nsteps * dt, nsteps + 1)
    h = t[1] - t[0]

    def f(P, k):
        return -DK @ P + M @ model.state_rhs(P, k, p)

    def get_k(tt):
        k = np.broadcast_to(np.asarray(control(x, tt), dtype=float), x.shape).copy()
        if np.any(k <= 0):
            raise DomainError("control must be positive")
        return k

    P = np.array(P0, dtype=float)
    Ps = [P.copy()]
    ks = [get_k(0.0)]
    for j in range(nsteps):
        k_old, k_new = ks[-1], get_k(t[j + 1])
        rhs_old = M @ P + h * (1 - theta) * f(P, k_old)
        Pn = P.copy()
        for _ in range(50):
            R = M @ Pn - h * theta * f(Pn, k_new) - rhs_old
            Jm = M + h * theta * (DK - M @ sp.diags(model.dg(Pn) - p.b))
            dP = spla.spsolve(Jm.tocsc(), -R)
            Pn += dP
            if np.max(np.abs(dP)) < tol * (1 + np.max(np.abs(Pn))):
                break
        P = Pn
        Ps.append(P.copy())
        ks.append(k_new)
    Ps, ks = np.array(Ps), np.array(ks)
    payoff = [avg(model.current_objective(Pi, ki, p), sys.mesh, sys.fem) for Pi, ki in zip(Ps, ks)]
    return Trajectory(t, Ps, ks, discounted_objective(t, payoff, p.r))
