"""Linear finite elements on (-L, L) with Neumann boundary conditions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.linalg as sla

DEFAULT_L = 2.0 * np.pi / 0.44
DEFAULT_N = 101


@dataclass(frozen=True)
class Mesh1D:
    L: float
    nodes: np.ndarray

    @property
    def n(self) -> int:
        return self.nodes.size

    @property
    def volume(self) -> float:
        return 2.0 * self.L


@dataclass(frozen=True)
class FemOperators:
    M: sp.csr_matrix
    K: sp.csr_matrix
    lump_threshold: float = 0.0


def build_mesh(L: float = DEFAULT_L, n: int = DEFAULT_N) -> Mesh1D:
    if n < 3:
        raise ValueError(f"need at least 3 nodes, got {n}")
    if L <= 0:
        raise ValueError(f"half-length must be positive, got {L}")
    nodes = np.linspace(-L, L, n)
    nodes.setflags(write=False)
    return Mesh1D(float(L), nodes)


def assemble(mesh: Mesh1D) -> FemOperators:
    """Consistent mass matrix and stiffness matrix of -d^2/dx^2."""
    h = np.diff(mesh.nodes)
    n = mesh.n
    m_diag = np.zeros(n)
    k_diag = np.zeros(n)
    m_diag[:-1] += h / 3.0
    m_diag[1:] += h / 3.0
    k_diag[:-1] += 1.0 / h
    k_diag[1:] += 1.0 / h
    M = sp.diags([h / 6.0, m_diag, h / 6.0], [-1, 0, 1], format="csr")
    K = sp.diags([-1.0 / h, k_diag, -1.0 / h], [-1, 0, 1], format="csr")
    return FemOperators(M, K)


def lumped_product(ops: FemOperators, delta: float) -> sp.csr_matrix:
    """M^{-1} K with entries of magnitude below ``delta`` dropped.

    Only meant for approximate Jacobians; residuals keep using M and K.
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    A = sla.solve(ops.M.toarray(), ops.K.toarray(), assume_a="sym")
    A[np.abs(A) < delta] = 0.0
    out = sp.csr_matrix(A)
    out.eliminate_zeros()
    return out


def avg(v, mesh: Mesh1D, ops: FemOperators) -> float:
    """Spatial mean (1/|Omega|) int v dx."""
    v = np.asarray(v, dtype=float)
    return float(np.sum(ops.M @ v) / mesh.volume)


def normalized_l2(v, mesh: Mesh1D, ops: FemOperators) -> float:
    """L2 norm divided by sqrt(|Omega|)."""
    v = np.asarray(v, dtype=float)
    return float(np.sqrt(max(v @ (ops.M @ v), 0.0) / mesh.volume))
