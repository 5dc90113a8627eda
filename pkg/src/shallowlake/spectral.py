"""Spectra of canonical steady states, defect / saddle point property, and the
projection onto the unstable eigenspace used as right boundary condition.

Stability is read from the pencil ``(-dG/du, M)``: a mode is stable when its
eigenvalue has negative real part.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .cansys import SystemOperators, jacobian_G

CENTER_TOL = 1e-8


class SpectrumError(RuntimeError):
    pass


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray
    n_s: int
    n_u: int
    n_c: int
    n: int
    symmetry_residual: float
    r: float
    right_vectors: np.ndarray | None = field(default=None, repr=False)
    left_vectors: np.ndarray | None = field(default=None, repr=False)

    @property
    def defect(self) -> int:
        return self.n_s - self.n

    @property
    def slowest_stable(self) -> complex:
        """Stable eigenvalue closest to the imaginary axis."""
        st = self.eigenvalues[self.eigenvalues.real < 0]
        return st[np.argmax(st.real)]


def symmetry_residual(eigenvalues, r: float) -> float:
    """Hausdorff distance between the spectrum and its reflection lam -> r - conj(lam),
    relative to 1 + max|lam|."""
    lam = np.asarray(eigenvalues)
    refl = r - lam.conj()
    d = np.abs(lam[:, None] - refl[None, :])
    h = max(d.min(axis=1).max(), d.min(axis=0).max())
    return float(h / (1.0 + np.abs(lam).max()))


def _dense_pencil(u, sys: SystemOperators):
    A = -jacobian_G(u, sys).toarray()
    B = sys.blockM.toarray()
    return A, B


def spectrum_of_state(u, sys: SystemOperators, center_tol: float = CENTER_TOL,
                      vectors: bool = False) -> SpectrumReport:
    A, B = _dense_pencil(u, sys)
    try:
        if vectors:
            lam, vl, vr = sla.eig(A, B, left=True, right=True)
        else:
            lam = sla.eig(A, B, right=False)
            vl = vr = None
    except (sla.LinAlgError, ValueError) as exc:
        raise SpectrumError(f"generalized eigensolver failed: {exc}") from exc
    order = np.argsort(lam.real, kind="stable")
    lam = lam[order]
    if vectors:
        vl, vr = vl[:, order], vr[:, order]
    n = sys.n
    scale = 1.0 + np.abs(lam).max()
    tol = center_tol * scale
    n_s = int(np.sum(lam.real < -tol))
    n_u = int(np.sum(lam.real > tol))
    n_c = lam.size - n_s - n_u
    rep = SpectrumReport(lam, n_s, n_u, n_c, n, symmetry_residual(lam, sys.params.r),
                         sys.params.r, vr, vl)
    if n_s > n + n_c:
        raise SpectrumError(f"{n_s} stable eigenvalues exceed half dimension {n}")
    return rep


def spectrum(css, sys: SystemOperators, center_tol: float = CENTER_TOL,
             vectors: bool = False) -> SpectrumReport:
    """Full spectrum of a converged CSS; also stores defect and eigenvalues on the record."""
    rep = spectrum_of_state(css.u, sys.with_b(css.b), center_tol, vectors)
    css.defect = rep.defect
    css.spectrum = rep.eigenvalues
    return rep


def has_spp(report: SpectrumReport, r: float | None = None, center_tol: float = CENTER_TOL) -> bool:
    """Saddle point property via the stable count and via the band criterion
    |Re lam - r/2| > r/2; the two must agree."""
    r = report.r if r is None else r
    lam = report.eigenvalues
    tol = center_tol * (1.0 + np.abs(lam).max())
    dist = np.abs(np.abs(lam.real - r / 2) - r / 2)
    if report.n_c or np.any(dist <= tol):
        raise SpectrumError("eigenvalue on the SPP boundary; no decision possible")
    by_count = report.n_s == report.n
    by_band = bool(np.all(np.abs(lam.real - r / 2) > r / 2))
    if by_count != by_band:
        raise SpectrumError(f"SPP criteria disagree (count={by_count}, band={by_band})")
    return by_count


@dataclass
class ProjectionPsi:
    Psi: np.ndarray
    u_hat: np.ndarray
    slowest_rate: float
    label: str = ""

    def residual(self, u) -> np.ndarray:
        return self.Psi @ (np.asarray(u) - self.u_hat)

    @property
    def min_horizon(self) -> float:
        return 1.0 / self.slowest_rate


def _real_basis(vecs: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Columns spanning the same real space as the (conjugate-closed) complex columns."""
    cols = []
    used = np.zeros(lam.size, bool)
    for i in range(lam.size):
        if used[i]:
            continue
        v = vecs[:, i]
        if abs(lam[i].imag) <= 1e-10 * (1 + abs(lam[i])):
            cols.append(v.real if np.linalg.norm(v.real) >= np.linalg.norm(v.imag) else v.imag)
            used[i] = True
        else:
            j = np.argmin(np.abs(lam - lam[i].conj()) + used * 1e300 + (np.arange(lam.size) == i) * 1e300)
            cols.extend([v.real, v.imag])
            used[i] = used[j] = True
    return np.column_stack(cols)


def build_psi(css, sys: SystemOperators, center_tol: float = CENTER_TOL) -> ProjectionPsi:
    """Rows span the annihilator of the stable eigenspace, built from adjoint
    eigenvectors of the unstable eigenvalues (pre-multiplied by M)."""
    s = sys.with_b(css.b)
    rep = spectrum(css, s, center_tol, vectors=True)
    if rep.defect != 0 or not has_spp(rep, center_tol=center_tol):
        raise SpectrumError(f"no SPP (defect {rep.defect})")
    lam = rep.eigenvalues
    unstable = lam.real > 0
    W = s.blockM.toarray() @ rep.left_vectors[:, unstable].conj()
    basis = _real_basis(W, lam[unstable])
    Q, _ = np.linalg.qr(basis)
    rate = -float(rep.slowest_stable.real)
    return ProjectionPsi(Q.T.copy(), np.array(css.u, dtype=float), rate, getattr(css, "label", ""))
