"""Canonical steady states: flat roots, Newton, continuation in b, bifurcation
detection and branch switching, plus the dispersion relation about flat states.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import brentq

from . import model
from .cansys import (SystemOperators, d_residual_db, jacobian_G, objective_density,
                     residual_G)
from .fem1d import avg, normalized_l2
from .model import DomainError, ModelParams

log = logging.getLogger(__name__)

NEWTON_TOL = 1e-10
FSI_START_B = 0.65


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual=np.nan):
        super().__init__(f"{msg} (last residual {residual:.3e})")
        self.residual = residual


# --- flat states -----------------------------------------------------------

def _flat_residual(P, params: ModelParams):
    # (r + b - g') - 2 gamma P (bP - g): zero iff -1/q = bP - g(P) with q = -2 gamma P / (r + b - g')
    return params.r + params.b - model.dg(P) - 2 * params.gamma * P * (params.b * P - model.g(P))


def fcss_roots(params: ModelParams, p_max: float = 3.0, samples: int = 3000):
    """All flat canonical steady states (P, q) with q < 0, ordered by P."""
    Ps = np.linspace(p_max / samples, p_max, samples)
    v = _flat_residual(Ps, params)
    roots = []
    for i in np.flatnonzero(np.sign(v[:-1]) * np.sign(v[1:]) <= 0):
        if v[i] == 0 and i > 0 and v[i - 1] == 0:
            continue
        P = brentq(_flat_residual, Ps[i], Ps[i + 1], args=(params,), xtol=1e-15)
        for _ in range(3):  # scalar Newton polish
            h = 1e-7 * max(1.0, P)
            d = (_flat_residual(P + h, params) - _flat_residual(P - h, params)) / (2 * h)
            if d == 0:
                break
            P -= _flat_residual(P, params) / d
        denom = params.r + params.b - model.dg(P)
        if denom <= 0:
            continue
        q = -2 * params.gamma * P / denom
        if q < 0 and not any(abs(P - R) < 1e-9 for R, _ in roots):
            roots.append((float(P), float(q)))
    return sorted(roots)


def fold_locate(params: ModelParams | None = None, b_lo: float = 0.65, b_hi: float = 0.8,
                tol: float = 1e-4) -> float:
    """Parameter where the root count of the flat system jumps between 3 and 1."""
    params = params or ModelParams()
    n_lo = len(fcss_roots(params.with_b(b_lo)))
    n_hi = len(fcss_roots(params.with_b(b_hi)))
    if n_lo == n_hi:
        raise ValueError(f"root count {n_lo} on both ends of [{b_lo}, {b_hi}]")
    while b_hi - b_lo > tol:
        mid = 0.5 * (b_lo + b_hi)
        if len(fcss_roots(params.with_b(mid))) == n_lo:
            b_lo = mid
        else:
            b_hi = mid
    return 0.5 * (b_lo + b_hi)


def dispersion_matrix(P: float, q: float, params: ModelParams, kappa2: float) -> np.ndarray:
    gp = model.dg(P)
    Dk = params.D * kappa2
    return np.array([[gp - params.b - Dk, 1.0 / q**2],
                     [2 * params.gamma - q * model.d2g(P), params.r + params.b - gp + Dk]])


def dispersion(fcss, params: ModelParams, kappa2: float) -> np.ndarray:
    """Eigenvalues of the linearization about a flat CSS for wavenumber^2 ``kappa2``."""
    P, q = fcss
    return np.linalg.eigvals(dispersion_matrix(P, q, params, kappa2))


def dispersion_det(fcss, params: ModelParams, kappa2):
    P, q = fcss
    a = model.dg(P) - params.b - params.D * np.asarray(kappa2)
    c = 2 * params.gamma - q * model.d2g(P)
    return a * (params.r + params.b - model.dg(P) + params.D * np.asarray(kappa2)) - c / q**2


def critical_wavenumber(fcss, params: ModelParams, kappa_max: float = 3.0, samples: int = 3001):
    """Largest wavenumber where the dispersion determinant changes sign, or None."""
    ks = np.linspace(0.0, kappa_max, samples)
    d = dispersion_det(fcss, params, ks**2)
    idx = np.flatnonzero(np.sign(d[:-1]) != np.sign(d[1:]))
    if idx.size == 0:
        return None
    i = idx[-1]
    return brentq(lambda k: dispersion_det(fcss, params, k * k), ks[i], ks[i + 1], xtol=1e-14)


# --- distributed steady states ---------------------------------------------

@dataclass
class CssRecord:
    u: np.ndarray
    b: float
    kind: str
    avgP: float
    avgK: float
    normP: float
    J: float
    defect: int | None = None
    spectrum: np.ndarray | None = field(default=None, repr=False)
    label: str = ""

    @property
    def P(self) -> np.ndarray:
        return self.u[: self.u.size // 2]

    @property
    def q(self) -> np.ndarray:
        return self.u[self.u.size // 2:]


def make_record(u, b: float, sys: SystemOperators, kind: str | None = None, label: str = "") -> CssRecord:
    s = sys.with_b(b)
    u = np.array(u, dtype=float)
    P, q = s.split(u)
    k = model.optimal_control(q)
    if kind is None:
        kind = "flat" if np.ptp(P) < 1e-8 * (1 + np.max(np.abs(P))) else "patterned"
    J = objective_density(P, q, s) / s.params.r
    return CssRecord(u, float(b), kind, avg(P, s.mesh, s.fem), avg(k, s.mesh, s.fem),
                     normalized_l2(P, s.mesh, s.fem), J, label=label)


def _converged(G, u, tol):
    return np.max(np.abs(G)) < tol * (1 + np.max(np.abs(u)))


def newton_css(u0, sys: SystemOperators, tol: float = NEWTON_TOL, maxit: int = 25,
               label: str = "") -> CssRecord:
    """Newton's method for G(u) = 0 at the parameters of ``sys``."""
    u = np.array(u0, dtype=float)
    G = residual_G(u, sys)
    for it in range(maxit + 1):
        if _converged(G, u, tol):
            return make_record(u, sys.params.b, sys, label=label)
        if it == maxit:
            break
        du = spla.spsolve(jacobian_G(u, sys).tocsc(), -G)
        u = _damped_update(u, du, sys)
        G = residual_G(u, sys)
    raise ConvergenceError("steady-state Newton did not converge", float(np.max(np.abs(G))))


def _damped_update(u, du, sys):
    # halve the step until all costates stay negative
    n = sys.n
    lam = 1.0
    while np.any(u[n:] + lam * du[n:] >= 0):
        lam *= 0.5
        if lam < 1e-6:
            raise DomainError("Newton step leaves the admissible set q < 0")
    return u + lam * du


@dataclass
class Marker:
    index: int
    kind: str  # "fold" | "bif"
    b: float
    u: np.ndarray = field(repr=False)
    kernel: np.ndarray | None = field(default=None, repr=False)
    tangent: np.ndarray | None = field(default=None, repr=False)


@dataclass
class Branch:
    name: str
    points: list = field(default_factory=list)
    tangents: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    markers: list = field(default_factory=list)

    def __len__(self):
        return len(self.points)

    def __getitem__(self, i) -> CssRecord:
        return self.points[i]

    @property
    def b(self) -> np.ndarray:
        return np.array([p.b for p in self.points])

    def bifurcations(self):
        return [m for m in self.markers if m.kind == "bif"]

    def folds(self):
        return [m for m in self.markers if m.kind == "fold"]


def _bordered(Ju, col, row):
    top = sp.hstack([Ju, sp.csr_matrix(col[:, None])])
    return sp.vstack([top, sp.csr_matrix(row[None, :])]).tocsc()


class _Extended:
    """Pseudo-arclength machinery on (u, b) with weighted inner product."""

    def __init__(self, sys: SystemOperators):
        self.sys = sys
        self.w = 1.0 / (2 * sys.n)

    def dot(self, x, y):
        return self.w * (x[:-1] @ y[:-1]) + x[-1] * y[-1]

    def norm(self, x):
        return np.sqrt(self.dot(x, x))

    def residual(self, x):
        return residual_G(x[:-1], self.sys.with_b(x[-1]))

    def jac(self, x):
        s = self.sys.with_b(x[-1])
        return jacobian_G(x[:-1], s), d_residual_db(x[:-1], s)

    def tangent(self, x, direction=1.0, hint=None):
        Ju, Gb = self.jac(x)
        row = hint if hint is not None else np.r_[np.zeros(x.size - 1), 1.0]
        A = _bordered(Ju, Gb, row * np.r_[np.full(x.size - 1, self.w), 1.0])
        rhs = np.zeros(x.size)
        rhs[-1] = 1.0
        t = spla.spsolve(A, rhs)
        t /= self.norm(t)
        return direction * t

    def correct(self, xp, tau, ds_target_point, tol, maxit=12):
        """Newton on {G = 0, <tau, x - anchor> = 0}; ``ds_target_point`` is the anchor."""
        x = xp.copy()
        wt = tau * np.r_[np.full(x.size - 1, self.w), 1.0]
        n = self.sys.n
        for it in range(maxit):
            G = self.residual(x)
            N = self.dot(tau, x - ds_target_point)
            if _converged(G, x[:-1], tol) and abs(N) < 1e-12:
                return x, it
            Ju, Gb = self.jac(x)
            A = _bordered(Ju, Gb, wt)
            dx = spla.spsolve(A, -np.r_[G, N])
            if not np.all(np.isfinite(dx)):
                break
            lam = 1.0
            while np.any(x[n:-1] + lam * dx[n:-1] >= 0) and lam > 1e-3:
                lam *= 0.5
            x = x + lam * dx
            if x[-1] <= 0:
                raise ConvergenceError("corrector left b > 0", np.inf)
        G = self.residual(x)
        if _converged(G, x[:-1], tol) and abs(self.dot(tau, x - ds_target_point)) < 1e-10:
            return x, maxit
        raise ConvergenceError("arclength corrector failed", float(np.max(np.abs(G))))


def _det_sign(x, ext: _Extended) -> float:
    Ju, _ = ext.jac(x)
    lu = spla.splu(Ju.tocsc())
    d = lu.U.diagonal()
    sgn = np.prod(np.sign(d))
    # permutation parities
    for perm in (lu.perm_r, lu.perm_c):
        sgn *= _perm_parity(perm)
    return sgn


def _perm_parity(p):
    p = np.array(p)
    seen = np.zeros(p.size, bool)
    parity = 1
    for i in range(p.size):
        if seen[i]:
            continue
        j, length = i, 0
        while not seen[j]:
            seen[j] = True
            j = p[j]
            length += 1
        if length % 2 == 0:
            parity = -parity
    return parity


def _stable_count(x, sys):
    from .spectral import spectrum_of_state
    return spectrum_of_state(x[:-1], sys.with_b(x[-1])).n_s


def continue_branch(
    start: CssRecord,
    sys: SystemOperators,
    direction: float = 1.0,
    ds: float = 0.01,
    ds_min: float = 1e-6,
    ds_max: float = 0.05,
    max_steps: int = 400,
    b_range: tuple = (0.5, 0.8),
    name: str = "branch",
    tol: float = NEWTON_TOL,
    tangent: np.ndarray | None = None,
    detect: bool = True,
    stop_on_bif_after: int | None = None,
    stop_at_fold: bool = False,
) -> Branch:
    """Pseudo-arclength continuation in b with secant predictor.

    ``direction`` picks the initial sense of b (or of ``tangent`` when given).
    Folds are marked where the b-component of the tangent changes sign, and
    bifurcations where det(dG/du) changes sign without a fold and the count of
    stable eigenvalues changes by an odd number.
    """
    ext = _Extended(sys)
    x = np.r_[start.u, start.b]
    tau = tangent.copy() if tangent is not None else ext.tangent(x, direction)
    if tangent is not None:
        tau = direction * tau / ext.norm(tau)
    br = Branch(name)
    start.label = start.label or f"{name}:pt0"
    br.points.append(start)
    br.tangents.append(tau)
    br.flags.append("regular")
    sgn = _det_sign(x, ext) if detect else 0.0
    while len(br.points) <= max_steps:
        try:
            xn, its = ext.correct(x + ds * tau, tau, x + ds * tau, tol)
            step = xn - x
            if ext.norm(step) > 2.0 * ds or ext.dot(step, tau) <= 0:
                raise ConvergenceError("corrector jumped", 0.0)
        except (ConvergenceError, DomainError, RuntimeError) as exc:
            ds *= 0.5
            if ds < ds_min:
                log.info("%s: step collapse at b=%.6g (%s)", name, x[-1], exc)
                break
            continue
        tau_new = step / ext.norm(step)
        flag = "regular"
        idx = len(br.points)
        if np.sign(tau_new[-1]) != np.sign(tau[-1]) and tau[-1] != 0:
            flag = "fold"
            prev = np.r_[br.points[-2].u, br.points[-2].b] if len(br.points) > 1 else None
            br.markers.append(Marker(idx, "fold", _fold_b(prev, x, xn, ext), xn[:-1].copy()))
        if detect:
            sgn_new = _det_sign(xn, ext)
            if flag != "fold" and sgn_new != sgn:
                ns0, ns1 = _stable_count(x, sys), _stable_count(xn, sys)
                if (ns1 - ns0) % 2:
                    m = _locate_bifurcation(x, xn, tau, ext, tol)
                    m.index = idx
                    br.markers.append(m)
                    flag = "bif"
            sgn = sgn_new
        rec = make_record(xn[:-1], xn[-1], sys, label=f"{name}:pt{idx}")
        br.points.append(rec)
        br.tangents.append(tau_new)
        br.flags.append(flag)
        x, tau = xn, tau_new
        if its <= 3:
            ds = min(ds * 1.5, ds_max)
        elif its > 6:
            ds = max(ds * 0.5, ds_min)
        if not (b_range[0] <= x[-1] <= b_range[1]):
            break
        if stop_on_bif_after is not None and flag == "bif" and idx >= stop_on_bif_after:
            break
        if stop_at_fold and flag == "fold":
            break
    return br


def _fold_b(x0, x1, x2, ext) -> float:
    """Turning value of b from a parabola through three points in arclength."""
    if x0 is None:
        return float(max(x1[-1], x2[-1], key=lambda v: abs(v - x1[-1])))
    s1 = ext.norm(x1 - x0)
    s2 = s1 + ext.norm(x2 - x1)
    c = np.polyfit([0.0, s1, s2], [x0[-1], x1[-1], x2[-1]], 2)
    if c[0] == 0:
        return float(x1[-1])
    sv = -c[1] / (2 * c[0])
    if not 0.0 <= sv <= s2:
        return float(x1[-1])
    return float(np.polyval(c, sv))


def _smallest_real_eig(x, ext):
    from .spectral import _dense_pencil
    import scipy.linalg as sla
    A, B = _dense_pencil(x[:-1], ext.sys.with_b(x[-1]))
    lam, vr = sla.eig(A, B)
    i = np.argmin(np.abs(lam))
    return lam[i], vr[:, i].real


def _locate_bifurcation(x0, x1, tau, ext: _Extended, tol, iters: int = 40) -> Marker:
    """Bisection on det(dG/du) between two accepted points, correcting each
    trial point back onto the branch with an arclength constraint."""
    s0 = _det_sign(x0, ext)
    lo, hi = 0.0, 1.0
    xm = x1
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        guess = x0 + mid * (x1 - x0)
        try:
            xm, _ = ext.correct(guess, tau, guess, tol)
        except ConvergenceError:
            xm = guess
        if _det_sign(xm, ext) == s0:
            lo = mid
        else:
            hi = mid
        if (hi - lo) * ext.norm(x1 - x0) < 1e-9:
            break
    _, phi = _smallest_real_eig(xm, ext)
    n = ext.sys.n
    s = ext.sys
    nrm = normalized_l2(phi[:n], s.mesh, s.fem)
    if nrm < 1e-12:
        nrm = np.linalg.norm(phi)
    phi = phi / nrm
    t = (x1 - x0) / ext.norm(x1 - x0)
    return Marker(-1, "bif", float(xm[-1]), xm[:-1].copy(), kernel=phi, tangent=t)


def branch_switch(marker: Marker, sys: SystemOperators, amplitude: float = 0.1,
                  tol: float = NEWTON_TOL, min_amplitude: float = 1e-3, label: str = ""):
    """Jump from a bifurcation point onto the bifurcating branch.

    Predictor ``u_bif + amplitude * phi``; the corrector keeps the projection
    onto ``phi`` fixed and lets b float.  Returns the new record and the
    secant tangent pointing away from the bifurcation point.
    """
    if marker.kernel is None:
        raise ValueError("marker carries no kernel vector")
    ext = _Extended(sys)
    phi = marker.kernel
    tau = np.r_[phi, 0.0]
    tau /= ext.norm(tau)
    x0 = np.r_[marker.u, marker.b]
    amp = amplitude
    last = None
    while abs(amp) >= min_amplitude:
        guess = x0 + amp * np.r_[phi, 0.0]
        try:
            x, _ = ext.correct(guess, tau, guess, tol, maxit=25)
        except (ConvergenceError, DomainError) as exc:
            last = exc
            amp *= 0.5
            continue
        if np.max(np.abs(x[:-1] - marker.u)) < 0.1 * abs(amp) * np.max(np.abs(phi)):
            amp *= 0.5
            continue
        rec = make_record(x[:-1], x[-1], sys, kind="patterned", label=label)
        t = (x - x0) / ext.norm(x - x0)
        return rec, t
    raise ConvergenceError(f"branch switch failed; try a smaller amplitude ({last})")


def solve_at_b(branch: Branch, b: float, sys: SystemOperators, tol: float = NEWTON_TOL):
    """Records on ``branch`` at exactly ``b``, one per crossing of the b-value."""
    out = []
    for i in range(len(branch) - 1):
        b0, b1 = branch[i].b, branch[i + 1].b
        if (b0 - b) * (b1 - b) > 0 or b0 == b1:
            continue
        if b1 == b and i + 1 < len(branch) - 1:
            continue  # counted as start of the next segment
        th = (b - b0) / (b1 - b0)
        u0 = (1 - th) * branch[i].u + th * branch[i + 1].u
        rec = newton_css(u0, sys.with_b(b), tol=tol, label=f"{branch.name}@{i}")
        rec.label = f"{branch.name}:pt{i if th < 0.5 else i + 1}"
        out.append(rec)
    return out


def canonical(rec: CssRecord) -> CssRecord:
    """Mirror image x -> -x chosen so that P(L) >= P(-L).

    Both orientations are steady states; fixing one makes labels reproducible.
    """
    P, q = rec.P, rec.q
    if P[-1] >= P[0]:
        return rec
    return replace(rec, u=np.r_[P[::-1], q[::-1]])


def mirrored(rec: CssRecord, label: str | None = None) -> CssRecord:
    return replace(rec, u=np.r_[rec.P[::-1], rec.q[::-1]],
                   label=rec.label if label is None else label)


def mode_number(phi, n: int) -> int:
    """Number of sign changes of the state part of a kernel vector."""
    p = np.asarray(phi)[:n]
    p = p[np.abs(p) > 1e-6 * np.max(np.abs(p))]
    return int(np.sum(np.sign(p[:-1]) != np.sign(p[1:])))


def build_catalog(b: float, sys: SystemOperators, modes=(1, 2, 3), b_start: float | None = None,
                  max_steps: int = 300, spectra: bool = True) -> dict:
    """All flat states at ``b`` plus the patterned states on the primary
    branches with the requested mode numbers, keyed by label.

    Primary branches are found by continuing FSI in b upward from ``b_start``
    (default min(b, 0.65)) and switching at its bifurcation points.  Patterned
    records are stored in canonical orientation.
    """
    from .spectral import spectrum
    s = sys.with_b(b)
    out = {}
    for name, (P, q) in zip(_flat_names(fcss_roots(s.params)), fcss_roots(s.params)):
        out[name] = newton_css(s.flat(P, q), s, label=name)
    b0 = min(b, 0.65) if b_start is None else b_start
    s0 = sys.with_b(b0)
    roots0 = fcss_roots(s0.params)
    if modes and len(roots0) == 3:
        fsi = newton_css(s0.flat(*roots0[1]), s0, label="FSI")
        br = continue_branch(fsi, s0, direction=1, name="FSI", max_steps=60, b_range=(b0, 0.8))
        for m in br.bifurcations():
            j = mode_number(m.kernel, s.n)
            if j not in modes:
                continue
            name = f"p{j}"
            try:
                r0, tau = branch_switch(m, s0, 0.1)
            except ConvergenceError as exc:
                log.warning("branch switch to %s failed: %s", name, exc)
                continue
            pb = continue_branch(r0, s0, direction=1, tangent=tau, name=name, max_steps=max_steps,
                                 b_range=(min(b, b0) - 0.05, 0.8))
            for c in solve_at_b(pb, b, s):
                c = canonical(c)
                out[c.label] = c
    if spectra:
        for c in out.values():
            spectrum(c, s)
    return out


def _join(down: Branch, up: Branch, name: str) -> Branch:
    """One branch from two continuations leaving the same start point in
    opposite directions, ordered from the far end of ``down``."""
    nd = len(down)
    out = Branch(name)
    pts = down.points[:0:-1] + up.points
    out.points = [replace(p, label=f"{name}:pt{k}") for k, p in enumerate(pts)]
    out.tangents = [-t for t in down.tangents[:0:-1]] + up.tangents
    out.flags = down.flags[:0:-1] + up.flags
    out.markers = [replace(m, index=nd - m.index) for m in reversed(down.markers)]
    out.markers += [replace(m, index=m.index + nd - 1) for m in up.markers]
    return out


def _flat_names(roots):
    if len(roots) == 3:
        return ["FSC", "FSI", "FSM"]
    if len(roots) == 1:
        return ["FSM"] if roots[0][0] > 1.0 else ["FSC"]
    return [f"FS{i}" for i in range(len(roots))]


def compute_branches(sys: SystemOperators, b_lo: float, b_hi: float, modes=(1, 2, 3),
                     max_steps: int = 400, spectra: bool = True) -> dict:
    """Flat branches FSC, FSI (up to their fold) and FSM over [b_lo, b_hi], plus
    the primary patterned branches bifurcating from FSI, keyed by name."""
    from .spectral import spectrum_of_state
    if not b_lo < b_hi:
        raise ValueError(f"empty parameter range [{b_lo}, {b_hi}]")
    s = sys.with_b(b_lo)
    roots = fcss_roots(s.params)
    out = {}
    rng = (b_lo, b_hi)
    for name, (P, q) in zip(_flat_names(roots), roots):
        if name == "FSI":
            continue
        rec = newton_css(s.flat(P, q), s, label=f"{name}:pt0")
        out[name] = continue_branch(rec, s, direction=1, name=name, max_steps=max_steps, b_range=rng,
                                    detect=False, stop_at_fold=True)
    # FSI degenerates (k -> 0) towards small b, so start it in the middle and go both ways
    b_mid = min(max(b_lo, FSI_START_B), b_hi)
    mid = fcss_roots(sys.params.with_b(b_mid))
    if len(mid) == 3:
        sm = sys.with_b(b_mid)
        rec = newton_css(sm.flat(*mid[1]), sm, label="FSI")
        up = continue_branch(rec, sm, direction=1, name="FSI", max_steps=max_steps, b_range=rng,
                             stop_at_fold=True)
        down = continue_branch(rec, sm, direction=-1, name="FSI", max_steps=max_steps, b_range=rng)
        out["FSI"] = _join(down, up, "FSI")
    if "FSI" in out:
        for m in out["FSI"].bifurcations():
            j = mode_number(m.kernel, s.n)
            if j not in modes:
                continue
            name = f"p{j}"
            try:
                r0, tau = branch_switch(m, s.with_b(m.b), 0.1, label=f"{name}:pt0")
            except ConvergenceError as exc:
                log.warning("branch switch to %s failed: %s", name, exc)
                continue
            pb = continue_branch(r0, s, direction=1, tangent=tau, name=name, max_steps=max_steps,
                                 b_range=rng, detect=False)
            pb.points = [canonical(p) for p in pb.points]
            out[name] = pb
    if spectra:
        for br in out.values():
            for p in br.points:
                p.defect = spectrum_of_state(p.u, sys.with_b(p.b)).defect
    return out
