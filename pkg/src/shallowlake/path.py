"""Canonical paths: the truncated connecting-orbit BVP, initial-state
continuation, objective values, Skiba candidates and pairwise dominance.

The BVP on [0, T] is

    M u'(t) = -G(u(t)),   P(0) = alpha P0 + (1 - alpha) P_start,   Psi (u(T) - u_hat) = 0,

discretized by the trapezoidal rule on a (locally refined) time mesh and solved
by Newton's method on the global sparse system.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cansys import (JacobianPattern, SystemOperators, discounted_objective, objective_density,
                     residual_G_many)
from .css import ConvergenceError, CssRecord
from .fem1d import lumped_product
from .model import DomainError
from .spectral import ProjectionPsi, SpectrumError, build_psi

log = logging.getLogger(__name__)

BVP_TOL = 1e-8
CHORD_RATIO = 0.2


@dataclass
class PathOptions:
    T: float = 100.0
    m0: int = 20
    bvp_tol: float = BVP_TOL
    mesh_tol: float = 1e-5
    max_nodes: int = 2000
    maxit: int = 30
    delta: float = 0.0  # lumping threshold for the approximate Jacobian; 0 = exact
    step: float = 0.25
    min_step: float = 1e-4
    gap_tol: float = 0.05
    T_max: float = 400.0
    arc_step: float = 0.05
    arc_max_steps: int = 150
    adapt: bool = True


@dataclass
class BvpProblem:
    sys: SystemOperators
    target: CssRecord
    psi: ProjectionPsi
    P0: np.ndarray
    P_start: np.ndarray
    alpha: float = 1.0

    def P_left(self, alpha: float | None = None) -> np.ndarray:
        a = self.alpha if alpha is None else alpha
        return a * self.P0 + (1.0 - a) * self.P_start


@dataclass
class PathSolution:
    t: np.ndarray
    U: np.ndarray  # (len(t), 2n)
    alpha: float
    J: float = np.nan
    terminal_gap: float = np.nan
    residual_norm: float = np.nan
    target: str = ""
    flag: str = "regular"
    meta: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.t.size - 1

    @property
    def T(self) -> float:
        return float(self.t[-1])

    def P(self, j=slice(None)):
        return self.U[j, : self.U.shape[1] // 2]

    def q(self, j=slice(None)):
        return self.U[j, self.U.shape[1] // 2:]

    def k(self, j=slice(None)):
        return -1.0 / self.q(j)

    def on_mesh(self, t_new) -> "PathSolution":
        U = _interp(self.t, self.U, t_new)
        return replace(self, t=np.array(t_new, dtype=float), U=U)


def _interp(t, U, t_new):
    t_new = np.asarray(t_new, dtype=float)
    U = np.asarray(U)
    out = np.empty((t_new.size, U.shape[1]))
    tc = np.clip(t_new, t[0], t[-1])
    idx = np.clip(np.searchsorted(t, tc) - 1, 0, t.size - 2)
    th = ((tc - t[idx]) / (t[idx + 1] - t[idx]))[:, None]
    out[:] = (1 - th) * U[idx] + th * U[idx + 1]
    beyond = t_new > t[-1]
    out[beyond] = U[-1]
    return out


# --- discrete system --------------------------------------------------------

class _Discretization:
    """Residual and Jacobian of the trapezoidal BVP on a fixed mesh."""

    def __init__(self, prob: BvpProblem, t: np.ndarray, delta: float = 0.0):
        self.prob = prob
        self.sys = prob.sys
        self.t = np.asarray(t, dtype=float)
        self.h = np.diff(self.t)
        self.n = self.sys.n
        self.N = 2 * self.n * self.t.size
        self.delta = delta
        stiff = None
        if delta > 0:
            # approximate Jacobian: K replaced by M A with A the thresholded M^{-1} K
            A = lumped_product(self.sys.fem, delta)
            D = self.sys.params.D
            stiff = (self.sys.blockM @ sp.block_diag([D * A, -D * A])).tocoo()
        self.pattern = _pattern(self.sys, stiff, delta)

    def residual(self, U, alpha):
        n, M = self.n, self.sys.blockM
        G = residual_G_many(U, self.sys)
        dU = np.diff(U, axis=0)
        coll = (M @ dU.T).T / self.h[:, None] + 0.5 * (G[:-1] + G[1:])
        left = U[0, :n] - self.prob.P_left(alpha)
        right = self.prob.psi.residual(U[-1])
        return np.concatenate([left, coll.ravel(), right])

    def jacobian(self, U):
        n, m = self.n, self.t.size - 1
        nn = 2 * n
        pat = self.pattern
        Jd = pat.data(U)
        Mc = self.sys.blockM.tocoo()
        r0 = (n + nn * np.arange(m))[:, None]
        c0 = (nn * np.arange(m))[:, None]
        hinv = (1.0 / self.h)[:, None]
        rows = [np.arange(n),
                (r0 + Mc.row).ravel(), (r0 + Mc.row).ravel(),
                (r0 + pat.rows).ravel(), (r0 + pat.rows).ravel()]
        cols = [np.arange(n),
                (c0 + Mc.col).ravel(), (c0 + nn + Mc.col).ravel(),
                (c0 + pat.cols).ravel(), (c0 + nn + pat.cols).ravel()]
        vals = [np.ones(n),
                (-Mc.data * hinv).ravel(), (Mc.data * hinv).ravel(),
                0.5 * Jd[:-1].ravel(), 0.5 * Jd[1:].ravel()]
        Psi = self.prob.psi.Psi
        pr, pc = np.nonzero(Psi)
        rows.append(pr + n + nn * m)
        cols.append(pc + nn * m)
        vals.append(Psi[pr, pc])
        return sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.N, self.N))

    def alpha_derivative(self):
        d = np.zeros(self.N)
        d[: self.n] = -(self.prob.P0 - self.prob.P_start)
        return d

    def max_collocation_residual(self, R):
        return float(np.max(np.abs(R)))

    def midpoint_defects(self, U):
        """ODE residual |M u' + G(u)| at interval midpoints of the cubic Hermite
        interpolant built from nodal values and slopes -M^{-1} G(u_j)."""
        lu = _mass_lu(self.sys)
        G = residual_G_many(U, self.sys)
        F = -lu.solve(G.T).T
        h = self.h[:, None]
        um = 0.5 * (U[:-1] + U[1:]) + h / 8 * (F[:-1] - F[1:])
        dum = 1.5 * (U[1:] - U[:-1]) / h - 0.25 * (F[:-1] + F[1:])
        if np.any(um[:, self.n:] >= 0):
            return np.full(len(self.h), np.inf)
        R = (self.sys.blockM @ dum.T).T + residual_G_many(um, self.sys)
        return np.max(np.abs(R), axis=1)


_MASS_CACHE: dict = {}
_PATTERN_CACHE: dict = {}


def _pattern(sys, stiff, delta):
    key = (id(sys.blockM), sys.params, delta)
    if key not in _PATTERN_CACHE:
        _PATTERN_CACHE[key] = (sys.blockM, JacobianPattern(sys, stiff))
    return _PATTERN_CACHE[key][1]


def _mass_lu(sys: SystemOperators):
    key = id(sys.blockM)
    if key not in _MASS_CACHE:
        _MASS_CACHE[key] = (sys.blockM, spla.splu(sys.blockM.tocsc()))
    return _MASS_CACHE[key][1]


def _factor(A):
    return spla.splu(sp.csc_matrix(A), permc_spec="MMD_AT_PLUS_A")


def _newton(disc: _Discretization, U, alpha, tol, maxit):
    """Newton with the factorization kept while the residual contracts fast (chord steps)."""
    n = disc.n
    R = disc.residual(U, alpha)
    lu, last = None, np.inf
    for it in range(maxit + 1):
        res = disc.max_collocation_residual(R)
        if res < tol * (1 + np.max(np.abs(U))):
            return U, res, it
        if it == maxit or not np.isfinite(res):
            break
        if lu is None or res > CHORD_RATIO * last:
            lu = _factor(disc.jacobian(U))
        last = res
        dx = lu.solve(-R).reshape(U.shape)
        if not np.all(np.isfinite(dx)):
            break
        lam = 1.0
        while np.any(U[:, n:] + lam * dx[:, n:] >= 0):
            lam *= 0.5
            if lam < 1e-4:
                raise DomainError("BVP Newton step leaves q < 0")
        U = U + lam * dx
        R = disc.residual(U, alpha)
    raise ConvergenceError("BVP Newton did not converge", float(np.max(np.abs(R))))


def _refine(t, d, tol):
    """Bisect intervals whose defect exceeds tol; prefer the >10x-median outliers."""
    bad = d > tol
    if not bad.any():
        return None
    outliers = bad & (d > 10 * np.median(d))
    if outliers.any():
        bad = outliers
    mids = 0.5 * (t[:-1] + t[1:])[bad]
    return np.sort(np.concatenate([t, mids]))


def _finish(prob: BvpProblem, disc, U, alpha, res) -> PathSolution:
    sol = PathSolution(disc.t.copy(), U, float(alpha), residual_norm=res, target=prob.target.label)
    sol.J = objective_value(sol, prob.sys)
    sol.terminal_gap = float(np.max(np.abs(U[-1] - prob.target.u)))
    return sol


def bvp_solve(problem: BvpProblem, guess: PathSolution, options: PathOptions | None = None,
              alpha: float | None = None) -> PathSolution:
    """Solve the truncated BVP by Newton, refining the time mesh by midpoint defects."""
    opt = options or PathOptions()
    alpha = problem.alpha if alpha is None else alpha
    t = guess.t
    U = guess.U.copy()
    while True:
        disc = _Discretization(problem, t, opt.delta)
        U, res, _ = _newton(disc, U, alpha, opt.bvp_tol, opt.maxit)
        if not opt.adapt or t.size > opt.max_nodes:
            break
        d = disc.midpoint_defects(U)
        t_new = _refine(t, d, opt.mesh_tol * (1 + np.max(np.abs(U))))
        if t_new is None or t_new.size > opt.max_nodes + 1:
            break
        U = _interp(t, U, t_new)
        t = t_new
    return _finish(problem, disc, U, alpha, res)


def objective_value(path: PathSolution, sys: SystemOperators) -> float:
    """Discounted payoff by the trapezoidal rule plus the salvage term at T."""
    n = sys.n
    payoff = [objective_density(u[:n], u[n:], sys) for u in path.U]
    return discounted_objective(path.t, payoff, sys.params.r)


# --- initial state continuation ---------------------------------------------

class PathFamily(list):
    """Converged solutions of one homotopy, in continuation order, with the
    problem that produced them (needed to re-solve at intermediate alpha)."""

    def __init__(self, problem: BvpProblem, items=()):
        super().__init__(items)
        self.problem = problem

    @property
    def alphas(self) -> np.ndarray:
        return np.array([s.alpha for s in self])

    @property
    def values(self) -> np.ndarray:
        return np.array([s.J for s in self])

    def folds(self) -> list:
        return [s for s in self if s.flag == "fold"]


class PathContinuationError(RuntimeError):
    def __init__(self, msg, family):
        super().__init__(msg)
        self.family = family


def constant_path(target: CssRecord, T: float, m: int, alpha: float = 0.0) -> PathSolution:
    t = np.linspace(0.0, T, m + 1)
    return PathSolution(t, np.tile(target.u, (m + 1, 1)), alpha, target=target.label)


def make_problem(P0, target: CssRecord, sys: SystemOperators, psi: ProjectionPsi | None = None,
                 P_start=None) -> BvpProblem:
    s = sys.with_b(target.b)
    if psi is None:
        psi = build_psi(target, s)
    P_start = target.P.copy() if P_start is None else np.asarray(P_start, dtype=float)
    return BvpProblem(s, target, psi, np.asarray(P0, dtype=float), P_start)


def _ensure_horizon(problem, sol, opt):
    """Double T (up to T_max) while the end point is not close to the target."""
    thr = opt.gap_tol * (1 + np.max(np.abs(problem.target.u)))
    while sol.terminal_gap >= thr and sol.T < opt.T_max - 1e-9:
        T_goal = min(2 * sol.T, opt.T_max)
        try:
            sol = _extend_horizon(problem, sol, T_goal, opt)
        except (ConvergenceError, DomainError) as exc:
            log.info("horizon extension to T=%g failed: %s", T_goal, exc)
            break
    if sol.terminal_gap >= thr:
        sol.flag = "gap"
    return sol


def _extend_horizon(problem, sol, T_goal, opt):
    """Grow T by continuation, appending the target state as tail guess."""
    step = 0.25 * sol.T
    while sol.T < T_goal - 1e-9:
        T2 = min(sol.T + step, T_goal)
        t_ext = np.linspace(sol.T, T2, max(int(sol.m * (T2 - sol.T) / sol.T), 5) + 1)[1:]
        t = np.concatenate([sol.t, t_ext])
        tail = np.linspace(0, 1, t_ext.size + 1)[1:, None]
        U = np.vstack([sol.U, (1 - tail) * sol.U[-1] + tail * problem.target.u])
        try:
            sol = bvp_solve(problem, replace(sol, t=t, U=U), opt, sol.alpha)
        except (ConvergenceError, DomainError):
            step *= 0.5
            if step < 0.02 * sol.T:
                raise
    return sol


def iscont(P0, target: CssRecord, sys: SystemOperators, options: PathOptions | None = None,
           start: PathSolution | None = None, P_start=None, psi: ProjectionPsi | None = None):
    """Initial state continuation from a known solution to initial state P0.

    Without ``start`` the homotopy begins at the constant path at ``target``.
    Natural continuation in alpha with step halving and a secant predictor;
    if it stalls, pseudo-arclength continuation in (path, alpha) follows the
    solution curve around folds.  Returns every converged solution in order.
    """
    opt = options or PathOptions()
    if target.defect is not None and target.defect != 0:
        raise SpectrumError(f"no SPP (defect {target.defect})")
    if start is not None and P_start is None:
        P_start = start.P(0).copy()
    prob = make_problem(P0, target, sys, psi, P_start)
    if start is None:
        start = constant_path(target, max(opt.T, prob.psi.min_horizon), opt.m0)
        start = bvp_solve(prob, start, opt, 0.0)
    else:
        if np.max(np.abs(start.P(0) - prob.P_start)) > 1e-6 * (1 + np.max(np.abs(prob.P_start))):
            raise ValueError("start path does not begin at P_start")
        start = replace(start, alpha=0.0, flag="regular")
    family = PathFamily(prob, [start])
    alpha, step = 0.0, opt.step
    while alpha < 1.0:
        a_new = min(1.0, alpha + step)
        if len(family) >= 2 and family[-1].alpha != family[-2].alpha:
            s1, s0 = family[-1], family[-2].on_mesh(family[-1].t)
            th = (a_new - s1.alpha) / (s1.alpha - s0.alpha)
            guess = replace(s1, U=s1.U + th * (s1.U - s0.U))
            if np.any(guess.U[:, sys.n:] >= 0):
                guess = family[-1]
        else:
            guess = family[-1]
        try:
            sol = bvp_solve(prob, guess, opt, a_new)
        except (ConvergenceError, DomainError, RuntimeError) as exc:
            log.debug("alpha=%.4g failed: %s", a_new, exc)
            step *= 0.5
            if step < opt.min_step:
                break
            continue
        family.append(sol)
        alpha = a_new
        step = min(step * 1.5, opt.step)
    else:
        family[-1] = _ensure_horizon(prob, family[-1], opt)
        return family
    log.info("natural continuation stalled at alpha=%.4g; switching to arclength", alpha)
    if len(family) < 2:
        raise PathContinuationError("no progress from the start solution", family)
    family += _arclength(prob, family[-2], family[-1], opt)
    if family[-1].alpha < 1.0 - 1e-12:
        raise PathContinuationError(
            f"continuation did not reach alpha=1 (max alpha {max(s.alpha for s in family):.4g})", family)
    return family


def _arclength(prob: BvpProblem, prev: PathSolution, cur: PathSolution, opt: PathOptions):
    """Pseudo-arclength continuation in (U, alpha) on a fixed mesh; the mesh is
    refined between steps when the midpoint defect calls for it."""
    out = []
    t = cur.t
    X0 = np.r_[prev.on_mesh(t).U.ravel(), prev.alpha]
    X1 = np.r_[cur.U.ravel(), cur.alpha]
    w = 1.0 / (X1.size - 1)

    def dot(a, b):
        return w * (a[:-1] @ b[:-1]) + a[-1] * b[-1]

    tau = X1 - X0
    tau /= np.sqrt(dot(tau, tau))
    ds = opt.arc_step
    shape = cur.U.shape
    disc = _Discretization(prob, t, opt.delta)
    dR = disc.alpha_derivative()
    n = prob.sys.n
    gap_thr = opt.gap_tol * (1 + np.max(np.abs(prob.target.u)))
    steps = 0
    while steps < opt.arc_max_steps:
        Xp = X1 + ds * tau
        X = Xp.copy()
        wt = np.r_[np.full(X.size - 1, w), 1.0] * tau
        ok = False
        lu, last = None, np.inf
        try:
            for _ in range(opt.maxit):
                U = X[:-1].reshape(shape)
                R = np.r_[disc.residual(U, X[-1]), dot(tau, X - Xp)]
                res = np.max(np.abs(R))
                if res < opt.bvp_tol * (1 + np.max(np.abs(U))):
                    ok = True
                    break
                if lu is None or res > CHORD_RATIO * last:
                    lu = _factor(sp.vstack([sp.hstack([disc.jacobian(U), sp.csc_matrix(dR[:, None])]),
                                            sp.csr_matrix(wt[None, :])]))
                last = res
                dx = lu.solve(-R)
                if not np.all(np.isfinite(dx)):
                    break
                lam = 1.0
                Ud = dx[:-1].reshape(shape)
                while np.any(U[:, n:] + lam * Ud[:, n:] >= 0) and lam > 1e-4:
                    lam *= 0.5
                X = X + lam * dx
        except (DomainError, RuntimeError):
            ok = False
        if ok and dot(X - X1, tau) > 0 and np.sqrt(dot(X - X1, X - X1)) < 3 * ds:
            steps += 1
            tau_new = (X - X1) / np.sqrt(dot(X - X1, X - X1))
            flag = "fold" if np.sign(tau_new[-1]) != np.sign(tau[-1]) else "regular"
            U = X[:-1].reshape(shape)
            if X[-1] >= 1.0:
                # land exactly on alpha = 1
                th = (1.0 - X1[-1]) / (X[-1] - X1[-1])
                g = PathSolution(t, ((1 - th) * X1[:-1] + th * X[:-1]).reshape(shape), 1.0)
                try:
                    sol = _ensure_horizon(prob, bvp_solve(prob, g, opt, 1.0), opt)
                except (ConvergenceError, DomainError) as exc:
                    log.info("arclength: alpha=1 crossing did not converge (%s)", exc)
                    break
                out.append(sol)
                return out
            sol = _finish(prob, disc, U, X[-1], 0.0)
            sol.flag = flag
            log.info("arclength step %d: alpha=%.5f J=%.4f gap=%.3g m=%d %s",
                     steps, X[-1], sol.J, sol.terminal_gap, sol.m, flag)
            sol.meta["arclength"] = True
            out.append(sol)
            if X[-1] < 0:
                break
            if sol.terminal_gap >= gap_thr:
                log.info("arclength: end point left the neighbourhood of the target; stopping")
                sol.flag = "gap"
                break
            X0, X1, tau = X1, X, tau_new
            ds = min(ds * 1.3, opt.arc_step * 4)
            if opt.adapt:
                d = disc.midpoint_defects(U)
                t_new = _refine(t, d, opt.mesh_tol * (1 + np.max(np.abs(U))))
                if t_new is not None and t_new.size <= opt.max_nodes + 1:
                    U0_old = X0[:-1].reshape(shape)
                    sol = bvp_solve(prob, PathSolution(t_new, _interp(t, U, t_new), X[-1]), opt, X[-1])
                    U0 = _interp(t, U0_old, sol.t)
                    t, shape = sol.t, sol.U.shape
                    X0 = np.r_[U0.ravel(), X0[-1]]
                    X1 = np.r_[sol.U.ravel(), sol.alpha]
                    w = 1.0 / (X1.size - 1)
                    tau = X1 - X0
                    tau /= np.sqrt(dot(tau, tau))
                    disc = _Discretization(prob, t, opt.delta)
                    dR = disc.alpha_derivative()
                    out[-1] = replace(sol, flag=flag, meta={"arclength": True})
        else:
            ds *= 0.5
            if ds < opt.min_step:
                break
    return out


# --- Skiba candidates and dominance ------------------------------------------

class SkibaError(RuntimeError):
    pass


@dataclass
class SkibaPoint:
    alpha: float  # in the parameterization of family A
    P: np.ndarray
    J: float
    paths: tuple = ()
    mismatch: float = np.nan
    confirmed: bool = False

    def __iter__(self):
        return iter((self.alpha, self.P, self.J))


def _line_coordinate(prob: BvpProblem, P) -> float:
    d = prob.P0 - prob.P_start
    a = float((np.asarray(P) - prob.P_start) @ d / (d @ d))
    if np.max(np.abs(prob.P_left(a) - P)) > 1e-6 * (1 + np.max(np.abs(P))):
        raise SkibaError("families are not parameterized by a common line")
    return a


def _segment_crossings(xa, ya, xb, yb):
    """Intersections of two polylines in the plane, as (x, y, i, j) with i, j segment indices."""
    out = []
    for i in range(len(xa) - 1):
        p, r = np.array([xa[i], ya[i]]), np.array([xa[i + 1] - xa[i], ya[i + 1] - ya[i]])
        for j in range(len(xb) - 1):
            q, s = np.array([xb[j], yb[j]]), np.array([xb[j + 1] - xb[j], yb[j + 1] - yb[j]])
            den = r[0] * s[1] - r[1] * s[0]
            if den == 0:
                continue
            w = q - p
            u = (w[0] * s[1] - w[1] * s[0]) / den
            v = (w[0] * r[1] - w[1] * r[0]) / den
            if 0 <= u <= 1 and 0 <= v <= 1:
                x, y = p + u * r
                out.append((float(x), float(y), i, j))
    return out


def _envelope(x, y, at):
    """Largest value of the polyline (x, y) over all segments covering ``at``."""
    best = -np.inf
    for i in range(len(x) - 1):
        lo, hi = sorted((x[i], x[i + 1]))
        if lo <= at <= hi:
            th = 0.0 if x[i + 1] == x[i] else (at - x[i]) / (x[i + 1] - x[i])
            best = max(best, (1 - th) * y[i] + th * y[i + 1])
    return best


def _resolve_member(family: "PathFamily", i: int, a_line: float, line_prob: BvpProblem, opt,
                    guess: PathSolution | None = None) -> PathSolution:
    prob = family.problem
    P = line_prob.P_left(a_line)
    a = _line_coordinate(prob, P)
    if guess is None:
        s0, s1 = family[i], family[i + 1]
        th = 0.0 if s1.alpha == s0.alpha else np.clip((a - s0.alpha) / (s1.alpha - s0.alpha), 0, 1)
        U = (1 - th) * s0.U + th * s1.on_mesh(s0.t).U
        guess = replace(s0, U=U)
    return bvp_solve(prob, guess, opt, a)


def skiba_find(familyA: PathFamily, familyB: PathFamily, options: PathOptions | None = None,
               rel_tol: float = 1e-3, maxit: int = 6) -> SkibaPoint:
    """Initial distribution on the common homotopy line where paths to the two
    targets have equal value.

    Both families are read as curves alpha -> J (alpha of family A).  Their
    crossings on the upper envelope are candidates; the best one is refined
    by secant steps with both BVPs re-solved, and accepted when
    |J_A - J_B| < rel_tol |J_A|.
    """
    opt = options or PathOptions()
    familyA = PathFamily(familyA.problem, [s for s in familyA if s.flag != "gap"])
    familyB = PathFamily(familyB.problem, [s for s in familyB if s.flag != "gap"])
    if len(familyA) < 2 or len(familyB) < 2:
        raise SkibaError("no intersection: each family needs at least two members")
    line = familyA.problem
    xa = np.array([_line_coordinate(line, s.P(0)) for s in familyA])
    xb = np.array([_line_coordinate(line, s.P(0)) for s in familyB])
    ya, yb = familyA.values, familyB.values
    cands = []
    for x, y, i, j in _segment_crossings(xa, ya, xb, yb):
        tol = rel_tol * abs(y)
        if y >= max(_envelope(xa, ya, x), _envelope(xb, yb, x)) - tol:
            cands.append((x, y, i, j))
    if not cands:
        raise SkibaError("no intersection of the value curves in the overlap")
    x, y, i, j = max(cands, key=lambda c: c[1])
    pa = _resolve_member(familyA, i, x, line, opt)
    pb = _resolve_member(familyB, j, x, line, opt)
    hist = [(x, pa.J - pb.J)]
    # local slopes of the two value curves give the first secant step
    slope = (ya[i + 1] - ya[i]) / (xa[i + 1] - xa[i] or np.inf) - (yb[j + 1] - yb[j]) / (xb[j + 1] - xb[j] or np.inf)
    for _ in range(maxit):
        f = hist[-1][1]
        if abs(f) < 1e-6 * abs(pa.J):
            break
        if len(hist) >= 2 and hist[-1][1] != hist[-2][1]:
            slope = (hist[-1][1] - hist[-2][1]) / (hist[-1][0] - hist[-2][0])
        if slope == 0 or not np.isfinite(slope):
            break
        x = hist[-1][0] - f / slope
        try:
            pa = _resolve_member(familyA, i, x, line, opt, guess=pa)
            pb = _resolve_member(familyB, j, x, line, opt, guess=pb)
        except (ConvergenceError, DomainError) as exc:
            log.info("skiba refinement stopped: %s", exc)
            x = hist[-1][0]
            pa = _resolve_member(familyA, i, x, line, opt)
            pb = _resolve_member(familyB, j, x, line, opt)
            break
        hist.append((x, pa.J - pb.J))
    mismatch = abs(pa.J - pb.J)
    return SkibaPoint(float(x), line.P_left(x), 0.5 * (pa.J + pb.J), (pa, pb), mismatch,
                      mismatch < rel_tol * abs(pa.J))


@dataclass
class DominanceEntry:
    label: str
    J_stationary: float
    best_J: float
    best_target: str
    dominated: bool
    values: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)


def classify_optimal(css_list, sys: SystemOperators, options: PathOptions | None = None,
                     margin: float = 1e-3, known: dict | None = None) -> dict:
    """Compare each steady state's own value with the paths from its state to
    every other steady state in the list.

    A state is dominated when some path from it beats its stationary value by
    more than ``margin`` |J|.  Solver failures are recorded per pair.
    ``known`` maps (source label, target label) to an already computed family
    for that pair, which is used instead of a new continuation.
    """
    known = known or {}
    if not css_list:
        raise ValueError("need at least one steady state")
    recs = list(css_list)
    for c in recs:
        if c.defect is None:
            from .spectral import spectrum
            spectrum(c, sys.with_b(c.b))
        if c.defect != 0:
            raise SpectrumError(f"no SPP (defect {c.defect}) for {c.label}")
    psis = {c.label: build_psi(c, sys.with_b(c.b)) for c in recs}
    report = {}
    for c in recs:
        entry = DominanceEntry(c.label, c.J, c.J, c.label, False)
        for other in recs:
            if other is c:
                continue
            try:
                fam = known.get((c.label, other.label))
                if fam is None:
                    fam = iscont(c.P, other, sys, options, psi=psis[other.label])
                if fam[-1].alpha < 1.0 or fam[-1].flag == "gap":
                    raise PathContinuationError("family does not reach the initial state", fam)
                entry.values[other.label] = fam[-1].J
            except (PathContinuationError, ConvergenceError, DomainError, SpectrumError) as exc:
                entry.errors[other.label] = str(exc)
                continue
            if fam[-1].J > entry.best_J:
                entry.best_J, entry.best_target = fam[-1].J, other.label
        entry.dominated = entry.best_J > c.J + margin * abs(c.J)
        report[c.label] = entry
    return report
