"""Command-line driver.

    shallowlake css --b 0.65
    shallowlake css --b-range 0.5:0.8
    shallowlake path --from p3:pt36 --to FSM --b 0.65
    shallowlake skiba --between FSC,FSM --line FSC:PS --b 0.65
    shallowlake simulate --P0 p3:pt36 --control const:FSC --b 0.65
    shallowlake report --b 0.65

Settings come from built-in defaults, then an optional ``--config`` file of
``key=value`` lines, then command-line flags.  Exit status is 0 on success,
1 when a solver fails and 2 for usage or configuration errors.
"""
from __future__ import annotations

import argparse
import logging
import os
import re
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import css as css_mod
from . import formats
from .cansys import forward_ivp, make_system
from .css import ConvergenceError
from .fem1d import DEFAULT_L, DEFAULT_N, build_mesh
from .model import DomainError, ModelParams
from .path import (PathContinuationError, PathOptions, SkibaError, classify_optimal, iscont,
                   skiba_find)
from .spectral import SpectrumError, build_psi, spectrum

OUTDIR_ENV = "SHALLOWLAKE_OUTDIR"
SOLVER_ERRORS = (ConvergenceError, DomainError, SpectrumError, PathContinuationError, SkibaError)

log = logging.getLogger("shallowlake")


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    r: float = 0.03
    gamma: float = 0.5
    b: float = 0.65
    D: float = 0.5
    L: float = DEFAULT_L
    n: int = DEFAULT_N
    T: float = 100.0
    m0: int = 20
    newton_tol: float = 1e-10
    bvp_tol: float = 1e-8
    center_tol: float = 1e-8
    mesh_tol: float = 1e-5
    delta: float = 0.0
    outdir: str = "."

    def validate(self) -> "RunConfig":
        for name in ("newton_tol", "bvp_tol", "center_tol", "mesh_tol"):
            if not getattr(self, name) > 0:
                raise UsageError(f"{name} must be positive")
        if self.delta < 0:
            raise UsageError("delta must be non-negative")
        if self.n < 3 or self.L <= 0 or self.T <= 0 or self.m0 < 1:
            raise UsageError("mesh sizes and horizon must be positive")
        try:
            self.params()
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        return self

    def params(self, b: float | None = None) -> ModelParams:
        return ModelParams(self.r, self.gamma, self.b if b is None else b, self.D)

    def system(self, b: float | None = None):
        return make_system(self.params(b), build_mesh(self.L, self.n))

    def path_options(self) -> PathOptions:
        return PathOptions(T=self.T, m0=self.m0, bvp_tol=self.bvp_tol, mesh_tol=self.mesh_tol,
                           delta=self.delta)

    def echo(self) -> dict:
        d = asdict(self)
        d.pop("outdir")
        return d


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def load_config(file_values: dict, overrides: dict) -> RunConfig:
    cfg = RunConfig()
    for src in (file_values, overrides):
        for k, v in src.items():
            if v is None:
                continue
            if k not in _FIELD_TYPES:
                raise UsageError(f"unknown config key {k!r}")
            kind = _FIELD_TYPES[k]
            try:
                v = int(v) if kind == "int" else (str(v) if kind == "str" else float(v))
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad value for {k}: {v!r}") from exc
            setattr(cfg, k, v)
    return cfg.validate()


def g12(x) -> str:
    return f"{x:.12g}" if isinstance(x, (float, np.floating)) else str(x)


def _out(cfg: RunConfig, name: str) -> Path:
    d = Path(cfg.outdir)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


# --- steady-state catalog ---------------------------------------------------

_MODE_RE = re.compile(r"^p(\d+):")


def _modes_for(ids) -> set:
    modes = set()
    for i in ids:
        if i == "PS":
            modes.add(1)
        m = _MODE_RE.match(i)
        if m:
            modes.add(int(m.group(1)))
    return modes


def _catalog_file(cfg: RunConfig, b: float) -> Path:
    return _out(cfg, f"css_b{b!r}.csv")


def catalog(cfg: RunConfig, b: float, modes) -> dict:
    """Steady states at b keyed by label; reuses a matching catalog file in the output directory."""
    modes = set(modes)
    f = _catalog_file(cfg, b)
    if f.exists():
        try:
            header, recs, _ = formats.read_records(f)
            cached = {int(m) for m in str(header.get("modes") or "").split(";") if m}
            same = all(header.get(k) == v for k, v in cfg.echo().items() if k != "b")
            if same and modes <= cached and header.get("b") == b:
                return {r.label: r for r in recs}
        except (formats.FormatError, OSError, KeyError, ValueError) as exc:
            log.info("ignoring catalog file %s: %s", f, exc)
    sys_ = cfg.system(b)
    cat = css_mod.build_catalog(b, sys_, modes=tuple(sorted(modes)))
    head = cfg.echo()
    head["b"] = b
    head["modes"] = ";".join(str(m) for m in sorted(modes))
    formats.write_records(f, list(cat.values()), head)
    return cat


def stable_pattern(cat: dict):
    """The patterned state with the saddle point property on the lowest mode branch."""
    cands = [r for r in cat.values() if r.kind == "patterned" and r.defect == 0]
    if not cands:
        raise UsageError("no patterned steady state with SPP at this b")

    def key(r):
        m = _MODE_RE.match(r.label)
        return (int(m.group(1)) if m else 99, -r.J)

    return min(cands, key=key)


def resolve(cat: dict, ident: str):
    if ident in cat:
        return cat[ident]
    if ident == "PS":
        return stable_pattern(cat)
    raise UsageError(f"unknown steady state {ident!r}; known: {', '.join(sorted(cat))}")


def _initial(cat, ident: str, n: int) -> tuple[np.ndarray, str]:
    if os.path.isfile(ident):
        return formats.read_state(ident, n), Path(ident).stem
    return resolve(cat, ident).P.copy(), ident


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


# --- commands ----------------------------------------------------------------

def _table(records, out=None):
    out = out or sys.stdout
    print(f"{'name':<12} {'<P>':>16} {'<k>':>16} {'J':>18} {'d':>4}", file=out)
    for r in records:
        d = "" if r.defect is None else r.defect
        print(f"{r.label:<12} {g12(r.avgP):>16} {g12(r.avgK):>16} {g12(r.J):>18} {d!s:>4}", file=out)


def cmd_css(cfg: RunConfig, args) -> int:
    modes = tuple(int(m) for m in args.modes.split(",") if m)
    if args.b_range is not None:
        try:
            lo, hi = (float(x) for x in args.b_range.split(":"))
        except ValueError as exc:
            raise UsageError(f"bad --b-range {args.b_range!r}; expected LO:HI") from exc
        if not lo < hi:
            raise UsageError(f"invalid range: {lo} >= {hi}")
        branches = css_mod.compute_branches(cfg.system(lo), lo, hi, modes)
        for name, br in branches.items():
            head = cfg.echo()
            head.update(b_lo=lo, b_hi=hi)
            f = formats.write_branch(_out(cfg, f"branch_{_safe(name)}.csv"), br, head)
            marks = ", ".join(f"{m.kind}@{g12(m.b)}" for m in br.markers)
            print(f"{name:<5} {len(br):>4} points  b in [{g12(br.b.min())}, {g12(br.b.max())}]"
                  f"  {marks}  -> {f}")
        return 0
    b = cfg.b if args.b is None else args.b
    cat = catalog(cfg, b, modes)
    _table(sorted(cat.values(), key=lambda r: (r.kind != "flat", r.label)))
    print(f"written: {_catalog_file(cfg, b)}")
    return 0


def _family_to(cfg, sys_, target, P0, P_start=None, start=None, psi=None):
    try:
        return iscont(P0, target, sys_, cfg.path_options(), start=start, P_start=P_start, psi=psi)
    except PathContinuationError as exc:
        log.info("%s", exc)
        return exc.family


def cmd_path(cfg: RunConfig, args) -> int:
    b = cfg.b if args.b is None else args.b
    cat = catalog(cfg, b, _modes_for([args.source, args.to]))
    target = resolve(cat, args.to)
    sys_ = cfg.system(b)
    if target.defect is None:
        spectrum(target, sys_)
    if target.defect != 0:
        raise SpectrumError(f"no SPP (defect {target.defect})")
    P0, src = _initial(cat, args.source, sys_.n)
    fam = iscont(P0, target, sys_, cfg.path_options())
    sol = fam[-1]
    head = cfg.echo()
    head.update(b=b, source=src, target=args.to)
    f = formats.write_path(_out(cfg, f"path_{_safe(src)}_to_{_safe(args.to)}.csv"), sol, head)
    folds = [s.alpha for s in fam.folds()]
    print(f"J = {g12(sol.J)}")
    print(f"terminal_gap = {g12(sol.terminal_gap)}")
    print(f"T = {g12(sol.T)}  m = {sol.m}  continuation steps = {len(fam) - 1}")
    print("folds at alpha = " + (", ".join(g12(a) for a in folds) if folds else "none"))
    print(f"written: {f}")
    return 0


def cmd_skiba(cfg: RunConfig, args) -> int:
    b = cfg.b if args.b is None else args.b
    ends = args.line.split(",") if "," in args.line else args.line.split(":")
    pair = args.between.split(",")
    if len(ends) != 2 or len(pair) != 2:
        raise UsageError("expected --between A,B and --line E0:E1 (or E0,E1 when ids contain ':')")
    (ta, tb), (e0, e1) = pair, ends
    cat = catalog(cfg, b, _modes_for([ta, tb, e0, e1]))
    sys_ = cfg.system(b)
    E0, E1 = resolve(cat, e0).P, resolve(cat, e1).P
    fams = []
    for tid in (ta, tb):
        target = resolve(cat, tid)
        if target.defect is None:
            spectrum(target, sys_)
        psi = build_psi(target, sys_)
        if np.array_equal(target.P, E0) or np.array_equal(target.P, E1):
            far = E1 if np.array_equal(target.P, E0) else E0
            fams.append(_family_to(cfg, sys_, target, far, psi=psi))
            continue
        # reach one end of the line first, then move along it
        near, far = (E1, E0) if tid != e1 else (E0, E1)
        lead = iscont(near, target, sys_, cfg.path_options(), psi=psi)
        fams.append(_family_to(cfg, sys_, target, far, P_start=near, start=lead[-1], psi=psi))
    sk = skiba_find(fams[0], fams[1], cfg.path_options())
    pa, pb = sk.paths
    head = cfg.echo()
    head.update(b=b, between=args.between, line=args.line, J=sk.J, mismatch=sk.mismatch)
    for p, tid in ((pa, ta), (pb, tb)):
        formats.write_path(_out(cfg, f"skiba_{_safe(ta)}_{_safe(tb)}_to_{_safe(tid)}.csv"), p, head)
    k_diff = float(np.max(np.abs(pa.k(0) - pb.k(0))))
    print(f"alpha* = {g12(sk.alpha)}")
    print(f"J* = {g12(sk.J)}")
    print(f"J({ta}) = {g12(pa.J)}  J({tb}) = {g12(pb.J)}  mismatch = {g12(sk.mismatch)}")
    print(f"max |k_{ta}(x,0) - k_{tb}(x,0)| = {g12(k_diff)}")
    print("confirmed" if sk.confirmed else "NOT confirmed")
    return 0 if sk.confirmed else 1


def _control(cat, spec: str):
    kind, _, val = spec.partition(":")
    if kind != "const" or not val:
        raise UsageError(f"unsupported control {spec!r}; use const:ID or const:VALUE")
    try:
        k = float(val)
    except ValueError:
        k = resolve(cat, val).avgK
    if k <= 0:
        raise UsageError("control must be positive")
    return k


def cmd_simulate(cfg: RunConfig, args) -> int:
    b = cfg.b if args.b is None else args.b
    ids = [i for i in (args.P0, args.control.partition(":")[2])
           if i and not os.path.isfile(i) and not _is_number(i)]
    cat = catalog(cfg, b, _modes_for(ids)) if ids else {}
    sys_ = cfg.system(b)
    P0, src = _initial(cat, args.P0, sys_.n)
    k = _control(cat, args.control)
    traj = forward_ivp(P0, lambda x, t: np.full_like(x, k), sys_, args.horizon, args.dt, args.scheme)
    head = cfg.echo()
    head.update(b=b, source=src, control=args.control, dt=args.dt, scheme=args.scheme)
    f = formats.write_trajectory(_out(cfg, f"sim_{_safe(src)}_{_safe(args.control)}.csv"), traj, head)
    print(f"J = {g12(traj.J)}")
    print(f"<P>(T) = {g12(float(np.mean(traj.P[-1])))}")
    print(f"written: {f}")
    return 0


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def cmd_report(cfg: RunConfig, args) -> int:
    b = cfg.b if args.b is None else args.b
    ids = args.states.split(",")
    cat = catalog(cfg, b, _modes_for(ids))
    sys_ = cfg.system(b)
    recs = []
    for i in ids:
        try:
            r = resolve(cat, i)
        except UsageError:
            if i in ("FSC", "FSI", "PS"):
                log.info("%s does not exist at b=%s", i, b)
                continue
            raise
        if r.defect is None:
            spectrum(r, sys_)
        if r.defect != 0:
            print(f"{i:<10} skipped: no SPP (defect {r.defect})")
            continue
        recs.append(r)
    rep = classify_optimal(recs, sys_, cfg.path_options())
    rows = []
    for r in recs:
        e = rep[r.label]
        name = "PS" if "PS" in ids and r.label not in ids else r.label
        status = "dominated" if e.dominated else "undominated"
        extra = f" by {e.best_target}" if e.dominated else ""
        print(f"{name:<10} J = {g12(e.J_stationary):>16}  best = {g12(e.best_J):>16}  {status}{extra}")
        for t, v in e.values.items():
            print(f"    -> {t:<10} J = {g12(v)}")
        for t, msg in e.errors.items():
            print(f"    -> {t:<10} failed: {msg}")
        rows.append([name, e.J_stationary, e.best_J, e.best_target, int(e.dominated)])
    head = cfg.echo()
    head["b"] = b
    f = formats.write_table(_out(cfg, f"report_b{b!r}.csv"), "report", head,
                            ["state", "J", "best_J", "best_target", "dominated"], rows)
    print(f"written: {f}")
    return 0


# --- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("configuration")
    g.add_argument("--config", help="key=value configuration file")
    g.add_argument("--outdir", default=None, help=f"output directory (env {OUTDIR_ENV})")
    for name in ("r", "gamma", "D", "L", "T", "newton-tol", "bvp-tol", "center-tol", "mesh-tol", "delta"):
        g.add_argument(f"--{name}", type=float, default=None)
    g.add_argument("--n", type=int, default=None, help="number of spatial nodes")
    g.add_argument("--m0", type=int, default=None, help="initial number of time intervals")
    g.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="shallowlake", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("css", parents=[common], help="steady states and branches")
    x = c.add_mutually_exclusive_group()
    x.add_argument("--b", type=float)
    x.add_argument("--b-range", dest="b_range", help="LO:HI")
    c.add_argument("--modes", default="1,2,3", help="primary patterned branches to follow")
    c.set_defaults(func=cmd_css)

    c = sub.add_parser("path", parents=[common], help="canonical path by initial state continuation")
    c.add_argument("--from", dest="source", required=True, help="steady-state id or state file")
    c.add_argument("--to", required=True, help="target steady-state id")
    c.add_argument("--b", type=float)
    c.set_defaults(func=cmd_path)

    c = sub.add_parser("skiba", parents=[common], help="equal-value point between two targets")
    c.add_argument("--between", required=True, help="A,B")
    c.add_argument("--line", required=True, help="E0:E1 end points of the line of initial states")
    c.add_argument("--b", type=float)
    c.set_defaults(func=cmd_skiba)

    c = sub.add_parser("simulate", parents=[common], help="state equation under a fixed control")
    c.add_argument("--P0", required=True, help="steady-state id or state file")
    c.add_argument("--control", required=True, help="const:ID or const:VALUE")
    c.add_argument("--horizon", type=float, default=1000.0)
    c.add_argument("--dt", type=float, default=0.5)
    c.add_argument("--scheme", choices=["euler", "trapezoidal"], default="trapezoidal")
    c.add_argument("--b", type=float)
    c.set_defaults(func=cmd_simulate)

    c = sub.add_parser("report", parents=[common], help="pairwise dominance of steady states")
    c.add_argument("--states", default="FSC,FSM,PS")
    c.add_argument("--b", type=float)
    c.set_defaults(func=cmd_report)
    return p


def _overrides(args) -> dict:
    keys = ["r", "gamma", "D", "L", "T", "newton_tol", "bvp_tol", "center_tol", "mesh_tol", "delta",
            "n", "m0"]
    out = {k: getattr(args, k) for k in keys}
    out["outdir"] = args.outdir or os.environ.get(OUTDIR_ENV)
    if getattr(args, "b", None) is not None:
        out["b"] = args.b
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = formats.read_config(args.config) if args.config else {}
        cfg = load_config(file_values, _overrides(args))
        if args.command == "simulate" and (args.dt <= 0 or args.horizon <= 0):
            raise UsageError("--dt and --horizon must be positive")
        return args.func(cfg, args)
    except (UsageError, formats.FormatError, OSError) as exc:
        print(f"shallowlake: error: {exc}", file=sys.stderr)
        return 2
    except SOLVER_ERRORS as exc:
        print(f"shallowlake: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
