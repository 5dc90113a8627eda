"""Plain-text file formats: a ``# key=value`` header followed by a CSV body.

Floats are written with ``repr`` so that reading a file back reproduces the
in-memory values bit for bit.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .css import CssRecord

FORMAT_VERSION = "1"
BRANCH_COLUMNS = ["index", "b", "avgP", "avgK", "normP_L2", "J", "defect", "flag"]


class FormatError(ValueError):
    pass


def fmt(x) -> str:
    """Full-precision decimal for floats; plain text for everything else."""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "" if x is None else str(x)


def parse_value(s: str):
    s = s.strip()
    if s == "":
        return None
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


# --- header ------------------------------------------------------------------

def write_table(path, kind: str, header: dict, columns, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# format=shallowlake-{kind}\n")
        fh.write(f"# version={FORMAT_VERSION}\n")
        for k, v in header.items():
            fh.write(f"# {k}={fmt(v)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def read_table(path, kind: str | None = None):
    """Return (header dict, column names, list of raw string rows)."""
    header = {}
    body = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                key, sep, val = line[1:].strip().partition("=")
                if not sep:
                    raise FormatError(f"{path}: malformed header line {line!r}")
                header[key.strip()] = parse_value(val)
            elif line.strip():
                body.append(line)
    if header.get("version") is None or str(header["version"]) != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {header.get('version')!r}")
    if kind is not None and header.get("format") != f"shallowlake-{kind}":
        raise FormatError(f"{path}: expected a {kind} file, got {header.get('format')!r}")
    rows = list(csv.reader(io.StringIO("".join(body))))
    if not rows:
        raise FormatError(f"{path}: missing column header")
    return header, rows[0], rows[1:]


def read_config(path) -> dict:
    """Config files use the same ``key=value`` syntax; ``#`` starts a comment line."""
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise FormatError(f"{path}:{ln}: expected key=value")
            out[key.strip().replace("-", "_")] = parse_value(val)
    return out


# --- steady states -----------------------------------------------------------

def write_records(path, records, header: dict | None = None, flags=None) -> Path:
    """Summary table of steady states plus a ``.states.csv`` sidecar holding
    the nodal vectors; both are needed to rebuild the records."""
    path = Path(path)
    records = list(records)
    flags = flags or [getattr(r, "kind", "") for r in records]
    head = dict(header or {})
    rows = []
    for i, (r, fl) in enumerate(zip(records, flags)):
        rows.append([i, r.b, r.avgP, r.avgK, r.normP, r.J, r.defect, fl])
    write_table(path, "branch", head, BRANCH_COLUMNS + ["label", "kind"],
                [row + [r.label, r.kind] for row, r in zip(rows, records)])
    n = records[0].u.size // 2 if records else 0
    cols = ["index"] + [f"P{i}" for i in range(n)] + [f"q{i}" for i in range(n)]
    write_table(_states_path(path), "states", head, cols,
                [[i] + list(r.u) for i, r in enumerate(records)])
    return path


def _states_path(path: Path) -> Path:
    return path.with_name(path.stem + ".states.csv")


def read_records(path):
    """Inverse of :func:`write_records`.  Returns (header, records, flags)."""
    path = Path(path)
    header, cols, rows = read_table(path, "branch")
    _, _, srows = read_table(_states_path(path), "states")
    if len(srows) != len(rows):
        raise FormatError(f"{path}: states sidecar has {len(srows)} rows, expected {len(rows)}")
    ix = {c: i for i, c in enumerate(cols)}
    recs, flags = [], []
    for row, srow in zip(rows, srows):
        u = np.array([float(v) for v in srow[1:]])
        d = parse_value(row[ix["defect"]])
        recs.append(CssRecord(u, float(row[ix["b"]]), row[ix["kind"]], float(row[ix["avgP"]]),
                              float(row[ix["avgK"]]), float(row[ix["normP_L2"]]), float(row[ix["J"]]),
                              d, label=row[ix["label"]]))
        flags.append(row[ix["flag"]])
    return header, recs, flags


def write_branch(path, branch, header: dict | None = None) -> Path:
    head = dict(header or {})
    head["branch"] = branch.name
    return write_records(path, branch.points, head, branch.flags)


# --- paths and trajectories --------------------------------------------------

def write_path(path, sol, header: dict | None = None) -> Path:
    """Path CSV (t, P columns, q columns) plus a ``.meta`` key=value sidecar."""
    path = Path(path)
    n = sol.U.shape[1] // 2
    cols = ["t"] + [f"P{i}" for i in range(n)] + [f"q{i}" for i in range(n)]
    write_table(path, "path", header or {}, cols, [[t] + list(u) for t, u in zip(sol.t, sol.U)])
    meta = {"alpha": sol.alpha, "J": sol.J, "terminal_gap": sol.terminal_gap,
            "residual_norm": sol.residual_norm, "target": sol.target, "flag": sol.flag}
    with open(path.with_suffix(".meta"), "w") as fh:
        for k, v in meta.items():
            fh.write(f"{k}={fmt(v)}\n")
    return path


def read_path(path):
    from .path import PathSolution
    path = Path(path)
    header, cols, rows = read_table(path, "path")
    data = np.array([[float(v) for v in row] for row in rows])
    meta = read_config(path.with_suffix(".meta"))
    sol = PathSolution(data[:, 0].copy(), data[:, 1:].copy(), float(meta["alpha"]), float(meta["J"]),
                       float(meta["terminal_gap"]), float(meta["residual_norm"]),
                       str(meta.get("target") or ""), str(meta.get("flag") or "regular"))
    return header, sol


def write_trajectory(path, traj, header: dict | None = None) -> Path:
    n = traj.P.shape[1]
    head = dict(header or {})
    head["J"] = traj.J
    cols = ["t"] + [f"P{i}" for i in range(n)] + [f"k{i}" for i in range(n)]
    return write_table(path, "trajectory", head, cols,
                       [[t] + list(P) + list(k) for t, P, k in zip(traj.t, traj.P, traj.k)])


def read_trajectory(path):
    from .cansys import Trajectory
    header, cols, rows = read_table(path, "trajectory")
    data = np.array([[float(v) for v in row] for row in rows])
    n = (data.shape[1] - 1) // 2
    return header, Trajectory(data[:, 0].copy(), data[:, 1:n + 1].copy(), data[:, n + 1:].copy(),
                              float(header["J"]))


def read_state(path, n: int) -> np.ndarray:
    """Initial distribution from a file: a states/path/trajectory file (first
    row's P part) or bare numbers, one or more per line."""
    with open(path) as fh:
        first = fh.readline()
    if first.startswith("#"):
        header, cols, rows = read_table(path)
        start = 1 if cols[0] in ("index", "t") else 0
        vals = np.array([float(v) for v in rows[0][start:start + n]])
    else:
        with open(path) as fh:
            vals = np.array(fh.read().replace(",", " ").split(), dtype=float)
    if vals.size != n:
        raise FormatError(f"{path}: expected {n} nodal values, got {vals.size}")
    return vals
