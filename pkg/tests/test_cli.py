import subprocess
import sys

import numpy as np
import pytest

from shallowlake import formats
from shallowlake.cli import RunConfig, UsageError, load_config, main


def run(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_defaults_and_precedence():
    cfg = load_config({"b": 0.7, "T": 50, "bvp_tol": 1e-9}, {"b": 0.75, "T": None})
    assert (cfg.b, cfg.T, cfg.bvp_tol, cfg.r, cfg.n, cfg.m0, cfg.delta) == (0.75, 50.0, 1e-9, 0.03, 101, 20, 0.0)
    assert RunConfig().newton_tol == 1e-10 and RunConfig().center_tol == 1e-8


@pytest.mark.parametrize("bad", [{"bvp_tol": 0.0}, {"delta": -1.0}, {"n": 2}, {"bogus": 1}, {"r": "x"}])
def test_bad_config_values(bad):
    with pytest.raises(UsageError):
        load_config(bad, {})


def test_usage_errors_exit_2(tmp_path, capsys):
    code, _, err = run(["css", "--b-range", "0.8:0.5", "--outdir", str(tmp_path)], capsys)
    assert code == 2 and "invalid range" in err
    code, _, _ = run(["css", "--b-range", "nonsense", "--outdir", str(tmp_path)], capsys)
    assert code == 2
    code, _, err = run(["path", "--from", "FSM", "--to", "XYZ", "--outdir", str(tmp_path)], capsys)
    assert code == 2 and "unknown steady state" in err
    with pytest.raises(SystemExit) as exc:
        main(["path", "--from", "FSM"])
    assert exc.value.code == 2


def test_config_file_and_env(tmp_path, capsys, monkeypatch):
    cfgf = tmp_path / "run.cfg"
    cfgf.write_text("b=0.75\nbvp-tol=0\n")
    code, _, err = run(["path", "--from", "FSM", "--to", "FSM", "--config", str(cfgf)], capsys)
    assert code == 2 and "bvp_tol" in err
    cfgf.write_text("b=0.75\n")
    monkeypatch.setenv("SHALLOWLAKE_OUTDIR", str(tmp_path / "env"))
    code, out, _ = run(["path", "--from", "FSM", "--to", "FSM", "--config", str(cfgf)], capsys)
    assert code == 0
    assert (tmp_path / "env" / "path_FSM_to_FSM.csv").exists()
    J = float(out.split("J = ")[1].split()[0])
    assert J == pytest.approx(-63.109, abs=1e-3)


def test_constant_path_and_defect_message(tmp_path, capsys):
    od = ["--outdir", str(tmp_path), "--b", "0.65"]
    code, out, _ = run(["path", "--from", "FSM", "--to", "FSM"] + od, capsys)
    assert code == 0
    assert float(out.split("J = ")[1].split()[0]) == pytest.approx(-79.2778, abs=1e-3)
    header, sol = formats.read_path(tmp_path / "path_FSM_to_FSM.csv")
    assert header["format"] == "shallowlake-path" and header["b"] == 0.65 and header["n"] == 101
    assert sol.U.shape[1] == 202 and sol.target == "FSM"
    code, _, err = run(["path", "--from", "FSC", "--to", "FSI"] + od, capsys)
    assert code == 1 and "no SPP (defect -5)" in err


def test_catalog_file_is_reused_bit_exactly(tmp_path, capsys):
    od = ["--outdir", str(tmp_path), "--b", "0.65", "--modes", ""]
    code, out, _ = run(["css"] + od, capsys)
    assert code == 0 and "FSI" in out
    header, recs, _ = formats.read_records(tmp_path / "css_b0.65.csv")
    assert [r.label for r in recs] == ["FSC", "FSI", "FSM"]
    assert [r.defect for r in recs] == [0, -5, 0]
    from shallowlake.cli import catalog
    cat = catalog(load_config({}, {"outdir": str(tmp_path)}), 0.65, set())
    for r in recs:
        assert cat[r.label].u.tobytes() == r.u.tobytes()


def test_simulate_numeric_control(tmp_path, capsys):
    od = ["--outdir", str(tmp_path), "--b", "0.65"]
    state = tmp_path / "p0.txt"
    state.write_text(" ".join(["0.5"] * 101))
    code, out, _ = run(["simulate", "--P0", str(state), "--control", "const:0.12", "--horizon", "20",
                        "--dt", "1"] + od, capsys)
    assert code == 0
    _, tr = formats.read_trajectory(tmp_path / "sim_p0_const_0.12.csv")
    assert tr.P.shape == (21, 101)
    np.testing.assert_allclose(tr.k, 0.12)
    assert float(out.split("J = ")[1].split()[0]) == pytest.approx(tr.J, rel=1e-11)
    code, _, _ = run(["simulate", "--P0", str(state), "--control", "lin:1"] + od, capsys)
    assert code == 2


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "shallowlake.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("css", "path", "skiba", "simulate", "report"):
        assert cmd in out.stdout
