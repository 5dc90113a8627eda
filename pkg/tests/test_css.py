import numpy as np
import pytest

from oracles import flat_polynomial_roots
from shallowlake import css
from shallowlake.cansys import make_system, residual_G
from shallowlake.model import ModelParams


@pytest.mark.parametrize("b", [0.55, 0.65, 0.7, 0.75])
def test_flat_roots_match_polynomial_oracle(b):
    got = np.array([P for P, _ in css.fcss_roots(ModelParams(b=b))])
    np.testing.assert_allclose(got, flat_polynomial_roots(b), rtol=1e-10)


def test_fold_location_matches_root_count_change():
    bf = css.fold_locate(ModelParams())
    assert len(flat_polynomial_roots(bf - 1e-3)) == 3
    assert len(flat_polynomial_roots(bf + 1e-3)) == 1


def test_critical_wavenumber_is_a_sign_change():
    p = ModelParams(b=0.7)
    fsi = css.fcss_roots(p)[1]
    kc = css.critical_wavenumber(fsi, p)
    d = css.dispersion_det(fsi, p, np.array([(kc - 1e-3) ** 2, (kc + 1e-3) ** 2]))
    assert d[0] * d[1] < 0
    # no sign change above kc
    ks = np.linspace(kc + 1e-3, 3, 200)
    assert np.all(np.sign(css.dispersion_det(fsi, p, ks**2)) == np.sign(d[1]))


def test_newton_recovers_perturbed_state(sys065, cat065, rng):
    rec = cat065["FSC"]
    u0 = rec.u * (1 + 0.01 * rng.standard_normal(rec.u.size))
    out = css.newton_css(u0, sys065)
    np.testing.assert_allclose(out.u, rec.u, atol=1e-9)
    assert np.abs(residual_G(out.u, sys065)).max() < 1e-10


def test_newton_failure_reports_residual(sys065):
    with pytest.raises(css.ConvergenceError) as exc:
        css.newton_css(sys065.flat(0.7, -8.0), sys065, maxit=1)
    assert exc.value.residual > 0


def test_patterned_states_are_steady_and_canonical(cat065, sys065):
    pats = [r for r in cat065.values() if r.kind == "patterned"]
    assert {lbl.split(":")[0] for lbl in cat065 if ":" in lbl} == {"p1", "p2", "p3"}
    for r in pats:
        assert np.abs(residual_G(r.u, sys065)).max() < 1e-8 * (1 + np.abs(r.u).max())
        assert np.ptp(r.P) > 0.1
        assert r.P[-1] >= r.P[0] - 1e-12
        assert css.canonical(r) is r


def test_mirror_is_steady(cat065, sys065):
    r = cat065["p3:pt36"] if "p3:pt36" in cat065 else next(v for k, v in cat065.items() if k.startswith("p3"))
    m = css.mirrored(r)
    assert np.abs(residual_G(m.u, sys065)).max() < 1e-8 * (1 + np.abs(m.u).max())
    assert css.canonical(m).P[-1] >= css.canonical(m).P[0]


def test_mode_number():
    x = np.linspace(-1, 1, 101)
    for j in (1, 2, 3, 4):
        phi = np.r_[np.cos(j * np.pi * (x + 1) / 2), np.zeros(101)]
        assert css.mode_number(phi, 101) == j


def test_fsi_continuation_markers():
    s = make_system(ModelParams(b=0.66))
    P, q = css.fcss_roots(s.params)[1]
    start = css.newton_css(s.flat(P, q), s, label="FSI")
    br = css.continue_branch(start, s, direction=1, name="FSI", max_steps=80, b_range=(0.66, 0.8),
                             stop_at_fold=True)
    bifs = br.bifurcations()
    modes = [css.mode_number(m.kernel, s.n) for m in bifs]
    assert modes == [4, 3, 2, 1]
    assert np.all(np.diff([m.b for m in bifs]) > 0)
    assert 0.72 < br.folds()[0].b < 0.735
    assert br.flags[-1] == "fold"
