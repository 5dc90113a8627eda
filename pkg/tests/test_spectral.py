import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shallowlake.cansys import make_system
from shallowlake.fem1d import build_mesh
from shallowlake.model import ModelParams
from shallowlake.spectral import (SpectrumError, SpectrumReport, build_psi, has_spp, spectrum,
                                  spectrum_of_state, symmetry_residual)


@given(st.integers(0, 10_000), st.floats(0.55, 0.8))
@settings(max_examples=10, deadline=None)
def test_reflection_symmetry_at_any_state(seed, b):
    # linearization of the canonical system pairs lam with r - conj(lam) everywhere
    s = make_system(ModelParams(b=b), build_mesh(6.0, 15))
    rng = np.random.default_rng(seed)
    u = np.r_[rng.uniform(0.1, 2.5, s.n), -rng.uniform(1.0, 20.0, s.n)]
    rep = spectrum_of_state(u, s)
    assert rep.symmetry_residual < 1e-6
    assert rep.defect <= 0


def test_symmetry_residual_detects_asymmetry():
    lam = np.array([-1.0, 1.03, 0.5 + 1j, -0.47 + 1j])
    assert symmetry_residual(lam, 0.03) < 1e-14
    assert symmetry_residual(np.array([-1.0, 2.0]), 0.03) > 0.1


def test_catalog_spectra(cat065, sys065):
    for lbl, rec in cat065.items():
        rep = spectrum(rec, sys065)
        assert rep.symmetry_residual < 1e-6, lbl
        assert rep.n_s + rep.n_u + rep.n_c == 2 * sys065.n
        assert rep.defect <= 0
        assert has_spp(rep) == (rep.defect == 0)


def test_flat_defects(cat065):
    assert [cat065[k].defect for k in ("FSC", "FSI", "FSM")] == [0, -5, 0]


def test_spp_boundary_is_an_error():
    lam = np.array([-1.0, 0.0, 0.03, 1.03])
    rep = SpectrumReport(lam, 1, 1, 2, 2, 0.0, 0.03)
    with pytest.raises(SpectrumError):
        has_spp(rep)
    lam = np.array([-1.0, 0.015, 0.015, 1.03])
    rep = SpectrumReport(lam, 1, 3, 0, 2, 0.0, 0.03)
    assert not has_spp(rep)


def test_psi_annihilates_stable_eigenspace(cat065, sys065):
    fsm = cat065["FSM"]
    psi = build_psi(fsm, sys065)
    rep = spectrum(fsm, sys065, vectors=True)
    stable = rep.right_vectors[:, rep.eigenvalues.real < 0]
    assert psi.Psi.shape == (sys065.n, 2 * sys065.n)
    np.testing.assert_allclose(psi.Psi @ psi.Psi.T, np.eye(sys065.n), atol=1e-10)
    assert np.abs(psi.Psi @ stable).max() < 1e-8 * np.abs(stable).max()
    assert psi.min_horizon < 100.0
    np.testing.assert_allclose(psi.residual(fsm.u), 0.0, atol=1e-14)


def test_defective_target_has_no_psi(cat065, sys065):
    with pytest.raises(SpectrumError, match=r"no SPP \(defect -5\)"):
        build_psi(cat065["FSI"], sys065)
