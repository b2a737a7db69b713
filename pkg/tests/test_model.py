import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from darkstate import model as m
from darkstate.model import (LaserDrive, MagneticField, ModelError, PhaseProfile, QdParameters,
                             SystemConfig)

comp = st.floats(-50, 50, allow_nan=False)
nonzero_field = st.tuples(comp, comp, comp).filter(lambda b: math.hypot(*b) > 1e-3)


def test_field_magnitude():
    assert MagneticField(3, 4, 12).magnitude() == 13
    with pytest.raises(ModelError):
        MagneticField(math.nan, 0, 0)


def test_default_qd_units():
    qd = QdParameters()
    assert qd.linewidth_gamma * (2 * math.pi * qd.radiative_lifetime_tau * 1e-3) == \
        pytest.approx(1, abs=1e-9)
    assert qd.linewidth_gamma == pytest.approx(215.95, abs=0.01)
    assert qd.decay_rate == pytest.approx(1356.85, abs=0.01)


@pytest.mark.parametrize("kw", [{"radiative_lifetime_tau": 0}, {"spin_dephasing_rate": -1},
                                {"dnsp_splitting": math.inf}])
def test_qd_rejects_bad_values(kw):
    with pytest.raises(ModelError):
        QdParameters(**kw)


def test_laser_validation():
    with pytest.raises(ModelError):
        LaserDrive(polarization=(1, 1))
    with pytest.raises(ModelError):
        LaserDrive(rabi=-1)
    with pytest.raises(ModelError):
        PhaseProfile((1.0, 0.5), (0.0, 1.0))
    with pytest.raises(ModelError):
        SystemConfig(lasers=())


def test_phase_ramp():
    p = PhaseProfile.ramp(1.0, 0.5, math.pi)
    assert p(0.0) == 0.0
    assert p(1.25) == pytest.approx(math.pi / 2)
    assert p(9.0) == pytest.approx(math.pi)
    assert p.rate(1.2) == pytest.approx(2 * math.pi)
    assert p.rate(2.0) == 0.0


def test_ground_basis_examples():
    up, down = m.ground_basis(MagneticField(0, 0, 1))
    assert np.allclose(up, [1, 0]) and np.allclose(down, [0, 1])
    up, down = m.ground_basis(MagneticField(1, 0, 0))
    assert np.allclose(up, np.array([1, 1]) / math.sqrt(2))
    assert np.allclose(down, np.array([1, -1]) / math.sqrt(2))
    with pytest.raises(m.DegenerateAxisError):
        m.ground_basis(MagneticField())


@given(nonzero_field)
def test_ground_basis_eigen_equation(b):
    n = np.array(b) / np.linalg.norm(b)
    ns = n[0] * m.SIGMA_X + n[1] * m.SIGMA_Y + n[2] * m.SIGMA_Z
    up, down = m.ground_basis(MagneticField(*b))
    assert np.allclose(ns @ up, up, atol=1e-12)
    assert np.allclose(ns @ down, -down, atol=1e-12)
    assert abs(np.vdot(up, down)) < 1e-12


def test_ground_splitting_examples():
    qd = QdParameters()
    assert m.ground_splitting(qd, MagneticField(18, 0, 0)) == pytest.approx(202.3, abs=0.05)
    assert m.ground_splitting(qd, MagneticField(18, 0, 0)) == \
        pytest.approx(0.42 * qd.absorption_linewidth, rel=2e-3)
    assert m.ground_splitting(QdParameters(dnsp_splitting=400), MagneticField()) == 400
    assert m.ground_splitting(qd, MagneticField()) == 0


@given(nonzero_field, st.floats(0, 500))
def test_ground_hamiltonian_splitting_matches(b, dnsp):
    qd = QdParameters(dnsp_splitting=dnsp)
    field = MagneticField(*b)
    e = np.linalg.eigvalsh(m.ground_hamiltonian(qd, field)[:2, :2]) / m.TWO_PI
    assert e[1] - e[0] == pytest.approx(m.ground_splitting(qd, field), rel=1e-9, abs=1e-9)


def test_dipole_operators():
    dp, dm = m.dipole_operators()
    proj = np.zeros((4, 4))
    proj[2, 2] = 1
    assert np.array_equal(dp.conj().T @ dp, proj)
    assert not np.any(dp @ dm)


def test_in_plane_field_gives_lambda():
    dp, dm = m.dipole_operators()
    up, down = m.ground_basis(MagneticField(5, 0, 0))
    for d, trion in ((dp, 2), (dm, 3)):
        for g in (up, down):
            elem = np.vdot(np.concatenate([g, [0, 0]]), d[:, trion])
            assert abs(elem) ** 2 == pytest.approx(0.5)


def test_hamiltonian_single_laser_resonant():
    cfg = SystemConfig(lasers=(LaserDrive(rabi=10.0),), oh_dispersion_sigma=0)
    h = m.build_hamiltonian(cfg, MagneticField())
    assert not np.any(h[:2, :2])
    assert not np.any(np.diag(h))
    assert np.allclose(h, h.conj().T)


def test_hamiltonian_equal_frequencies_static():
    l1 = LaserDrive(rabi=10, detuning=5, polarization=m.POL_H)
    l2 = LaserDrive(rabi=20, detuning=5, polarization=m.POL_V)
    cfg = SystemConfig(lasers=(l1, l2))
    oh = MagneticField(3, 1, 2)
    assert np.allclose(m.build_hamiltonian(cfg, oh, 0.0), m.build_hamiltonian(cfg, oh, 0.0173))


def test_hamiltonian_beat_period():
    l1 = LaserDrive(rabi=10)
    l2 = LaserDrive(rabi=20, frequency_offset=80.0, polarization=m.POL_V)
    cfg = SystemConfig(lasers=(l1, l2))
    oh = MagneticField(3, 1, 2)
    h0 = m.build_hamiltonian(cfg, oh, 0.0)
    assert np.allclose(h0, m.build_hamiltonian(cfg, oh, 0.0125), atol=1e-9)
    assert not np.allclose(h0, m.build_hamiltonian(cfg, oh, 0.00625))


def test_collapse_operators_total_decay():
    cfg = SystemConfig()
    ops = m.collapse_operators(cfg)
    assert len(ops) == 2
    total = sum(c.conj().T @ c for c in ops)
    assert np.allclose(total[2:, 2:], cfg.qd.decay_rate * np.eye(2))
    deph = SystemConfig(qd=QdParameters(spin_dephasing_rate=1.0))
    assert len(m.collapse_operators(deph, MagneticField(1, 0, 0))) == 3


@given(nonzero_field)
def test_branching_ratios_complete(b):
    cfg = SystemConfig()
    up, down = m.ground_basis(MagneticField(*b))
    for trion in (2, 3):
        rate = 0.0
        for g in (up, down):
            gv = np.concatenate([g, [0, 0]])
            for c in m.collapse_operators(cfg):
                rate += abs(np.vdot(gv, c[:, trion])) ** 2
        assert rate == pytest.approx(cfg.qd.decay_rate, rel=1e-12)
