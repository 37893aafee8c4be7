import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emsense.scene import (BSConfig, GridRegion, MaterialSpec, SubcarrierGrid, TargetMap, UEConfig, angular_spread,
                           facing_angle, random_ue_positions, receiver_beamformer, steering_vector)


def test_grid_lattice():
    g = GridRegion((1.0, -2.0), 0.5, 4)
    assert g.M == 16
    assert g.cell_area == pytest.approx(0.0625)
    pts = g.points
    assert pts.shape == (16, 2)
    assert set(np.round(pts[:, 0], 12)) == {0.625, 0.875, 1.125, 1.375}
    # row 0 is the top edge, column 0 the left edge
    np.testing.assert_allclose(pts[0], [0.625, -1.625])
    np.testing.assert_allclose(pts[3], [1.375, -1.625])
    np.testing.assert_allclose(pts[-1], [1.375, -2.375])
    assert np.all(g.contains(pts))


def test_material_and_target_validation():
    with pytest.raises(ValueError):
        MaterialSpec("x", 0.9, 0.0)
    with pytest.raises(ValueError):
        MaterialSpec("x", 2.0, -1.0)
    db = (MaterialSpec("a", 2.0, 0.1),)
    with pytest.raises(ValueError):
        TargetMap(np.array([0, 2]), db)
    t = TargetMap(np.array([[0, 1], [1, 0]]), db)
    np.testing.assert_array_equal(t.eps_r, [1, 2, 2, 1])
    np.testing.assert_array_equal(t.sigma, [0, 0.1, 0.1, 0])


def test_device_validation():
    with pytest.raises(ValueError):
        UEConfig((0, 0), 0, 0.1, 1.0)
    with pytest.raises(ValueError):
        UEConfig((0, 0), 2, 0.1, 0.0)
    with pytest.raises(ValueError):
        UEConfig((0, 0), 2, 0.1, 1.0, -1.0)
    with pytest.raises(ValueError):
        BSConfig((0, 0), 0, 0.1, 0.0)


def test_subcarrier_comb_centered():
    sc = SubcarrierGrid(28e9, 1e9, 4)
    np.testing.assert_allclose(sc.frequencies, [26.5e9, 27.5e9, 28.5e9, 29.5e9])
    assert sc.frequencies.mean() == pytest.approx(28e9)
    np.testing.assert_allclose(SubcarrierGrid(28e9, 1e9, 1).frequencies, [28e9])
    with pytest.raises(ValueError):
        SubcarrierGrid(1e9, 1e9, 4)


def test_steering_examples():
    np.testing.assert_allclose(steering_vector(0.0, 4, 0.01, 0.005), 0.5 * np.ones(4))
    a = steering_vector(np.pi / 6, 2, 0.01, 0.005)
    assert np.angle(a[1]) == pytest.approx(-np.pi / 2)


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.integers(1, 64), st.floats(0.1, 2.0))
def test_steering_unit_norm_and_periodic(theta, n, d_over_lambda):
    a = steering_vector(theta, n, 1.0, d_over_lambda)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-12)
    # the phase depends on theta only through sin(theta)
    np.testing.assert_allclose(steering_vector(np.pi - theta, n, 1.0, d_over_lambda), a, atol=1e-9)


def test_facing_and_arrival_angle():
    bs = BSConfig((100.0, 0.0), 8, 0.005, facing_angle((100.0, 0.0)))
    assert bs.orientation == pytest.approx(np.pi)
    assert bs.arrival_angle((0.0, 0.0))[0] == pytest.approx(0.0)


def test_angular_spread_example():
    region = GridRegion((0.0, 0.0), 1.0, 4)
    bs = BSConfig((100.0, 0.0), 8, 0.005, facing_angle((100.0, 0.0)))
    lo, hi = angular_spread(bs, region)
    # corners (99, +-1) are the extreme directions: half-width atan(1/99)
    assert hi - lo == pytest.approx(2 * np.arctan(1 / 99), rel=1e-12)
    assert lo == pytest.approx(-hi)
    # the requested form 2 atan(1/sqrt(100^2 - 1)) agrees to first order
    assert hi - lo == pytest.approx(2 * np.arctan(1 / np.sqrt(100**2 - 1)), rel=2e-2)


def test_angular_spread_errors_and_degenerate():
    region = GridRegion((0.0, 0.0), 1.0, 4)
    with pytest.raises(ValueError):
        angular_spread(BSConfig((0.5, 0.0), 4, 0.005, 0.0), region)
    tiny = GridRegion((0.0, 0.0), 1e-300, 1)
    bs = BSConfig((10.0, 0.0), 4, 0.005, np.pi)
    lo, hi = angular_spread(bs, tiny)
    assert lo == hi
    P = receiver_beamformer(bs, tiny, 0.01)
    a = steering_vector(lo, 4, 0.01, 0.005)
    np.testing.assert_allclose(P, np.outer(a, a.conj()))
    assert np.linalg.matrix_rank(P) == 1


def _wide_bs(n_r=64, wavelength=299792458.0 / 28e9):
    return BSConfig((100.0, 0.0), n_r, wavelength / 2, np.pi), wavelength


def test_beamformer_hermitian_psd_trace():
    bs, lam = _wide_bs(16)
    P = receiver_beamformer(bs, GridRegion((0.0, 0.0), 1.0, 4), lam)
    assert np.linalg.norm(P - P.conj().T) == 0.0
    assert np.linalg.eigvalsh(P).min() >= -1e-10
    assert np.trace(P).real == pytest.approx(1.0, abs=1e-12)


def test_beamformer_quadrature_refinement():
    bs, lam = _wide_bs()
    region = GridRegion((0.0, 0.0), 1.0, 4)
    P1 = receiver_beamformer(bs, region, lam, 1024)
    P2 = receiver_beamformer(bs, region, lam, 2048)
    assert np.linalg.norm(P1 - P2) <= 1e-6


def test_beamformer_suppresses_direct_path():
    bs, lam = _wide_bs()
    region = GridRegion((0.0, 0.0), 1.0, 4)
    P = receiver_beamformer(bs, region, lam)
    lo, hi = angular_spread(bs, region)
    beamwidth = 2.0 / bs.n_r
    for theta in (hi + 5 * beamwidth, lo - 5 * beamwidth, hi + 20 * beamwidth):
        a = steering_vector(theta, bs.n_r, lam, bs.antenna_spacing)
        assert np.linalg.norm(P @ a) < 0.1


def test_random_ue_positions_outside_region():
    region = GridRegion((0.0, 0.0), 1.0, 4)
    pts = random_ue_positions(np.random.default_rng(0), 50, region, 10.0, margin=0.5)
    assert np.all(np.linalg.norm(pts, axis=1) <= 10.0)
    assert not np.any(GridRegion((0.0, 0.0), 1.5, 4).contains(pts))
    again = random_ue_positions(np.random.default_rng(0), 50, region, 10.0, margin=0.5)
    np.testing.assert_array_equal(pts, again)
