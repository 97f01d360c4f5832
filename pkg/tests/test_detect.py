import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from isacsense.detect import (
    BistaticGeometry,
    CfarConfig,
    CfarError,
    DegenerateGeometryError,
    DetectionPoint,
    _box_sum,
    bistatic_to_cartesian,
    cfar_2d,
    points_from_cube,
)
from isacsense.features import FeatureCube
from isacsense.scene import SPEED_OF_LIGHT, Scene, arrival_angle, bistatic_range

SMALL = CfarConfig(guard_cells=(1, 1), training_cells=(2, 1))


def brute_noise(P, cfg):
    """Training-cell mean by explicit enumeration, shrinking at the borders."""
    (g0, g1), (o0, o1) = cfg.guard_cells, cfg.outer
    out = np.zeros_like(P)
    for i in range(P.shape[0]):
        for j in range(P.shape[1]):
            vals = [
                P[a, b]
                for a in range(max(0, i - o0), min(P.shape[0], i + o0 + 1))
                for b in range(max(0, j - o1), min(P.shape[1], j + o1 + 1))
                if abs(a - i) > g0 or abs(b - j) > g1
            ]
            out[i, j] = np.mean(vals)
    return out


heat = hnp.arrays(
    float, st.tuples(st.integers(7, 14), st.integers(5, 9)),
    elements=st.floats(0, 100, allow_nan=False),
)


@settings(max_examples=40, deadline=None)
@given(heat, st.integers(0, 3), st.integers(0, 3))
def test_box_sum_matches_loops(P, h0, h1):
    got = _box_sum(P, (h0, h1))
    for i in range(P.shape[0]):
        for j in range(P.shape[1]):
            want = P[max(0, i - h0):i + h0 + 1, max(0, j - h1):j + h1 + 1].sum()
            assert got[i, j] == pytest.approx(want, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(heat)
def test_cfar_noise_matches_brute_force(P):
    res = cfar_2d(P, SMALL)
    np.testing.assert_allclose(res.noise, brute_noise(P, SMALL), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(heat, st.floats(1e-3, 1e3))
def test_cfar_is_scale_invariant(P, c):
    a = cfar_2d(P, SMALL).mask
    b = cfar_2d(P * c, SMALL).mask
    # thresholds scale exactly; ties within rounding are the only disagreement
    thr = cfar_2d(P, SMALL).threshold
    close = np.isclose(P, thr, rtol=1e-9)
    assert np.array_equal(a[~close], b[~close])


@pytest.mark.parametrize("n", [4, 16, 80])
@pytest.mark.parametrize("pfa", [1e-2, 1e-4])
def test_alpha_inverts_exponential_pfa(n, pfa):
    a = CfarConfig.alpha(n, pfa)
    assert (1 + a / n) ** (-n) == pytest.approx(pfa, rel=1e-12)


def test_empirical_pfa_on_exponential_noise():
    rng = np.random.default_rng(11)
    cfg = CfarConfig(design_pfa=1e-2)
    n_fa, n_cells = 0, 0
    for _ in range(8):
        P = rng.exponential(1.0, (128, 32))
        n_fa += cfar_2d(P, cfg).mask.sum()
        n_cells += P.size
    assert 5e-3 <= n_fa / n_cells <= 2e-2


def test_strong_cell_detected_with_isolated_noise():
    P = np.ones((40, 16))
    P[20, 8] = 1e4
    res = cfar_2d(P)
    assert res.hits.tolist() == [[20, 8]]
    assert res.noise[20, 8] == pytest.approx(1.0)


def test_min_power_floor():
    P = np.full((40, 16), 1e-6)
    P[10, 5] = 1e-3
    assert cfar_2d(P).mask.sum() == 1
    assert cfar_2d(P, CfarConfig(min_power=1e-2)).mask.sum() == 0


@pytest.mark.parametrize(
    "kw",
    [dict(design_pfa=0.0), dict(guard_cells=(-1, 0)), dict(training_cells=(0, 0), guard_cells=(0, 0)),
     dict(min_power=-1.0)],
)
def test_cfar_config_validation(kw):
    with pytest.raises(CfarError):
        CfarConfig(**kw)


def test_cfar_input_validation():
    with pytest.raises(CfarError):
        cfar_2d(np.ones((5, 5)))
    with pytest.raises(CfarError):
        cfar_2d(-np.ones((40, 16)))
    with pytest.raises(CfarError):
        cfar_2d(np.ones(40))


def _cube(power, t=3.0):
    D, G, A = power.shape
    return FeatureCube(power, power.astype(complex), np.linspace(-5, 5, D), np.linspace(0, 1e-7, G),
                       np.arcsin(np.linspace(-1, 1, A)), t)


def test_points_from_cube_one_point_per_cluster():
    power = np.ones((40, 6, 16))
    power[10, 2, 4] = 900.0
    power[11, 2, 4] = 500.0  # same cluster, weaker
    power[30, 4, 12] = 400.0
    cube = _cube(power)
    res = cfar_2d(cube.heatmap(), CfarConfig(design_pfa=1e-6))
    pts = points_from_cube(cube, res)
    assert len(pts) == 2
    first, second = pts
    assert first.snr > second.snr
    assert first.doppler == cube.doppler_axis[10] and first.delay == cube.delay_axis[2]
    assert first.aoa == cube.aoa_axis[4] and first.window_timestamp == 3.0
    assert second.delay == cube.delay_axis[4]
    with pytest.raises(CfarError):
        points_from_cube(cube, cfar_2d(np.ones((30, 10)), SMALL))


def test_detection_point_is_immutable():
    p = DetectionPoint(1e-8, 0.1, 2.0, 10.0, 0.0)
    with pytest.raises(AttributeError):
        p.snr = 3.0


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-6, 6), st.floats(0.3, 8),
    st.floats(0, 2 * np.pi), st.floats(1.0, 4.0),
)
def test_bistatic_inversion_round_trip(x, y, normal, base):
    tx, rx = np.array([0.0, 0.0]), np.array([base, 0.0])
    p = np.array([x, y])
    assume(np.hypot(*(p - rx)) > 0.1)
    delay = (bistatic_range(p, tx, rx)[0] - base) / SPEED_OF_LIGHT
    assume(delay > 1e-11)
    # the unfolded world angle: inversion works for any ray direction
    aoa = np.arctan2(*(p - rx)[::-1]) - normal
    got = bistatic_to_cartesian(delay, aoa, tx, rx, normal)
    np.testing.assert_allclose(got, p, atol=1e-6 * (1 + np.hypot(x, y)))


def test_geometry_from_scene_uses_broadside():
    scene = Scene(tx_position=(0, 0), rx_position=(2, 0), rx_normal=np.deg2rad(120))
    geom = BistaticGeometry.from_scene(scene)
    p = np.array([0.5, 3.0])
    delay = (bistatic_range(p, scene.tx_position, scene.rx_position)[0] - 2) / SPEED_OF_LIGHT
    aoa = arrival_angle(p, scene.rx_position, scene.rx_normal)[0]
    np.testing.assert_allclose(geom.to_cartesian(delay, aoa), p, atol=1e-9)
    assert geom.baseline == 2.0


def test_vectorised_inversion_and_degenerate_delay():
    tx, rx = (0.0, 0.0), (2.0, 0.0)
    pts = bistatic_to_cartesian(np.array([1e-8, 2e-8]), np.array([0.1, -0.2]), tx, rx, np.pi / 2)
    assert pts.shape == (2, 2)
    with pytest.raises(DegenerateGeometryError):
        bistatic_to_cartesian(0.0, 0.3, tx, rx, np.pi / 2)
