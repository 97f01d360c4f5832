import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isacsense.env import (
    DEFAULT_CARRIERS,
    CollinearityError,
    DomainError,
    EnvError,
    LinkLog,
    MaskedFeatureError,
    RainModel,
    SoilModel,
    WaterModel,
    fit_water_level,
    forward_fill,
    noise_floor,
    predict_water_level,
    rain_attenuation,
    rain_rate,
    read_link_log,
    rmse,
    rssi_shift,
    soil_phase_shift,
    soil_reflectivity,
    synthetic_tide_log,
    write_link_log,
)
from isacsense.scene import SPEED_OF_LIGHT

model_st = st.builds(RainModel, a=st.floats(1e-4, 5.0), b=st.floats(0.4, 1.6))


@settings(max_examples=100, deadline=None)
@given(model_st, st.floats(0.1, 500))
def test_rain_attenuation_matches_high_precision(model, R):
    with mpmath.workdps(40):
        ref = mpmath.mpf(model.a) * mpmath.power(mpmath.mpf(R), mpmath.mpf(model.b))
    assert rain_attenuation(R, model) == pytest.approx(float(ref), rel=1e-13)


@settings(max_examples=100, deadline=None)
@given(model_st, st.floats(0.1, 500))
def test_rain_round_trip(model, R):
    assert rain_rate(rain_attenuation(R, model), model) == pytest.approx(R, rel=1e-12)


def test_rain_vectorised_and_zero():
    m = RainModel(0.0188, 1.217)
    A = rain_attenuation(np.array([0.0, 1.0, 10.0]), m)
    assert A[0] == 0 and A[1] == pytest.approx(0.0188)
    assert isinstance(rain_attenuation(5.0, m), float)


@pytest.mark.parametrize("a,b", [(0.0, 1.0), (1.0, -1.0), (math.inf, 1.0)])
def test_rain_model_domain(a, b):
    with pytest.raises(DomainError):
        RainModel(a, b)


def test_rain_negative_inputs():
    m = RainModel(0.1, 1.0)
    with pytest.raises(DomainError):
        rain_attenuation(-1.0, m)
    with pytest.raises(DomainError):
        rain_rate(np.array([1.0, np.nan]), m)


def test_soil_formulas():
    assert soil_reflectivity(1.0) == 0.0
    assert soil_reflectivity(4.0) == pytest.approx(1 / 9)
    # one extra wavelength of path when (sqrt(eps) - 1) L = lambda
    f = 1e9
    L = SPEED_OF_LIGHT / f
    assert soil_phase_shift(4.0, L, f) == pytest.approx(2 * np.pi)
    np.testing.assert_allclose(soil_reflectivity(np.array([1.0, 9.0])), [0.0, 0.25])
    with pytest.raises(DomainError):
        SoilModel(0.5)
    with pytest.raises(DomainError):
        soil_phase_shift(2.0, -1.0, f)


def _log(noise_db=0.0, seed=0, **kw):
    return synthetic_tide_log(noise_db=noise_db, seed=seed, **kw)


def test_noise_free_regression_is_exact():
    # without noise every carrier is affine in the level, so use one
    lg, m = _log(carriers=["B1_C1"])
    model = fit_water_level(lg)
    assert model.training_rmse < 1e-9
    np.testing.assert_allclose(predict_water_level(model, lg), lg.level_cm, atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_standardised_fit_predicts_the_same(seed):
    lg, _ = _log(noise_db=1.0, seed=seed)
    a = fit_water_level(lg)
    b = fit_water_level(lg, standardize=True)
    np.testing.assert_allclose(predict_water_level(a, lg), predict_water_level(b, lg), atol=1e-8)


def test_fit_respects_training_span():
    lg, _ = _log(noise_db=1.0)
    model = fit_water_level(lg, (0.0, 12 * 3600.0))
    assert model.training_window == (0.0, 43200.0)
    half = lg.subset(lg.timestamps < 43200)
    np.testing.assert_allclose(model.weights, fit_water_level(half).weights)


def test_collinear_carriers_are_named():
    lg, _ = _log(noise_db=1.0)
    X = np.column_stack([lg.features, 2 * lg.features[:, 2] + 1.0])
    bad = LinkLog(lg.timestamps, X, [*lg.carriers, "B3_C1_copy"], lg.level_cm)
    with pytest.raises(CollinearityError) as exc:
        fit_water_level(bad)
    assert len(exc.value.carriers) == 1
    assert exc.value.carriers[0] in {"B3_C1", "B3_C1_copy", "bias"}


def test_constant_feature_rejected_when_standardising():
    lg, _ = _log()
    lg.features[:, 0] = -90.0
    with pytest.raises(CollinearityError, match="B1_C1"):
        fit_water_level(lg, standardize=True)


def test_too_few_rows_and_missing_truth():
    lg, _ = _log(hours=1)
    with pytest.raises(EnvError):
        fit_water_level(lg)
    with pytest.raises(EnvError):
        fit_water_level(LinkLog(lg.timestamps, lg.features, lg.carriers))


def test_model_json_round_trip():
    lg, _ = _log(noise_db=1.0)
    for std in (False, True):
        m = fit_water_level(lg, standardize=std)
        back = WaterModel.from_json(m.to_json())
        np.testing.assert_array_equal(predict_water_level(back, lg), predict_water_level(m, lg))


def test_forward_fill_limits_gap():
    X = np.array([[1.0], [np.nan], [np.nan], [np.nan], [np.nan], [2.0]])
    lg = LinkLog(np.arange(6.0), X, ["c"])
    out = forward_fill(lg, max_gap=3).features[:, 0]
    np.testing.assert_array_equal(out[:4], [1, 1, 1, 1])
    assert np.isnan(out[4]) and out[5] == 2


def test_masked_features_need_policy():
    lg, _ = _log(noise_db=1.0)
    m = fit_water_level(lg)
    lg.features[5, 1] = np.nan
    with pytest.raises(MaskedFeatureError):
        predict_water_level(m, lg)
    filled = predict_water_level(m, lg, impute="ffill")
    assert np.all(np.isfinite(filled))
    with pytest.raises(EnvError):
        predict_water_level(m, np.zeros((3, 2)))


def test_noise_free_carriers_are_collinear():
    lg, _ = _log()
    with pytest.raises(CollinearityError):
        fit_water_level(lg)


def test_fit_skips_masked_rows():
    lg, _ = _log(carriers=["B1_C1"])
    lg.features[3, 0] = np.nan
    m = fit_water_level(lg)
    assert m.training_rmse < 1e-9


def test_noise_floor_closed_forms():
    assert noise_floor([0.1], 1.0) == pytest.approx(10.0)
    assert noise_floor([0.1, 0.1], 1.0) == pytest.approx(10 / np.sqrt(2))
    # prior information only shrinks the error
    assert noise_floor([0.1], 1.0, level_std=5.0) == pytest.approx(1 / np.sqrt(0.01 + 0.04))


def test_regression_approaches_noise_floor():
    lg, m = _log(hours=240, noise_db=1.0, seed=4)
    model = fit_water_level(lg, (0.0, 120 * 3600.0))
    test = lg.subset(lg.timestamps >= 120 * 3600)
    err = rmse(predict_water_level(model, test), test.level_cm)
    floor = noise_floor(m, 1.0, np.std(lg.level_cm))
    assert err == pytest.approx(floor, rel=0.15)


def test_synthetic_log_shape():
    lg, m = synthetic_tide_log(seed=1)
    assert len(lg) == 144 and lg.carriers == DEFAULT_CARRIERS
    assert np.all((np.abs(m) >= 0.05) & (np.abs(m) <= 0.15))
    assert lg.level_cm.max() == pytest.approx(210, abs=1)


def test_link_log_validation():
    with pytest.raises(EnvError):
        LinkLog([0.0, 1.0], np.zeros((3, 2)), ["a", "b"])
    with pytest.raises(EnvError):
        LinkLog([1.0, 0.0], np.zeros((2, 1)), ["a"])
    with pytest.raises(EnvError):
        LinkLog([0.0, 1.0], np.zeros((2, 1)), ["a"], level_cm=[1.0])


def test_csv_round_trip(tmp_path):
    lg, _ = _log(noise_db=1.0, start=1.7e9)
    lg.features[2, 3] = np.nan
    path = tmp_path / "log.csv"
    write_link_log(lg, path)
    back = read_link_log(path)
    assert back.carriers == lg.carriers
    np.testing.assert_allclose(back.timestamps, lg.timestamps)
    np.testing.assert_array_equal(back.features, lg.features)
    np.testing.assert_array_equal(back.level_cm, lg.level_cm)
    assert path.read_text().splitlines()[1].startswith("2023-11-14T22:13:20Z")


@pytest.mark.parametrize(
    "body, match",
    [("2024-01-01T00:00:00Z,1.0\n2024-01-01T00:10:00Z,x\n", "row 3 column 'a'"),
     ("yesterday,1.0\n", "row 2 column 'timestamp'"),
     ("2024-01-01T00:00:00Z,1.0,2.0\n", "row 2 has 3 columns")],
)
def test_csv_errors_name_the_cell(tmp_path, body, match):
    path = tmp_path / "bad.csv"
    path.write_text("timestamp,a\n" + body)
    with pytest.raises(EnvError, match=match):
        read_link_log(path)


def test_rssi_shift():
    a = {"c1": [-80.0, -82.0, -81.0], "c2": -90.0}
    b = {"c1": -79.0, "c2": [-93.0, -93.0]}
    rep = rssi_shift(a, b)
    assert rep.displacement == {"c1": 2.0, "c2": -3.0}
    assert rep.mean == pytest.approx(-0.5) and rep.max_abs == 3.0
    assert rep.rms == pytest.approx(np.sqrt(6.5))
    with pytest.raises(EnvError, match=r"only in a: \['c2'\]"):
        rssi_shift(a, {"c1": 1.0, "c3": 2.0})
    with pytest.raises(EnvError):
        rssi_shift({}, {})
