import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sivtwin.physics import (
    BackgroundModel,
    InvalidParameterError,
    LevelStructure,
    OpticalTransitionParams,
    UndefinedRatioError,
    antibunching_time,
    lifetime_from_linewidth,
    lifetime_limit,
    lorentzian,
    power_broadened_fwhm,
    saturation_rate,
    signal_to_background,
    transition_frequencies,
)

pos = st.floats(1e-3, 1e3, allow_nan=False)


def test_default_splittings():
    f = transition_frequencies(LevelStructure())
    assert f["A"] - f["B"] == pytest.approx(49e9, abs=1e-3)
    assert f["A"] - f["C"] == pytest.approx(258e9, abs=1e-3)
    assert f["A"] > f["B"] > f["C"] > f["D"]


def test_degenerate_splittings():
    f = transition_frequencies(LevelStructure(406e12, 0.0, 0.0))
    assert set(f.values()) == {406e12}


def test_hand_evaluated_lines():
    f = transition_frequencies(LevelStructure(0.0, 2.0, 10.0))
    assert [f[k] for k in "ABCD"] == [6.0, 4.0, -4.0, -6.0]


def test_negative_splitting_rejected():
    with pytest.raises(InvalidParameterError):
        transition_frequencies(LevelStructure(0.0, -1.0, 10.0))


@given(st.floats(0, 1e3), st.integers(0, 2000), st.integers(0, 2000))
def test_splitting_identities_exact(z, g, e):
    # integer-valued splittings keep the arithmetic exact
    f = transition_frequencies(LevelStructure(float(z), float(2 * g), float(2 * e)))
    assert f["A"] - f["B"] == pytest.approx(f["C"] - f["D"], abs=1e-9)
    assert f["A"] - f["C"] == pytest.approx(f["B"] - f["D"], abs=1e-9)
    assert f["A"] - f["B"] == pytest.approx(2 * g, abs=1e-9)


def test_lorentzian_values():
    G, A = 80e6, 3.0
    assert lorentzian(0.0, G, A, 0.5) == pytest.approx(A + 0.5)
    assert lorentzian(G / 2, G, A) == pytest.approx(A / 2)
    assert lorentzian(G, G, A) == pytest.approx(A / 5)
    with pytest.raises(InvalidParameterError):
        lorentzian(0.0, 0.0)


@given(st.floats(-1e10, 1e10), pos)
def test_lorentzian_even(d, g):
    assert lorentzian(d, g) == lorentzian(-d, g)


def test_lifetime_limit_values():
    assert lifetime_limit(1.69) / 1e6 == pytest.approx(94.17, abs=0.01)
    assert 93.9 - 2.2 <= lifetime_limit(1.69) / 1e6 <= 93.9 + 2.2
    assert lifetime_limit(1.0 / (2 * math.pi)) == pytest.approx(1e9, rel=1e-15)
    assert lifetime_limit(1.609) / 1e6 == pytest.approx(98.9, abs=0.05)
    with pytest.raises(InvalidParameterError):
        lifetime_limit(0.0)


@given(st.floats(1e-3, 1e3))
def test_lifetime_round_trip(tau):
    assert lifetime_from_linewidth(lifetime_limit(tau)) == pytest.approx(tau, rel=1e-12)


def test_natural_fwhm_tied_to_lifetime():
    p = OpticalTransitionParams(excited_state_lifetime=1.3)
    assert p.natural_fwhm == pytest.approx(1 / (2 * math.pi * 1.3e-9), rel=1e-9)


@pytest.mark.parametrize("kw", [dict(resonant_saturation_power=0.0), dict(max_signal_rate=-1.0),
                                dict(zpl_branching_fraction=1.5), dict(excited_state_lifetime=0.0)])
def test_transition_params_validated(kw):
    with pytest.raises(InvalidParameterError):
        OpticalTransitionParams(**kw)


def test_saturation_values():
    p = OpticalTransitionParams()
    assert saturation_rate(p.resonant_saturation_power, p) == pytest.approx(p.max_signal_rate / 2)
    assert saturation_rate(1e12, p) == pytest.approx(9.7e3, rel=1e-9)
    assert saturation_rate(3 * 23.0, p) == pytest.approx(0.75 * 9.7e3)
    with pytest.raises(InvalidParameterError):
        saturation_rate(-1.0, p)


def test_power_broadening_values():
    assert power_broadened_fwhm(0.0, 100.3e6, 23.0) == 100.3e6
    assert power_broadened_fwhm(23.0, 100.3e6, 23.0) / 1e6 == pytest.approx(141.85, abs=0.01)
    assert power_broadened_fwhm(69.0, 100.3e6, 23.0) == pytest.approx(2 * 100.3e6)


@given(st.floats(0, 1e4), pos, pos)
def test_power_broadening_lower_bound(P, f0, ps):
    w = power_broadened_fwhm(P, f0, ps)
    assert w >= f0
    if P > 0 and P / ps > 1e-12:
        assert w > f0


def test_rho_values():
    p = OpticalTransitionParams()
    assert signal_to_background(50.0, p, BackgroundModel(0.0, 0.0)) == 1.0
    s = saturation_rate(23.0, p)
    assert signal_to_background(23.0, p, BackgroundModel(0.0, s)) == pytest.approx(0.5)
    # S = 9.7k at half saturation of a 19.4k emitter, B = 2.425k
    p2 = OpticalTransitionParams(max_signal_rate=19.4e3)
    assert signal_to_background(23.0, p2, BackgroundModel(0.0, 2.425e3)) == pytest.approx(0.8)
    with pytest.raises(UndefinedRatioError):
        signal_to_background(0.0, p, BackgroundModel(0.0, 0.0))


@given(st.floats(0.1, 500), st.floats(0, 100), st.floats(0, 100))
def test_rho_non_increasing_in_background(P, c1, dc):
    p = OpticalTransitionParams()
    r1 = signal_to_background(P, p, BackgroundModel(c1, 20.0))
    r2 = signal_to_background(P, p, BackgroundModel(c1 + dc, 20.0))
    assert r2 <= r1


@given(st.floats(0, 1e3), st.floats(0, 1e3))
def test_background_non_decreasing(p1, dp):
    b = BackgroundModel(5.0, 20.0)
    assert b.rate(p1 + dp) >= b.rate(p1)


def test_antibunching_time_half_saturation():
    p = OpticalTransitionParams()
    assert antibunching_time(23.0, p) == pytest.approx(0.845e-9)
    assert np.isclose(antibunching_time(0.0, p), 1.69e-9)
