import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize, stats

from model_cases import CASES, interior_params
from sivtwin.correlator import correct_background, dilute
from sivtwin.fitting import (
    FitError,
    IllConditionedWarning,
    NoPeakError,
    finite_difference_jacobian,
    fit_double_gaussian,
    fit_exponential_decay,
    fit_lorentzian,
    fit_multi_lorentzian,
    fit_poisson_mean,
    fit_power_broadening,
    fit_saturation,
    least_squares,
)
from sivtwin.fitting.models import LORENTZIAN, QUADRATIC, multi_lorentzian
from sivtwin.io import read_depth_profile
from sivtwin.photons import simulate_decay
from sivtwin.physics import lifetime_limit, lorentzian, power_broadened_fwhm


def lor4(x, c, w, a, b):
    return lorentzian(x - c, w, a, b)


# -- least squares core -----------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.sampled_from(sorted(CASES)), st.lists(st.floats(0, 1), min_size=7, max_size=7))
def test_jacobian_matches_finite_differences(name, u):
    model, x, p = CASES[name]
    q = interior_params(p, u[:len(p)])
    J = model.jac(x, q)
    Jfd = finite_difference_jacobian(model, x, q)
    for j in range(q.size):
        scale = np.abs(Jfd[:, j]).max()
        np.testing.assert_allclose(J[:, j], Jfd[:, j], rtol=1e-4, atol=1e-4 * scale)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(sorted(CASES)), st.lists(st.floats(-0.2, 0.2), min_size=7, max_size=7))
def test_noise_free_recovery_from_perturbed_start(name, d):
    model, x, p = CASES[name]
    p = np.asarray(p, float)
    y = model(x, p)
    p0 = p * (1 + np.asarray(d[:p.size]))
    res = least_squares(model, p0, x, y)
    got = np.array([res[k] for k in model.params])
    np.testing.assert_allclose(got, p, rtol=1e-6)


def test_quadratic_three_points_exact():
    x = np.array([-1.0, 0.5, 2.0])
    y = np.array([3.0, -1.0, 4.0])
    res = least_squares(QUADRATIC, [0, 0, 0], x, y)
    np.testing.assert_allclose(QUADRATIC(x, [res[k] for k in QUADRATIC.params]), y, atol=1e-10)
    assert res.residual_norm < 1e-9


def test_cost_non_increasing():
    rng = np.random.default_rng(0)
    x = np.linspace(-1e9, 1e9, 61)
    y = lor4(x, 1e8, 2e8, 50, 5) + rng.normal(0, 2, x.size)
    res = least_squares(LORENTZIAN, [3e8, 4e8, 30, 0], x, y)
    h = np.asarray(res.extras["cost_history"])
    assert h.size >= 2 and np.all(np.diff(h) <= 1e-12 * h[0])


def test_scipy_oracle_noisy_lorentzian():
    rng = np.random.default_rng(1)
    x = np.linspace(-1e9, 1e9, 61)
    sig = np.full(x.size, 3.0)
    y = lor4(x, 5e7, 2.2e8, 40, 8) + rng.normal(0, 3, x.size)
    p0 = [0.0, 3e8, 35, 5]
    res = least_squares(LORENTZIAN, p0, x, y, sig)
    popt, pcov = optimize.curve_fit(lor4, x, y, p0=p0, sigma=sig, absolute_sigma=False,
                                    method="trf", x_scale=[1e8, 1e8, 10, 1],
                                    ftol=1e-15, xtol=1e-15, gtol=1e-15)
    np.testing.assert_allclose([res[k] for k in LORENTZIAN.params], popt, rtol=1e-5)
    np.testing.assert_allclose([res.err(k) for k in LORENTZIAN.params],
                               np.sqrt(np.diag(pcov)), rtol=0.02)


def test_least_squares_input_validation():
    with pytest.raises(FitError):
        least_squares(QUADRATIC, [0, 0, 0], [0.0, 1.0], [1.0, 2.0])
    with pytest.raises(FitError):
        least_squares(QUADRATIC, [0, 0, 0], [0.0, 1.0, np.nan], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        least_squares(QUADRATIC, [0, 0], [0.0, 1.0, 2.0], [1.0, 2.0, 3.0])


def test_fixed_parameter_kept():
    x = np.linspace(-1e9, 1e9, 61)
    y = lor4(x, 0, 2e8, 50, 5)
    res = least_squares(LORENTZIAN, [0, 2.5e8, 40, 5.0], x, y, fixed=("offset",))
    assert res["offset"] == 5.0 and res["fwhm"] == pytest.approx(2e8, rel=1e-6)


# -- Lorentzian fits --------------------------------------------------------------------------

def test_fit_lorentzian_exact():
    x = np.linspace(-1e9, 1e9, 61)
    res = fit_lorentzian(x, lor4(x, -1.3e8, 1.9e8, 70, 3))
    for k, v in dict(center=-1.3e8, fwhm=1.9e8, amplitude=70, offset=3).items():
        assert res[k] == pytest.approx(v, rel=1e-6, abs=1e-3)


@given(st.floats(0.01, 1e4))
@settings(max_examples=20, deadline=None)
def test_fwhm_invariant_under_y_scaling(s):
    x = np.linspace(-1e9, 1e9, 61)
    y = lor4(x, 1e7, 2e8, 50, 5) + 2 * np.cos(x / 7e7)
    a = fit_lorentzian(x, y)
    b = fit_lorentzian(x, s * y)
    assert b["fwhm"] == pytest.approx(a["fwhm"], rel=1e-6)


def test_windowed_fit_on_one_of_two_peaks():
    G = 1e8
    x = np.linspace(-3e9, 3e9, 1201)
    y = lor4(x, 0, G, 100, 0) + lor4(x, 10 * G, G, 80, 0) + 2.0
    m = np.abs(x) < 5 * G
    res = fit_lorentzian(x[m], y[m])
    assert res["center"] == pytest.approx(0, abs=0.02 * G)
    assert res["fwhm"] == pytest.approx(G, rel=0.02)
    assert res["amplitude"] == pytest.approx(100, rel=0.02)


def test_no_peak_raises():
    rng = np.random.default_rng(2)
    with pytest.raises(NoPeakError):
        fit_lorentzian(np.linspace(-1, 1, 61), rng.normal(10, 1, 61))


def test_multi_lorentzian_level_structure():
    from sivtwin.physics import LevelStructure, transition_frequencies

    f = transition_frequencies(LevelStructure(0.0))
    x = np.linspace(-200e9, 200e9, 4001)
    y = sum(lor4(x, c, 5e9, 100, 0) for c in f.values()) + 1.0
    rng = np.random.default_rng(3)
    y = y + rng.normal(0, 0.5, x.size)
    res = fit_multi_lorentzian(x, y, 4)
    c = [res[f"center_{i}"] for i in range(1, 5)]
    e = [res.err(f"center_{i}") for i in range(1, 5)]
    gs = c[3] - c[2]
    es = c[3] - c[1]
    assert abs(gs - 49e9) < 3 * math.hypot(e[3], e[2])
    assert abs(es - 258e9) < 3 * math.hypot(e[3], e[1])


def test_multi_lorentzian_n1_matches_single():
    x = np.linspace(-1e9, 1e9, 61)
    y = lor4(x, 1e8, 2e8, 40, 5) + np.sin(x / 1e8)
    a = fit_lorentzian(x, y)
    b = fit_multi_lorentzian(x, y, 1)
    assert b["center_1"] == a["center"] and b["fwhm_1"] == a["fwhm"]
    assert b["amplitude_1"] == a["amplitude"] and b["offset"] == a["offset"]


def test_multi_lorentzian_three_lines_sorted():
    inj = [-1.5e9, 0.5e9, 2.0e9]
    x = np.linspace(-3e9, 3e9, 121)
    rng = np.random.default_rng(4)
    y = sum(lor4(x, c, 2.2e8, a, 0) for c, a in zip(inj, (30, 50, 40))) + 3
    y = rng.poisson(y)
    res = fit_multi_lorentzian(x, y, 3)
    for i, c in enumerate(inj, 1):
        assert res[f"center_{i}"] == pytest.approx(c, rel=0.05)


# -- decay ------------------------------------------------------------------------------------

def test_exponential_decay_reference_lifetime():
    d = simulate_decay(1.69, 100_000, np.random.default_rng(5))
    res = fit_exponential_decay(d.t, d.counts)
    assert res["tau_r"] == pytest.approx(1.69, rel=0.02)
    assert 93.9 - 2.2 <= lifetime_limit(res["tau_r"]) / 1e6 <= 93.9 + 2.2


def test_exponential_decay_noise_free():
    t = np.arange(400) * 16e-12
    y = 500 * np.exp(-t / 1.609e-9) + 2
    res = fit_exponential_decay(t, y)
    assert res["tau_r"] == pytest.approx(1.609, rel=1e-6)
    assert lifetime_limit(res["tau_r"]) / 1e6 == pytest.approx(98.9, abs=0.05)


# -- saturation & power broadening --------------------------------------------------------------

POWERS = np.array([1, 2, 5, 10, 23, 50, 100, 200.0])


def sat_data(rng, beta=5.0, T=10.0, P=POWERS):
    mu = 9.7e3 * P / (P + 23) + beta * P
    n = rng.poisson(mu * T)
    return n / T, np.sqrt(np.maximum(n, 1)) / T


def test_saturation_recovery():
    # 20 powers, 100 s each: the background slope is then known to ~2%
    P = np.geomspace(1, 200, 20)
    r, s = sat_data(np.random.default_rng(6), T=100.0, P=P)
    res = fit_saturation(P, r, s)
    assert res["I_max"] == pytest.approx(9.7e3, rel=0.05)
    assert res["P_sat"] == pytest.approx(23, rel=0.05)
    assert res["bg_slope"] == pytest.approx(5, rel=0.05)


def test_saturation_without_background_rho_one():
    r = 9.7e3 * POWERS / (POWERS + 23)
    res = fit_saturation(POWERS, r)
    np.testing.assert_allclose(res.rho(POWERS), 1.0, atol=1e-6)


def test_saturation_rho_feeds_background_correction():
    r, s = sat_data(np.random.default_rng(7), beta=40.0)
    rho = float(fit_saturation(POWERS, r, s).rho(23.0))
    true_rho = 4850 / (4850 + 40 * 23)
    tau = np.linspace(-20e-9, 20e-9, 81)
    g = 1 - np.exp(-np.abs(tau) / 0.85e-9)
    back = correct_background(dilute(g, true_rho), rho)
    assert abs(back[40]) < 0.05


def test_saturation_unbracketed_warns():
    P = np.array([1, 2, 3, 4, 5.0])
    with pytest.warns(IllConditionedWarning):
        fit_saturation(P, 9.7e3 * P / (P + 23) + 5 * P)


def test_power_broadening_recovery():
    P = np.geomspace(1, 200, 10)
    rng = np.random.default_rng(8)
    w = power_broadened_fwhm(P, 100.3e6, 23.0) * (1 + rng.normal(0, 0.01, P.size))
    res = fit_power_broadening(P, w, 0.01 * w)
    assert res["fwhm0"] == pytest.approx(100.3e6, rel=0.03)
    assert res["P_sat"] == pytest.approx(23.0, rel=0.10)


def test_power_broadening_single_power_unidentifiable():
    with pytest.raises(FitError, match="unidentifiable"):
        fit_power_broadening([10.0] * 6, [1.2e8] * 6)


def test_power_broadening_and_saturation_share_psat():
    rng = np.random.default_rng(9)
    r, s = sat_data(rng)
    sat = fit_saturation(POWERS, r, s)
    w = power_broadened_fwhm(POWERS, 100.3e6, 23.0) * (1 + rng.normal(0, 0.02, POWERS.size))
    pb = fit_power_broadening(POWERS, w, 0.02 * w)
    joint = math.hypot(sat.err("P_sat"), pb.err("P_sat"))
    assert abs(sat["P_sat"] - pb["P_sat"]) < 2 * joint


# -- implantation profile ---------------------------------------------------------------------

def srim_table(path, depth_A, counts):
    lines = [" " + "=" * 60,
             "        ION and final RECOIL ATOM DISTRIBUTION",
             "  Ion = Si (28.086 amu)   Energy = 15 keV",
             " " + "=" * 60,
             "   DEPTH        Si           C",
             "   (Ang.)   (Atoms/cm3)  (Atoms/cm3)",
             " -----------  -----------  ------------"]
    lines += [f"{d:9.2E}    {c:9.3E}   0.000E+00" for d, c in zip(depth_A, counts)]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_srim_table_ingest(tmp_path):
    rng = np.random.default_rng(10)
    ions = rng.normal(54.3, 13.9, 20_000)
    edges = np.arange(0, 1500, 20.0)  # Angstrom
    h, _ = np.histogram(ions * 10, edges)
    p = srim_table(tmp_path / "RANGE_3D.txt", edges[:-1] + 10, h * 1e4)
    x, y = read_depth_profile(p)
    assert x.max() < 160  # converted to nm
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = fit_double_gaussian(x, y)
    assert res["mean_1"] == pytest.approx(54.3, rel=0.05)
    assert res["sigma_1"] == pytest.approx(13.9, rel=0.05)


def test_pure_gaussian_second_amplitude_vanishes():
    x = np.linspace(0, 150, 76)
    y = np.exp(-0.5 * ((x - 54.3) / 13.9) ** 2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = fit_double_gaussian(x, y)
    a2 = res["amplitude_2"] * res["sigma_2"]
    assert abs(a2) < 1e-3 * res["amplitude_1"] * res["sigma_1"]


def test_vacancy_profile_dominant_peak():
    x = np.linspace(0, 150, 151)
    y = 1.0 * np.exp(-0.5 * ((x - 44.2) / 12.0) ** 2) + 0.15 * np.exp(-0.5 * ((x - 75) / 20) ** 2)
    res = fit_double_gaussian(x, y)
    assert res.extras["headline_depth"] == pytest.approx(44.2, rel=0.02)


def test_depth_profile_plain_csv(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("depth_nm,density\n1,2\n3,4\n")
    x, y = read_depth_profile(p)
    assert x.tolist() == [1, 3] and y.tolist() == [2, 4]


# -- Poisson -------------------------------------------------------------------------------------

@given(st.lists(st.integers(0, 6), min_size=20, max_size=300))
def test_poisson_mle_is_mean(c):
    assert fit_poisson_mean(c).n_bar == pytest.approx(np.mean(c), rel=1e-12, abs=0)


def test_poisson_all_zero():
    f = fit_poisson_mean([0] * 50)
    assert f.n_bar == 0 and f.ci_low == 0 and f.ci_high > 0


def test_poisson_pmf_expectations():
    counts = [0] * 47 + [1] * 53  # mean 0.53
    f = fit_poisson_mean(counts)
    assert f.expected["0"] / 100 == pytest.approx(math.exp(-0.53), rel=1e-9)
    assert f.expected["0"] / 100 == pytest.approx(0.589, abs=5e-4)
    assert f.expected["1"] / 100 == pytest.approx(0.312, abs=5e-4)
    assert f.expected["2"] / 100 == pytest.approx(0.083, abs=5e-4)


def test_poisson_220_pillars_typical_interval():
    rng = np.random.default_rng(11)
    f = fit_poisson_mean(rng.poisson(0.53, 220))
    assert 0.40 < f.ci_low < 0.53 < f.ci_high < 0.70
    assert f.ci_high - f.ci_low == pytest.approx(0.2, abs=0.04)


def test_poisson_ci_matches_exact_chi2():
    f = fit_poisson_mean([1] * 10 + [0] * 10)
    assert f.ci_low == pytest.approx(stats.chi2.ppf(0.025, 20) / 40)
    assert f.ci_high == pytest.approx(stats.chi2.ppf(0.975, 22) / 40)


@pytest.mark.parametrize("bad", [[-1, 0, 1], [0.5, 1, 2]])
def test_poisson_rejects_bad_counts(bad):
    with pytest.raises(ValueError):
        fit_poisson_mean(bad * 10)


def test_record_has_no_cost_history():
    x = np.linspace(-1e9, 1e9, 61)
    rec = fit_lorentzian(x, lor4(x, 0, 2e8, 50, 5)).to_record()
    assert "cost_history" not in rec.get("extras", {})
