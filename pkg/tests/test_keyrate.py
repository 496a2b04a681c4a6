import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from oracles import cutoff_by_scan, gllp_per_pulse, h2
from spsqkd import keyrate as kr
from spsqkd.errors import NoKeyError, ValidationError
from spsqkd.keyrate import QkdParams, gllp_rate, tolerable_loss
from spsqkd.simulator import reference_scenario, simulate_run, true_statistics

THIS_WORK = kr.PRESETS["this-work"]

params_st = st.builds(
    QkdParams,
    mu=st.floats(1e-4, 0.2),
    g2=st.floats(0.0, 1.0),
    p_dc=st.floats(0.0, 1e-4),
    e_detector=st.floats(0.0, 0.1),
    eta_bob=st.floats(0.01, 1.0),
    f_ec=st.floats(1.0, 1.5),
    q=st.floats(0.5, 1.0),
)


# -- formula pieces -------------------------------------------------------------


def test_binary_entropy_values():
    assert kr.binary_entropy(0.5) == 1.0
    assert kr.binary_entropy(0.0) == 0.0 and kr.binary_entropy(1.0) == 0.0
    assert kr.binary_entropy(0.11) == pytest.approx(0.4999, abs=1e-4)
    for bad in (-0.01, 1.01, math.nan):
        with pytest.raises(ValueError):
            kr.binary_entropy(bad)


@given(st.floats(0, 1))
def test_binary_entropy_bounds_and_symmetry(e):
    v = kr.binary_entropy(e)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(kr.binary_entropy(1 - e), abs=1e-12)
    assert v == pytest.approx(h2(e), abs=1e-12)


def test_multiphoton_bound():
    assert kr.multiphoton_bound(0.0, 0.5) == 0.0
    assert kr.multiphoton_bound(0.013, 0.133) == pytest.approx(1.124e-5, rel=1e-3)
    assert kr.multiphoton_bound(0.05, 0.05) == pytest.approx(6.25e-5)


def test_click_probability():
    # 0.013 * 0.56 = 7.28e-3 signal plus 1.6e-5 darks
    assert kr.click_probability(0.013, 0.0, 0.56, 1.6e-5) == pytest.approx(7.296e-3)
    assert kr.click_probability(0.0, 12.0, 0.56, 1.6e-5) == 1.6e-5
    a = kr.click_probability(0.013, 0.0, 0.56, 1.6e-5) - 1.6e-5
    b = kr.click_probability(0.013, 10.0, 0.56, 1.6e-5) - 1.6e-5
    assert b == pytest.approx(a / 10)
    with pytest.raises(ValidationError):
        kr.click_probability(0.01, -1.0, 0.5, 0.0)


def test_params_validation():
    for bad in (dict(mu=-1), dict(q=1.1), dict(sift_factor=0.0), dict(eta_bob=0.0), dict(e_detector=0.6), dict(acceptance=2.0)):
        with pytest.raises(ValidationError):
            THIS_WORK.replace(**bad)


# -- GLLP rate ---------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(params_st, st.floats(0, 40))
def test_gllp_matches_oracle(p, loss):
    r = gllp_rate(p, loss)
    ref = gllp_per_pulse(p.mu, p.g2, p.p_dc, p.e_detector, p.eta_bob, loss, p.f_ec, p.q, p.sift_factor)
    assert r.s_inf_per_pulse == pytest.approx(ref, rel=1e-9, abs=1e-18)
    assert r.s_inf == pytest.approx(ref * p.clock, rel=1e-9, abs=1e-12)
    assert r.s_sift == pytest.approx(p.clock * r.p_click * p.sift_factor)
    assert r.s_inf_per_pulse >= 0.0


@settings(max_examples=200, deadline=None)
@given(params_st, st.floats(0, 40))
def test_clamp_is_exact(p, loss):
    r = gllp_rate(p, loss)
    bracket = -1.0
    if r.A > 0 and r.qber / r.A <= 0.5:
        bracket = r.A * (p.q - h2(r.qber / r.A)) - p.f_ec * h2(r.qber)
    assert (r.s_inf_per_pulse == 0.0) == (bracket <= 0.0)
    if r.p_click >= r.p_m:
        assert 0.0 <= r.A <= 1.0


def test_no_single_photon_fraction_gives_zero():
    p = QkdParams(mu=1.0, g2=1.0, p_dc=0.0, e_detector=0.0, eta_bob=0.5)
    r = gllp_rate(p, 0.0)
    assert r.p_m == pytest.approx(r.p_click) and r.A == pytest.approx(0.0)
    assert r.s_inf == 0.0


def test_qber_override():
    r = gllp_rate(THIS_WORK, 5.0, qber_override=0.2)
    assert r.qber == 0.2 and r.s_inf == 0.0
    assert gllp_rate(THIS_WORK, 5.0, qber_override=0.0).s_inf > gllp_rate(THIS_WORK, 5.0).s_inf


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 25))
def test_lower_preparation_quality_strictly_reduces_rate(loss):
    a = gllp_rate(THIS_WORK, loss).s_inf
    b = gllp_rate(THIS_WORK.replace(q=0.9), loss).s_inf
    assume(b > 0)
    assert b < a


@settings(max_examples=150, deadline=None)
@given(
    params_st,
    st.floats(0, 30),
    st.sampled_from(["loss", "e_detector", "g2", "p_dc"]),
    st.floats(0.0, 1.0),
)
def test_monotonicity(p, loss, which, frac):
    base = gllp_rate(p, loss).s_inf_per_pulse
    if which == "loss":
        worse = gllp_rate(p, loss + 10 * frac).s_inf_per_pulse
    else:
        cur = getattr(p, which)
        hi = {"e_detector": 0.5, "g2": 2.0, "p_dc": 1e-3}[which]
        worse = gllp_rate(p.replace(**{which: cur + (hi - cur) * frac}), loss).s_inf_per_pulse
    assert worse <= base * (1 + 1e-12)


# -- curves and cutoffs --------------------------------------------------------------


def test_waks_curve_is_log_linear_at_low_loss():
    curve = kr.rate_loss_curve(kr.PRESETS["waks2002"], [0.0, 5.0, 10.0])
    r = curve.rates_per_pulse
    assert r[0] > 0
    assert r[0] / r[2] == pytest.approx(10.0, rel=0.25)
    assert np.all(np.diff(r) <= 0)


def test_curve_properties():
    curve = kr.rate_loss_curve(THIS_WORK, np.arange(0, 30, 0.5))
    assert len(curve) == 60
    assert np.all(np.diff(curve.rates) <= 0)
    assert np.array_equal(curve.losses, np.arange(0, 30, 0.5))
    zero = kr.rate_loss_curve(THIS_WORK.replace(mu=0.0), [0, 10, 20])
    assert np.all(zero.rates == 0.0)
    with pytest.raises(ValidationError):
        kr.rate_loss_curve(THIS_WORK, [1.0, 1.0])


def test_improved_preset_tolerates_beyond_25_db():
    assert tolerable_loss(kr.PRESETS["improved"]) > 25.0
    assert gllp_rate(kr.PRESETS["improved"], 25.0).s_inf > 0


def test_this_work_default_tolerable_loss():
    assert tolerable_loss(THIS_WORK) == pytest.approx(19.1, abs=0.3)


@settings(max_examples=25, deadline=None)
@given(params_st)
def test_tolerable_loss_matches_scan(p):
    rate = lambda L: gllp_per_pulse(p.mu, p.g2, p.p_dc, p.e_detector, p.eta_bob, L, p.f_ec, p.q)
    assume(rate(0.0) > 0)
    scan = cutoff_by_scan(rate, step=0.002, stop=80.0)
    assume(scan is not None and scan < 79.0)
    assert tolerable_loss(p) == pytest.approx(scan, abs=0.012)


def test_no_key_is_signalled():
    with pytest.raises(NoKeyError):
        tolerable_loss(THIS_WORK.replace(mu=0.0))
    with pytest.raises(NoKeyError):
        tolerable_loss(THIS_WORK.replace(e_detector=0.3))


# -- scenario helpers -------------------------------------------------------------


def test_eom_scenarios():
    best = kr.apply_eom_scenario(THIS_WORK, 1.0, 0.01)
    assert best.mu == pytest.approx(0.01033, abs=5e-6)
    assert best.e_detector == pytest.approx(0.0184)
    assert kr.apply_eom_scenario(THIS_WORK, 0.0, 0.0) == THIS_WORK
    worst = kr.apply_eom_scenario(THIS_WORK, 3.0, 0.03)
    assert tolerable_loss(worst) < tolerable_loss(best) < tolerable_loss(THIS_WORK)
    with pytest.raises(ValidationError):
        kr.apply_eom_scenario(THIS_WORK, -1.0, 0.0)
    with pytest.raises(ValidationError):
        kr.apply_eom_scenario(THIS_WORK, 1.0, 0.6)


def test_mu_from_clickrate():
    assert kr.mu_from_clickrate(66.95e3, 5e6, 0.56) == pytest.approx(0.0239, abs=5e-5)
    assert kr.mu_from_clickrate(0.0, 5e6, 0.56) == 0.0
    assert kr.mu_from_clickrate(1080.0, 5e6, 1.0, dark_rate=80.0) == pytest.approx(2e-4)
    with pytest.raises(ValidationError):
        kr.mu_from_clickrate(1.0, 0.0, 0.5)
    with pytest.raises(ValidationError):
        kr.mu_from_clickrate(1.0, 5e6, 1.5)


def test_mu_from_simulated_click_rate():
    p = reference_scenario()
    s = simulate_run(p, "H", 25_000_000, seed=21)
    dark = 4 * p.dark_rate
    mu = kr.mu_from_clickrate(len(s) / s.acquisition, p.clock.repetition_rate, p.eta_bob, dark)
    sigma = math.sqrt(len(s)) / s.acquisition / (p.clock.repetition_rate * p.eta_bob)
    assert abs(mu - true_statistics(p).mu_channel) < 3 * sigma


def test_loss_to_distance():
    assert kr.loss_to_distance(3.51, 0.08) == pytest.approx(43.9, abs=0.05)


def test_parse_loss_range():
    r = kr.parse_loss_range("0:30:0.25")
    assert r.size == 121 and r[0] == 0.0 and r[-1] == pytest.approx(30.0)
    assert kr.parse_loss_range("5").tolist() == [5.0]
    for bad in ("1:2", "a:b:c", "5:1:1", "0:1:0", "-1:3:1"):
        with pytest.raises(ValidationError):
            kr.parse_loss_range(bad)


def test_presets_match_published_table():
    table = {
        "waks2002": (0.007, 1.05e-6, 0.025, 0.24, 0.14),
        "leifgen2014": (0.029, 24.00e-6, 0.030, 0.31, 0.09),
        "takemoto2015": (0.009, 0.3e-6, 0.023, 0.048, 0.0051),
        "this-work-table": (0.013, 16.00e-6, 0.008, 0.56, 0.133),
        "improved": (0.050, 2.0e-6, 0.008, 0.56, 0.05),
    }
    for name, (mu, p_dc, e, eta, g2) in table.items():
        p = kr.preset(name)
        assert (p.mu, p.p_dc, p.e_detector, p.eta_bob, p.g2) == (mu, p_dc, e, eta, g2)
    assert kr.preset("this-work").e_detector == 0.0084
    assert set(kr.BENCHMARK_PRESETS) <= set(kr.PRESETS)
    with pytest.raises(ValidationError):
        kr.preset("nope")


def test_acceptance_scales_signal_not_multiphoton_bound():
    full = gllp_rate(THIS_WORK, 10.0)
    half = gllp_rate(THIS_WORK.replace(acceptance=0.5), 10.0)
    assert half.p_m == full.p_m
    assert half.p_click - THIS_WORK.p_dc == pytest.approx((full.p_click - THIS_WORK.p_dc) / 2)
