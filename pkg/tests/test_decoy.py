import io
import math
from dataclasses import replace

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from qlink.channel import ChannelParams, DetectorParams
from qlink.decoy import (
    SKR_CSV_HEADER,
    DecoyKeyRateModel,
    GainQber,
    ProtocolParams,
    background_yield,
    gain_and_qber,
    link_eta,
    optimize_flux,
    secret_key_rate,
    simulate_gates,
    sweep_distance,
    yield_bounds,
    zero_crossing,
)

mpmath.mp.dps = 40


def oracle_rate(mu, nu, eta, y0, e_opt, e0=0.5, q=0.5, f=1.16):
    """Independent high-precision evaluation of the two-intensity key rate."""
    mu, nu, eta, y0, e_opt, e0 = map(mpmath.mpf, (mu, nu, eta, y0, e_opt, e0))

    def gain(m):
        d = 1 - mpmath.exp(-eta * m)
        return y0 + d, (e0 * y0 + e_opt * d) / (y0 + d)

    def h2(p):
        return 0 if p in (0, 1) else -p * mpmath.log(p, 2) - (1 - p) * mpmath.log(1 - p, 2)

    qm, em = gain(mu)
    qn, en = gain(nu)
    y1 = mu / (mu * nu - nu ** 2) * (qn * mpmath.exp(nu) - qm * mpmath.exp(mu) * nu ** 2 / mu ** 2
                                     - (mu ** 2 - nu ** 2) / mu ** 2 * y0)
    y1 = max(y1, 0)
    if y1 == 0:
        return 0.0
    e1 = min(max((en * qn * mpmath.exp(nu) - e0 * y0) / (y1 * nu), 0), mpmath.mpf("0.5"))
    r = q * (y1 * mu * mpmath.exp(-mu) * (1 - h2(e1)) - f * qm * h2(em))
    return float(max(r, 0))


@pytest.mark.parametrize("eta,y0,e_opt", [(1e-1, 0, 0.01), (1.45e-4, 4e-6, 0.016),
                                          (1e-3, 1e-6, 0.02), (1.2e-4, 4e-6, 0.0119)])
def test_secret_key_rate_matches_oracle(eta, y0, e_opt):
    p = ProtocolParams(e_opt=e_opt, y0=y0)
    assert secret_key_rate(p, eta).rate == pytest.approx(oracle_rate(0.6, 0.5, eta, y0, e_opt),
                                                         rel=1e-9, abs=1e-15)


def test_gain_and_qber_limits():
    p = ProtocolParams(y0=3e-6, e_opt=0.02)
    g = gain_and_qber(0.0, 0.1, p)
    assert g.gain == pytest.approx(3e-6)
    assert g.qber == pytest.approx(0.5)
    g = gain_and_qber(0.7, 0.01, ProtocolParams(y0=0, e_opt=0))
    assert g.qber == 0
    arr = gain_and_qber(np.array([0.1, 0.6]), 1e-3, p)
    assert arr.gain.shape == (2,)
    with pytest.raises(ValueError):
        gain_and_qber(0.5, 1.5, p)


def test_yield_bounds_noiseless_close_to_eta():
    p = ProtocolParams(y0=0.0, e_opt=0.0)
    for eta in (1e-3, 1e-4, 1e-5):
        y1, e1, unbounded = yield_bounds(gain_and_qber(0.6, eta, p), gain_and_qber(0.5, eta, p),
                                         0.6, 0.5, 0.0)
        assert not unbounded
        assert y1 <= eta * (1 + 1e-9)
        # the two-intensity bound is loose; compare with its closed form at high precision
        m, n, e = mpmath.mpf("0.6"), mpmath.mpf("0.5"), mpmath.mpf(eta)
        ref = m / (m * n - n ** 2) * ((1 - mpmath.exp(-e * n)) * mpmath.exp(n)
                                      - (1 - mpmath.exp(-e * m)) * mpmath.exp(m) * n ** 2 / m ** 2)
        assert y1 == pytest.approx(float(ref), rel=1e-9)
        assert 0.5 * eta < y1
        assert e1 == 0


def test_yield_bounds_domain():
    g = GainQber(1e-4, 0.02)
    with pytest.raises(ValueError):
        yield_bounds(g, g, 0.5, 0.5, 0.0)
    with pytest.raises(ValueError):
        ProtocolParams(mu_signal=0.5, mu_decoy=0.6)


def test_unbounded_error_gives_zero_rate():
    p = ProtocolParams(y0=0.5, e_opt=0.016)
    r = secret_key_rate(p, 1e-6)
    assert r.e1_unbounded or r.e1_upper >= 0.5 or r.rate == 0
    assert r.rate == 0.0
    assert secret_key_rate(ProtocolParams(y0=1e-6), 0.0).rate == 0.0


def test_noiseless_rate_bounded_by_sifted_gain():
    p = ProtocolParams(y0=0.0, e_opt=0.0)
    r = secret_key_rate(p, 1e-4)
    assert 0 < r.rate <= p.sifting * r.signal.gain


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-7, 1.0), st.floats(0, 1e-4), st.floats(0, 0.1))
def test_rate_never_exceeds_sifted_gain(eta, y0, e_opt):
    p = ProtocolParams(y0=y0, e_opt=e_opt)
    r = secret_key_rate(p, eta)
    assert 0 <= r.rate <= p.sifting * r.signal.gain
    assert r.y1_lower <= 1 and 0 <= r.e1_upper <= 0.5


def test_background_yield():
    assert background_yield(2000, 1e9) == pytest.approx(4e-6)
    with pytest.raises(ValueError):
        background_yield(-1, 1e9)


def test_zero_distance_value_is_direct_evaluation():
    p = ProtocolParams(y0=4e-6, e_opt=0.0119)
    det = DetectorParams(efficiency=1.0)
    curve = sweep_distance(p, ChannelParams(), det, 0, 0, 1)
    assert curve.rates[0] == pytest.approx(oracle_rate(0.6, 0.5, 1.0, 4e-6, 0.0119), rel=1e-9)


def test_sweep_lossless_channel_is_flat():
    p = ProtocolParams(y0=1e-6)
    curve = sweep_distance(p, ChannelParams(attenuation=0.0), DetectorParams(), 0, 100, 10)
    assert np.ptp(curve.rates) == 0 and curve.rates[0] > 0


def test_sweep_validation_and_csv():
    p = ProtocolParams(y0=4e-6)
    with pytest.raises(ValueError):
        sweep_distance(p, ChannelParams(), DetectorParams(), 10, 5, 1)
    with pytest.raises(ValueError):
        sweep_distance(p, ChannelParams(), DetectorParams(), 0, 5, 0)
    curve = sweep_distance(p, ChannelParams(), DetectorParams(), 0, 10, 5)
    text = curve.to_csv()
    assert text.splitlines()[0] == SKR_CSV_HEADER
    assert len(text.splitlines()) == 4
    buf = io.StringIO()
    curve.to_csv(buf)
    assert buf.getvalue() == text


def test_sweep_zero_crossing_matches_bisection_root(calibrated_config):
    cfg = calibrated_config
    args = (cfg.protocol(), cfg.channel(), cfg.detector())
    curve = sweep_distance(*args, 0, 300, 1.0, cfg.receiver_efficiency)
    fine = zero_crossing(*args, cfg.receiver_efficiency, 0, 1000, tol=1e-6)
    assert abs(curve.zero_crossing - fine) <= 1.0
    assert np.all(np.diff(curve.rates) <= 0)


def test_sweep_parallel_identical(calibrated_config):
    cfg = calibrated_config
    args = (cfg.protocol(), cfg.channel(), cfg.detector(), 100, 240, 5, cfg.receiver_efficiency)
    assert sweep_distance(*args, n_jobs=1).to_csv() == sweep_distance(*args, n_jobs=2).to_csv()


def test_optimize_flux_table_and_errors():
    p = ProtocolParams(y0=4e-6)
    ranking = optimize_flux([0.4, 0.5, 0.6, 1.0], p, 1.4e-4)
    assert len(ranking.table) == 6
    rates = [r for _, _, r in ranking.table]
    assert rates == sorted(rates, reverse=True)
    assert ranking.rate(*ranking.best) == max(rates)
    with pytest.raises(ValueError):
        optimize_flux([0.5], p, 1e-3)
    with pytest.raises(ValueError):
        optimize_flux([0.5, 0.5], p, 1e-3)


def test_simulate_gates_limits():
    p = ProtocolParams(y0=1e-3)
    t = simulate_gates(p, 1.0, 200_000, seed=1, mu=20.0)
    assert t.gain == pytest.approx(1.0, abs=1e-6)
    t = simulate_gates(p, 0.3, 2_000_000, seed=2, mu=0.0)
    assert abs(t.gain - 1e-3) < 3 * t.gain_se


def test_simulate_gates_agrees_with_analytic():
    p = ProtocolParams(y0=4e-6, e_opt=0.016)
    eta = 0.02
    t = simulate_gates(p, eta, 20_000_000, seed=5)
    g = gain_and_qber(0.6, eta, p)
    assert abs(t.gain - g.gain) < 3 * t.gain_se
    assert abs(t.qber - g.qber) < 3 * t.qber_se
    y1, se = t.photon_yield(1)
    assert abs(y1 - (eta + p.y0 - eta * p.y0)) < 3 * se


def test_simulate_gates_independent_of_jobs():
    p = ProtocolParams(y0=4e-6)
    a = simulate_gates(p, 0.01, 3_000_000, seed=9, chunk_size=500_000, n_jobs=1)
    b = simulate_gates(p, 0.01, 3_000_000, seed=9, chunk_size=500_000, n_jobs=3)
    assert a.clicks == b.clicks and a.errors == b.errors
    np.testing.assert_array_equal(a.photon_clicks, b.photon_clicks)


def test_estimator_api(calibrated_config):
    cfg = calibrated_config
    p = cfg.protocol()
    model = DecoyKeyRateModel(e_opt=p.e_opt, y0=p.y0, receiver_efficiency=cfg.receiver_efficiency)
    params = model.get_params()
    assert params["e_opt"] == p.e_opt
    twin = clone(model).set_params(mu_decoy=0.4)
    assert twin.get_params()["mu_decoy"] == 0.4
    pred = model.fit().predict(np.array([[0.0], [224.0], [300.0]]))
    eta = link_eta(cfg.channel(), 224.0, cfg.detector(), cfg.receiver_efficiency)
    assert pred[1] == pytest.approx(secret_key_rate(p, eta).rate)
    assert pred[2] == 0.0
    assert model.zero_crossing() == pytest.approx(233.19, abs=0.01)


def test_rate_continuity_in_eta():
    p = ProtocolParams(y0=4e-6, e_opt=0.0119)
    etas = np.geomspace(1e-3, 1e-1, 200)
    r = np.array([secret_key_rate(p, e).rate for e in etas])
    assert np.all(np.abs(np.diff(r)) < 0.05 * r.max())
    assert math.isclose(secret_key_rate(replace(p, y0=0.0), 0.0).rate, 0.0)
