import numpy as np
import pytest

from purcellkit import mcsim
from purcellkit.photophysics import RateModel, equilibrium_population, g2_bin_average, g2_params, saturation_power


@pytest.fixture(scope="module")
def slow_model():
    """MHz-scale rates so that second-long acquisitions stay small."""
    return RateModel(sigma=10.0, d=0.0, e=0.0, k23_0=0.0, k21=1.0, k31=1.0)


@pytest.fixture(scope="module")
def fast_model():
    return RateModel(sigma=1000.0, d=10.0, e=19.41, k23_0=24.1, k21=1700.0, k31=1e3 / 150.0)


def cw(model, P, duration, **kw):
    return mcsim.simulate(mcsim.SimConfig(model, mcsim.CW(P), duration, **kw))


def test_same_seed_same_stream(fast_model):
    a = cw(fast_model, 1.0, 1e-3, seed=5)
    b = cw(fast_model, 1.0, 1e-3, seed=5)
    c = cw(fast_model, 1.0, 1e-3, seed=6)
    assert a.digest() == b.digest()
    assert a.meta == b.meta
    assert a.digest() != c.digest()


def test_cw_rate_and_occupancy_match_steady_state(fast_model):
    P = 0.5
    s = cw(fast_model, P, 5e-3, seed=1)
    n2 = equilibrium_population(fast_model, P)
    expected = n2 * fast_model.k21 * 1e6 * 5e-3
    assert len(s) == pytest.approx(expected, rel=5 * expected**-0.5 * 3)
    assert s.meta["occupancy"][1] == pytest.approx(n2, rel=0.02)
    assert sum(s.meta["occupancy"]) == pytest.approx(1.0, rel=1e-9)
    assert np.all(np.diff(s.times) >= 0)
    assert s.times.min() >= 0 and s.times.max() < s.duration


def test_efficiency_and_qe_thin_detections(fast_model):
    full = cw(fast_model, 0.5, 2e-3, seed=2)
    half = cw(fast_model, 0.5, 2e-3, seed=2, efficiency=0.5)
    assert len(half) == pytest.approx(0.5 * len(full), rel=0.02)
    dim = RateModel(1000.0, 10.0, 19.41, 24.1, 1700.0, 1e3 / 150.0, gamma_r=170.0)
    assert len(cw(dim, 0.5, 2e-3, seed=2)) == pytest.approx(0.1 * len(full), rel=0.05)


def test_split_routes_channels(fast_model):
    s = cw(fast_model, 0.5, 1e-3, seed=3, split=1.0)
    assert np.all(s.channels == 0)
    s = cw(fast_model, 0.5, 1e-3, seed=3, split=0.3)
    assert np.mean(s.channels == 0) == pytest.approx(0.3, abs=0.01)


def test_dead_time_enforced(fast_model):
    s = cw(fast_model, 2.0, 1e-3, seed=4, dead_time=20.0)
    for c in (0, 1):
        assert np.diff(s.channel(c)).min() >= 20.0


def test_blinking_keeps_on_fraction(slow_model):
    blink = mcsim.Blinking(on_rate=200.0, off_rate=200.0)
    ref = cw(slow_model, 0.1, 0.5, seed=8)
    s = cw(slow_model, 0.1, 0.5, seed=8, blinking=blink)
    assert len(s) / len(ref) == pytest.approx(0.5, abs=0.1)
    assert s.meta["blinking"]["switches"] > 50


def test_pulsed_window_count_and_tcspc_decay(fast_model):
    ex = mcsim.Pulsed(power=20.0, rep_rate=20.0, pulse_width=50.0)
    s = mcsim.simulate(mcsim.SimConfig(fast_model, ex, 2e-3, seed=9))
    assert s.meta["pulses"] == 40_000
    edges, h = mcsim.tcspc_histogram(s, bins=400, width=0.05, start=0.2)
    centers = 0.5 * (edges[:-1] + edges[1:])
    sel = (centers > 0.2) & (h > 20)
    slope = np.polyfit(centers[sel], np.log(h[sel]), 1, w=np.sqrt(h[sel]))[0]
    assert -1 / slope == pytest.approx(1e3 / (1700.0 + 24.1), rel=0.03)


def test_pulsed_g2_zero_single_emitter_and_background(fast_model):
    ex = mcsim.Pulsed(power=20.0, rep_rate=20.0, pulse_width=50.0)
    clean = mcsim.simulate(mcsim.SimConfig(fast_model, ex, 0.2, seed=10))
    g = mcsim.pulsed_g2_zero(clean)
    assert g.g2_zero < 0.05
    noisy = mcsim.simulate(mcsim.SimConfig(fast_model, ex, 0.2, seed=10, background_rate=3e6))
    assert mcsim.pulsed_g2_zero(noisy).g2_zero > g.g2_zero + 0.1


def test_hbt_uncorrelated_background_is_flat():
    dark = RateModel(sigma=0.0, d=0.0, e=0.0, k23_0=0.0, k21=1.0, k31=1.0)
    s = mcsim.simulate(mcsim.SimConfig(dark, mcsim.CW(0.0), 0.5, dark_rate=5e5, seed=11))
    est = mcsim.hbt_correlate(s, bin_width=2.0, max_lag=100.0, n_blocks=20)
    z = (est.g2 - 1.0) / est.err
    assert abs(z.mean()) < 0.5
    assert np.mean(z**2) == pytest.approx(1.0, abs=0.3)


def test_hbt_poisson_and_jackknife_share_estimate(fast_model):
    s = cw(fast_model, saturation_power(fast_model), 2e-3, seed=12)
    a = mcsim.hbt_correlate(s, bin_width=1.0, max_lag=50.0, errors="poisson")
    b = mcsim.hbt_correlate(s, bin_width=1.0, max_lag=50.0, errors="jackknife", n_blocks=10)
    np.testing.assert_allclose(a.g2, b.g2, rtol=1e-12)
    assert b.replicates.shape == (10, a.g2.size)
    assert a.replicates is None


def test_start_state_and_validation(fast_model):
    s = cw(fast_model, 1.0, 1e-6, seed=1, start_state="3")
    assert s.meta["excitations"] >= 0
    with pytest.raises(ValueError):
        mcsim.SimConfig(fast_model, mcsim.CW(1.0), 1.0, start_state="4")
    with pytest.raises(ValueError):
        mcsim.Pulsed(power=1.0, rep_rate=1e4, pulse_width=200.0)
    with pytest.raises(ValueError):
        mcsim.tcspc_histogram(cw(fast_model, 1.0, 1e-5, seed=1))


@pytest.mark.parametrize("fmt", ["binary", "csv"])
def test_timestamp_round_trip(tmp_path, fast_model, fmt):
    s = cw(fast_model, 1.0, 2e-5, seed=13)
    path = mcsim.write_timestamps(tmp_path / f"t.{fmt}", s, fmt=fmt, manifest="abc")
    back = mcsim.read_timestamps(path)
    np.testing.assert_array_equal(back.times, s.times)
    np.testing.assert_array_equal(back.channels, s.channels)
    assert back.meta["seed"] == 13


def test_intensity_trace_counts_everything(slow_model):
    s = cw(slow_model, 0.1, 0.05, seed=14)
    t, c = mcsim.intensity_trace(s, bin_s=0.01)
    assert t.size == 5 and c.sum() == len(s)


def test_g2_analytic_shape_at_high_power(fast_model):
    P = 10 * saturation_power(fast_model)
    gp = g2_params(fast_model, P)
    duration = 2e6 / (equilibrium_population(fast_model, P) * 1700.0 * 1e6)
    s = cw(fast_model, P, duration, seed=15)
    est = mcsim.hbt_correlate(s, bin_width=0.05, max_lag=5.0, n_blocks=20)
    truth = g2_bin_average(gp, est.edges[:-1], est.edges[1:])
    assert np.mean(np.abs(est.g2 - truth) < 3 * est.err) >= 0.97
    assert est.g2.max() == pytest.approx(truth.max(), rel=0.05)
