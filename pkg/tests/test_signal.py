import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fatigue_forge.errors import AlignmentError, ValidationError
from fatigue_forge.signal import (
    FEATURE_NAMES,
    BeatTrain,
    TimeSeries,
    biquad_filter,
    build_dataset,
    detect_beats,
    instantaneous_rate,
    moving_average,
    perclos,
    tick_grid,
    windowed_stat,
)
from fatigue_forge.synth import SynthSpec, gen_subject

from oracles import biquad_gain


def ts(values, rate=1.0, t0=0.0, name="x"):
    return TimeSeries(name, rate, t0, np.asarray(values, dtype=float))


def fitted_amplitude(y, f, rate):
    t = np.arange(y.size) / rate
    basis = np.column_stack([np.sin(2 * np.pi * f * t), np.cos(2 * np.pi * f * t), np.ones_like(t)])
    coef = np.linalg.lstsq(basis, y, rcond=None)[0]
    return math.hypot(coef[0], coef[1])


# --- biquad -------------------------------------------------------------------


@pytest.mark.parametrize("kind,expected", [("low_pass", 3.7), ("high_pass", 0.0)])
def test_biquad_dc_gain(kind, expected):
    rate, cutoff = 250.0, 5.0
    out = biquad_filter(ts(np.full(5000, 3.7), rate), kind, cutoff)
    settled = out.values[int(10 / cutoff * rate):]
    assert np.max(np.abs(settled - expected)) <= 1e-6


@pytest.mark.parametrize("kind", ["low_pass", "high_pass"])
@pytest.mark.parametrize("rel", [0.3, 1.0, 2.5])
def test_biquad_amplitude_matches_closed_form(kind, rel):
    rate, cutoff = 250.0, 10.0
    f = rel * cutoff
    t = np.arange(int(20 * rate)) / rate
    out = biquad_filter(ts(np.sin(2 * np.pi * f * t), rate), kind, cutoff).values
    measured = fitted_amplitude(out[len(out) // 2:], f, rate)
    assert measured == pytest.approx(biquad_gain(kind, f, cutoff, rate, 1 / math.sqrt(2)), abs=1e-3)


def test_biquad_amplitude_at_cutoff():
    rate, cutoff = 250.0, 10.0
    t = np.arange(int(20 * rate)) / rate
    out = biquad_filter(ts(np.sin(2 * np.pi * cutoff * t), rate), "low_pass", cutoff).values
    assert fitted_amplitude(out[len(out) // 2:], cutoff, rate) == pytest.approx(0.7071, abs=0.02)


@pytest.mark.parametrize("cutoff", [125.0, 200.0, 0.0])
def test_biquad_rejects_cutoff_outside_band(cutoff):
    with pytest.raises(ValidationError):
        biquad_filter(ts(np.zeros(10), 250.0), "low_pass", cutoff)


@given(
    a=st.floats(-5, 5),
    b=st.floats(-5, 5),
    seed=st.integers(0, 2**32 - 1),
    kind=st.sampled_from(["low_pass", "high_pass"]),
)
def test_biquad_is_linear(a, b, seed, kind):
    r = np.random.default_rng(seed)
    s1, s2 = r.normal(size=300), r.normal(size=300)
    lhs = biquad_filter(ts(a * s1 + b * s2, 100.0), kind, 7.0).values
    rhs = a * biquad_filter(ts(s1, 100.0), kind, 7.0).values + b * biquad_filter(ts(s2, 100.0), kind, 7.0).values
    assert np.max(np.abs(lhs - rhs)) <= 1e-9


# --- moving average -------------------------------------------------------------


def test_moving_average_forced_arithmetic():
    out = moving_average(ts([0, 2, 4], rate=1.0), 2.0)
    assert out.values.tolist() == [0.0, 1.0, 3.0]


def test_moving_average_constant():
    assert np.all(moving_average(ts(np.full(50, 2.5), 16.0), 0.5).values == 2.5)


def test_moving_average_variance_reduction(rng):
    x = rng.normal(size=10_000)
    out = moving_average(ts(x, 16.0), 1.0).values[16:]
    ratio = out.var() / (x.var() / 16)
    assert 0.8 <= ratio <= 1.2


# --- beats --------------------------------------------------------------------


def impulse_ecg(times, rate=250.0, duration=None):
    duration = duration if duration is not None else times[-1] + 1.0
    x = np.zeros(int(round(duration * rate)))
    x[np.round(np.asarray(times) * rate).astype(int)] = 1.0
    return ts(x, rate, name="ecg")


def test_beats_at_one_hz():
    times = np.arange(1.0, 120.0)
    beats = detect_beats(impulse_ecg(times, duration=121.0))
    np.testing.assert_allclose(beats.beat_times_s, times, atol=1e-9)
    assert np.allclose(60.0 / beats.intervals_s, 60.0)
    assert beats.warnings == ()


def test_beats_alternating_rr_sdnn():
    rr = np.tile([0.9, 1.1], 60)
    times = 1.0 + np.concatenate(([0.0], np.cumsum(rr)))
    beats = detect_beats(impulse_ecg(times))
    rr_ms = beats.intervals_s * 1000
    assert np.sqrt(np.mean((rr_ms - rr_ms.mean()) ** 2)) == pytest.approx(100.0, abs=1e-6)


def test_flat_ecg_is_degenerate():
    beats = detect_beats(ts(np.zeros(250 * 120), 250.0, name="ecg"))
    assert beats.beat_times_s.size == 0
    assert beats.warnings and "degenerate" in beats.warnings[0]


def test_detect_beats_needs_100hz():
    with pytest.raises(ValidationError):
        detect_beats(ts(np.zeros(100), 50.0))


def test_beat_train_must_increase():
    with pytest.raises(ValidationError):
        BeatTrain(np.array([1.0, 1.0]), (0.0, 2.0))


# --- windowed statistics --------------------------------------------------------


def regular_train(rate_bpm, duration=180.0):
    times = np.arange(0.5, duration, 60.0 / rate_bpm)
    return BeatTrain(times, (0.0, duration))


def test_constant_heart_rate():
    train = regular_train(60.0)
    assert np.allclose(windowed_stat(train, "mean").values, 60.0)
    assert np.allclose(windowed_stat(train, "std").values, 0.0, atol=1e-9)


def test_breathing_rate_ramp():
    # rate climbs linearly from 10 to 20 per minute across 60 s
    t, times = 0.0, []
    while t < 60.0:
        times.append(t)
        t += 60.0 / (10.0 + 10.0 * t / 60.0)
    train = BeatTrain(np.array(times), (0.0, 60.0))
    rates = 60.0 / np.diff(times)
    value = windowed_stat(train, "mean", ticks=np.array([60.0]), start_s=0.0).values[0]
    assert value == pytest.approx(rates.mean(), rel=1e-12)
    assert value == pytest.approx(15.0, abs=0.5)


def test_alternating_rates_std():
    rr = np.tile([60 / 12, 60 / 18], 20)
    times = np.concatenate(([0.0], np.cumsum(rr)))
    train = BeatTrain(times, (0.0, times[-1]))
    tick = np.array([times[-1] + 0.01])
    value = windowed_stat(train, "std", window_s=times[-1] + 1.0, ticks=tick, start_s=0.0).values[0]
    assert value == pytest.approx(3.0, abs=1e-9)


def test_constant_series_window_stats():
    s = ts(np.full(16 * 200, 4.25), 16.0)
    assert np.all(windowed_stat(s, "mean").values == 4.25)
    assert np.all(windowed_stat(s, "std").values == 0.0)


def test_empty_window_carries_and_flags():
    times = np.concatenate((np.arange(0.0, 60.0, 1.0), np.arange(200.0, 260.0, 1.0)))
    train = BeatTrain(times, (0.0, 260.0))
    out, flags = windowed_stat(train, "mean", return_flags=True)
    gap = (out.times > 121.0) & (out.times <= 200.0)
    assert flags[gap].all()
    assert np.allclose(out.values[gap], 60.0)
    assert not flags[out.times < 60.0].any()


def test_warmup_repeats_first_valid_value():
    train = regular_train(75.0, 120.0)
    out = windowed_stat(train, "mean", min_span_s=5.0)
    assert np.all(out.values[:5] == out.values[4])


def test_instantaneous_rate_tracks_last_interval():
    times = np.array([0.0, 1.0, 1.5, 2.5, 3.0, 10.0])
    train = BeatTrain(times, (0.0, 12.0))
    out = instantaneous_rate(train, np.arange(1.0, 13.0), start_s=0.0, min_span_s=0.0).values
    # tick 1 sees nothing closed yet, so it back-fills from tick 2
    expected = [120.0, 120.0, 60.0, 120.0, 120.0, 120.0, 120.0, 120.0, 120.0, 120.0, 60 / 7, 60 / 7]
    np.testing.assert_allclose(out, expected)


def test_unknown_statistic():
    with pytest.raises(ValidationError):
        windowed_stat(ts(np.ones(10)), "median")


# --- PERCLOS ------------------------------------------------------------------


def occlusion(values):
    return TimeSeries("occlusion", 60.0, 0.0, np.asarray(values, dtype=float))


def test_perclos_always_closed():
    assert np.all(perclos(occlusion(np.full(60 * 120, 100.0))).values == 100.0)


def test_perclos_threshold_is_strict():
    assert np.all(perclos(occlusion(np.full(60 * 120, 80.0))).values == 0.0)


def test_perclos_half_closed():
    x = np.concatenate((np.full(60 * 30, 90.0), np.full(60 * 30, 0.0)))
    assert perclos(occlusion(x)).values[-1] == 50.0


def test_perclos_rejects_out_of_range():
    with pytest.raises(ValidationError):
        perclos(occlusion([50.0, 101.0]))


@given(st.lists(st.floats(0, 100), min_size=60, max_size=600), st.integers(0, 599))
def test_perclos_range_and_monotone(values, flip):
    x = np.asarray(values)
    base = perclos(occlusion(x), ticks=np.array([x.size / 60.0]), start_s=0.0, min_span_s=0.0).values
    assert 0.0 <= base[0] <= 100.0
    closed = x.copy()
    closed[flip % x.size] = 100.0
    more = perclos(occlusion(closed), ticks=np.array([x.size / 60.0]), start_s=0.0, min_span_s=0.0).values
    assert more[0] >= base[0]


# --- dataset assembly ---------------------------------------------------------


@pytest.fixture(scope="module")
def short_subject():
    return gen_subject(SynthSpec(seed=11, duration_s=130, subjects=1), 0)


def test_tick_grid():
    assert tick_grid(0.0, 3.0).tolist() == [1.0, 2.0, 3.0]


def test_row_count_and_names(short_subject):
    channels = {k: v for k, v in short_subject.all_channels().items()}
    cut = {k: TimeSeries(v.name, v.rate_hz, v.t0_s, v.values[: int(120 * v.rate_hz)]) for k, v in channels.items()}
    ds = build_dataset(cut)
    # ticks 1..120; ticks 1..4 fall inside the 5 s warm-up
    assert ds.n == 116
    assert ds.n_dropped == 4
    assert ds.feature_names == FEATURE_NAMES
    assert FEATURE_NAMES[:5] == ("heart_rate_variability", "hr_avg60", "br_avg60", "br_std60", "hr_std60")
    assert np.all(np.diff(ds.timestamps_s) == 1.0)


def test_hr_avg60_recomputed_independently(short_subject):
    from fatigue_forge.signal import SignalConfig, preprocess

    ds = build_dataset(short_subject.all_channels())
    beats = detect_beats(preprocess(short_subject.channels, SignalConfig())["ecg"])
    ref = windowed_stat(beats, "mean", ticks=ds.timestamps_s, start_s=0.0).values
    assert np.max(np.abs(ds.X[:, 1] - ref)) <= 1e-9


def test_build_dataset_deterministic(short_subject):
    a = build_dataset(short_subject.all_channels())
    b = build_dataset(short_subject.all_channels())
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()


def test_no_common_span(short_subject):
    channels = dict(short_subject.all_channels())
    occ = channels["occlusion"]
    channels["occlusion"] = TimeSeries("occlusion", occ.rate_hz, 1000.0, occ.values)
    with pytest.raises(AlignmentError):
        build_dataset(channels)


def test_missing_channel(short_subject):
    channels = dict(short_subject.all_channels())
    del channels["swa"]
    with pytest.raises(ValidationError, match="swa"):
        build_dataset(channels)


def test_timeseries_validation():
    with pytest.raises(ValidationError):
        ts([1.0, np.nan])
    with pytest.raises(ValidationError):
        TimeSeries("x", 0.0, 0.0, np.ones(3))
    with pytest.raises(ValidationError):
        ts([])
