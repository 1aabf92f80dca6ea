"""Synthetic subjects with a planted fatigue function.

Each subject gets a mean-reverting latent fatigue trace and independent
slow drivers for heart rate, RR variability, breathing rate and breathing
variability, each partly pulled by fatigue. Raw channels are rendered from
those drivers, the signal pipeline recovers the features, and the occlusion
stream is then built so its trailing-60 s closed fraction tracks
``planted_effect`` of the recovered features.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage, optimize, sparse
from scipy import signal as sps

from .signal import (
    CHANNEL_RATES_HZ,
    FEATURE_NAMES,
    SignalConfig,
    TimeSeries,
    build_dataset,
    compute_features,
    detect_beats,
    detect_breaths,
    preprocess,
    tick_grid,
    Dataset,
)
from .errors import ValidationError

PLANTED_FEATURES = FEATURE_NAMES[:5]
NUISANCE_FEATURES = FEATURE_NAMES[5:]


@dataclass(frozen=True)
class EffectParams:
    hr_slope: float = 1.0
    hr_low: float = 50.0
    hr_high: float = 85.0
    hrv_vertex_ms: float = 50.0
    hrv_slope: float = 0.35
    br_threshold: float = 15.0
    br_high: float = 22.0
    br_slope: float = 2.0
    brstd_knee: float = 0.8
    brstd_slope: float = 15.0
    hrstd_vertex: float = 2.0
    hrstd_slope: float = 1.0
    offset: float = 0.0


@dataclass(frozen=True)
class NoiseLevels:
    ecg: float = 0.02
    breathing: float = 0.01
    perclos: float = 1.0

    def __post_init__(self):
        if min(self.ecg, self.breathing, self.perclos) < 0:
            raise ValidationError("noise levels must be >= 0")


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    duration_s: int = 3600
    subjects: int = 20
    noise: NoiseLevels = field(default_factory=NoiseLevels)
    effects: EffectParams = field(default_factory=EffectParams)

    def __post_init__(self):
        if self.duration_s <= 120:
            raise ValidationError("duration_s must exceed 120")
        if self.subjects < 1:
            raise ValidationError("subjects must be >= 1")

    def noiseless(self) -> "SynthSpec":
        return replace(self, noise=NoiseLevels(0.0, 0.0, 0.0))


@dataclass(frozen=True)
class SubjectRecording:
    channels: dict[str, TimeSeries]
    occlusion: TimeSeries
    latent: TimeSeries
    planted: TimeSeries
    true_beats_s: np.ndarray

    def all_channels(self) -> dict[str, TimeSeries]:
        return {**self.channels, "occlusion": self.occlusion}


# --- planted ground truth -----------------------------------------------------


def shape_values(features, params: EffectParams = EffectParams()) -> np.ndarray:
    """Per-feature contributions (rows x 5) of the five planted shapes."""
    F = np.atleast_2d(np.asarray(features, dtype=np.float64))
    hrv, hr, br, brstd, hrstd = (F[:, j] for j in range(5))
    p = params
    return np.column_stack(
        [
            p.hrv_slope * np.abs(hrv - p.hrv_vertex_ms),
            p.hr_slope * (p.hr_high - np.clip(hr, p.hr_low, p.hr_high)),
            p.br_slope * (p.br_high - np.clip(br, p.br_threshold, p.br_high)),
            p.brstd_slope * np.maximum(p.brstd_knee - brstd, 0.0),
            p.hrstd_slope * np.abs(hrstd - p.hrstd_vertex),
        ]
    )


def planted_effect(features, params: EffectParams = EffectParams()):
    """Latent PERCLOS for feature rows in ``FEATURE_NAMES`` order.

    Only the first five features enter; the other six have no effect.
    Returns a float for a single row and an array otherwise.
    """
    arr = np.asarray(features, dtype=np.float64)
    out = np.clip(params.offset + shape_values(arr, params).sum(axis=1), 0.0, 100.0)
    return float(out[0]) if arr.ndim == 1 else out


# --- generators ---------------------------------------------------------------


def _ou(rng: np.random.Generator, n: int, tau: float) -> np.ndarray:
    """Unit-variance AR(1) path with correlation time ``tau`` samples."""
    a = np.exp(-1.0 / tau)
    eps = rng.standard_normal(n)
    x0 = rng.standard_normal()
    out, _ = sps.lfilter([np.sqrt(1 - a * a)], [1.0, -a], eps, zi=[a * x0])
    return out


def _smooth_walk(rng: np.random.Generator, n: int, tau: float, sigma: float = 60.0) -> np.ndarray:
    """Gaussian-smoothed AR(1) path rescaled to unit standard deviation."""
    x = ndimage.gaussian_filter1d(_ou(rng, n, tau), sigma, mode="nearest")
    return (x - x.mean()) / x.std()


def _drivers(rng: np.random.Generator, duration: int):
    n = duration + 2
    fatigue = 0.5 * (1 + np.tanh(1.2 * _smooth_walk(rng, n, 900.0)))
    zs = 2 * fatigue - 1
    u = [np.tanh(_smooth_walk(rng, n, 600.0)) for _ in range(4)]
    hr_off = rng.normal(0.0, 3.0)
    br_off = rng.normal(0.0, 1.0)
    hr = np.clip(67 - 8 * zs + 10 * u[0] + hr_off, 45, 95)
    sdnn = np.clip(60 + 25 * zs + 40 * u[1], 12, 140)
    br = np.clip(15 - 2.5 * zs + 4.5 * u[2] + br_off, 7, 26)
    brstd = np.clip(0.85 - 0.3 * zs + 0.55 * u[3], 0.1, 2.2)
    return fatigue, hr, sdnn, br, brstd


def _beat_times(rng, duration, hr, sdnn):
    t = rng.uniform(0.0, 0.8)
    out = []
    sign = 1.0
    while t < duration:
        out.append(t)
        sec = int(t)
        rr = 60.0 / hr[sec] + sign * sdnn[sec] / 1000.0 * rng.uniform(0.75, 1.25)
        sign = -sign
        t += min(max(rr, 0.35), 2.0)
    return np.asarray(out)


def _breath_times(rng, duration, br, brstd):
    t = rng.uniform(0.0, 3.0)
    out = [t]
    sign = 1.0
    while t < duration + 10:
        sec = min(int(t), br.size - 1)
        rate = br[sec] + sign * brstd[sec]
        sign = -sign
        t += 60.0 / max(rate, 4.0)
        out.append(t)
    return np.asarray(out)


def _ecg(rng, duration, beats, noise):
    fs = CHANNEL_RATES_HZ["ecg"]
    n = int(duration * fs)
    t = np.arange(n) / fs
    phase = rng.uniform(0, 2 * np.pi, 2)
    x = 0.3 * np.sin(2 * np.pi * 0.15 * t + phase[0]) + 0.1 * np.sin(2 * np.pi * 0.04 * t + phase[1])
    for center, width, amp, half in ((0.0, 0.012, 1.0, 12), (0.25, 0.04, 0.25, 40)):
        k = np.arange(-half, half + 1)
        pos = beats + center
        idx = np.round(pos * fs).astype(np.int64)[:, None] + k[None, :]
        vals = amp * np.exp(-0.5 * ((idx / fs - pos[:, None]) / width) ** 2)
        ok = (idx >= 0) & (idx < n)
        np.add.at(x, idx[ok], vals[ok])
    if noise > 0:
        x += noise * rng.standard_normal(n)
    return TimeSeries("ecg", fs, 0.0, x)


def _breathing(rng, duration, peaks, noise):
    fs = CHANNEL_RATES_HZ["breathing"]
    n = int(duration * fs)
    t = np.arange(n) / fs
    first = peaks[1] - peaks[0]
    knots = np.concatenate(([peaks[0] - first], peaks))
    cycles = np.arange(knots.size) - 1.0
    phase = 2 * np.pi * np.interp(t, knots, cycles)
    amp = 300.0 * (1 + 0.1 * np.sin(2 * np.pi * t / 97.0 + rng.uniform(0, 2 * np.pi)))
    x = amp * np.cos(phase)
    if noise > 0:
        x += noise * 300.0 * rng.standard_normal(n)
    return TimeSeries("breathing", fs, 0.0, x)


def _nuisance(rng, duration):
    fs = CHANNEL_RATES_HZ["intertq"]
    n = int(duration * fs)
    intertq = 0.4 * _ou(rng, n, 0.3 * fs)
    swa = 3.0 * _ou(rng, n, 0.8 * fs) + 0.5 * rng.standard_normal(n)
    posture = 10.0 + 2.0 * rng.standard_normal(int(duration * CHANNEL_RATES_HZ["posture"]))
    return {
        "intertq": TimeSeries("intertq", fs, 0.0, intertq),
        "swa": TimeSeries("swa", CHANNEL_RATES_HZ["swa"], 0.0, swa),
        "posture": TimeSeries("posture", CHANNEL_RATES_HZ["posture"], 0.0, posture),
    }


def _closed_counts(target: np.ndarray, per_second: int, window: int, smooth: float = 1e-2) -> np.ndarray:
    """Closed samples per second so trailing-window percentages track ``target``.

    Solves a bounded least-squares problem over the whole record with a small
    first-difference penalty, then rounds the cumulative sum so every window
    total is within one sample of the continuous solution.
    """
    n = target.size
    rows, cols, vals = [], [], []
    for lag in range(window):
        i = np.arange(lag, n)
        rows.append(i)
        cols.append(i - lag)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    span = np.minimum(np.arange(n) + 1, window)
    vals = 100.0 / (per_second * span[rows])
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    D = sparse.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n)) * np.sqrt(smooth)
    res = optimize.lsq_linear(
        sparse.vstack([A, D]).tocsr(), np.concatenate([target, np.zeros(n - 1)]),
        bounds=(0.0, float(per_second)), method="trf", tol=1e-10, lsmr_tol="auto",
    )
    cum = np.round(np.cumsum(np.clip(res.x, 0.0, per_second)))
    counts = np.diff(np.concatenate(([0.0], cum))).astype(np.int64)
    return np.clip(counts, 0, per_second)


def _occlusion(rng, target: np.ndarray, config: SignalConfig) -> TimeSeries:
    fs = int(CHANNEL_RATES_HZ["occlusion"])
    counts = _closed_counts(target, fs, int(config.window_s))
    within = np.arange(fs)[None, :]
    closed = within < counts[:, None]
    occ = np.where(closed, rng.uniform(85.0, 100.0, closed.shape), rng.uniform(0.0, 60.0, closed.shape))
    return TimeSeries("occlusion", float(fs), 0.0, occ.ravel())


def gen_subject(spec: SynthSpec, subject_index: int, config: SignalConfig = SignalConfig()) -> SubjectRecording:
    """Render one subject; a pure function of ``(spec, subject_index)``."""
    rng = np.random.default_rng([spec.seed, subject_index])
    duration = int(spec.duration_s)
    fatigue, hr, sdnn, br, brstd = _drivers(rng, duration)
    beats = _beat_times(rng, duration, hr, sdnn)
    breaths = _breath_times(rng, duration, br, brstd)
    channels = {
        "breathing": _breathing(rng, duration, breaths, spec.noise.breathing),
        "ecg": _ecg(rng, duration, beats, spec.noise.ecg),
        **_nuisance(rng, duration),
    }

    ticks = tick_grid(0.0, float(duration))
    filtered = preprocess(channels, config)
    X = compute_features(
        filtered, detect_beats(filtered["ecg"], config), detect_breaths(filtered["breathing"], config),
        ticks, 0.0, config,
    )
    planted = planted_effect(X, spec.effects)
    noise = rng.uniform(-spec.noise.perclos, spec.noise.perclos, planted.size) if spec.noise.perclos > 0 else 0.0
    target = np.clip(planted + noise, 0.0, 100.0)
    occlusion = _occlusion(rng, target, config)

    return SubjectRecording(
        channels=channels,
        occlusion=occlusion,
        latent=TimeSeries("latent", 1.0, ticks[0], fatigue[1 : duration + 1]),
        planted=TimeSeries("planted_perclos", 1.0, ticks[0], planted),
        true_beats_s=beats,
    )


def subject_label(index: int) -> str:
    return f"s{index:02d}"


def gen_dataset(spec: SynthSpec = SynthSpec(), config: SignalConfig = SignalConfig()) -> Dataset:
    """Featurized dataset over all subjects in ``spec``."""
    parts = []
    for i in range(spec.subjects):
        rec = gen_subject(spec, i, config)
        parts.append(build_dataset(rec.all_channels(), config=config, subject=subject_label(i)))
    return Dataset.concat(parts)
