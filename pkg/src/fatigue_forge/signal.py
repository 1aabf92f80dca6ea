"""Raw channel preprocessing and the 1 Hz feature matrix.

All windows are half-open ``[t - w, t)`` on a tick grid that starts one
second after the common start of the channels, so the tick at ``t`` owns
the samples recorded during the preceding second.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
from scipy import ndimage
from scipy import signal as sps

from .errors import AlignmentError, ValidationError

FEATURE_NAMES = (
    "heart_rate_variability",
    "hr_avg60",
    "br_avg60",
    "br_std60",
    "hr_std60",
    "heart_rate",
    "breathing",
    "ECG",
    "intertq",
    "swa",
    "posture",
)
WAVEFORM_CHANNELS = ("breathing", "ecg", "intertq", "swa", "posture")
CHANNEL_RATES_HZ = {
    "breathing": 16.0,
    "ecg": 250.0,
    "intertq": 200.0,
    "swa": 200.0,
    "posture": 1.0,
    "occlusion": 60.0,
}
CLOSED_OCCLUSION = 80.0
REFRACTORY_S = 0.3


@dataclass(frozen=True)
class TimeSeries:
    name: str
    rate_hz: float
    t0_s: float
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size < 1:
            raise ValidationError(f"{self.name}: values must be a non-empty 1-D sequence")
        if not self.rate_hz > 0:
            raise ValidationError(f"{self.name}: rate_hz must be positive, got {self.rate_hz}")
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"{self.name}: non-finite samples")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size

    @property
    def times(self) -> np.ndarray:
        return self.t0_s + np.arange(self.values.size) / self.rate_hz

    @property
    def t_end_s(self) -> float:
        """Exclusive end of the recording."""
        return self.t0_s + self.values.size / self.rate_hz

    def with_values(self, values) -> "TimeSeries":
        return TimeSeries(self.name, self.rate_hz, self.t0_s, values)


@dataclass(frozen=True)
class BeatTrain:
    """Detected event times (R-peaks or breath peaks) in seconds."""

    beat_times_s: np.ndarray
    span_s: tuple[float, float]
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        t = np.asarray(self.beat_times_s, dtype=np.float64)
        if t.ndim != 1:
            raise ValidationError("beat_times_s must be 1-D")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValidationError("beat_times_s must be strictly increasing")
        object.__setattr__(self, "beat_times_s", t)

    @property
    def intervals_s(self) -> np.ndarray:
        return np.diff(self.beat_times_s)


@dataclass(frozen=True)
class Dataset:
    feature_names: tuple[str, ...]
    X: np.ndarray
    y: np.ndarray
    timestamps_s: np.ndarray
    subject_id: np.ndarray | None = None
    n_dropped: int = 0

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise ValidationError(
                f"X has shape {X.shape} but {len(self.feature_names)} feature names were given"
            )
        if y.shape != (X.shape[0],):
            raise ValidationError("y must have one entry per row of X")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValidationError("dataset contains non-finite entries")
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "timestamps_s", np.asarray(self.timestamps_s, dtype=np.float64))
        if self.subject_id is not None:
            object.__setattr__(self, "subject_id", np.asarray(self.subject_id, dtype=str))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]

    def select_features(self, names: Iterable[str]) -> "Dataset":
        names = tuple(names)
        idx = [self.feature_names.index(name) for name in names]
        return Dataset(names, self.X[:, idx], self.y, self.timestamps_s, self.subject_id, self.n_dropped)

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        subjects = None if self.subject_id is None else self.subject_id[rows]
        return Dataset(self.feature_names, self.X[rows], self.y[rows], self.timestamps_s[rows], subjects)

    @classmethod
    def concat(cls, parts: list["Dataset"]) -> "Dataset":
        if not parts:
            raise ValidationError("nothing to concatenate")
        names = parts[0].feature_names
        if any(p.feature_names != names for p in parts):
            raise ValidationError("feature names differ between datasets")
        subjects = None
        if all(p.subject_id is not None for p in parts):
            subjects = np.concatenate([p.subject_id for p in parts])
        return cls(
            names,
            np.vstack([p.X for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.timestamps_s for p in parts]),
            subjects,
            sum(p.n_dropped for p in parts),
        )


@dataclass(frozen=True)
class SignalConfig:
    ecg_highpass_hz: float = 0.5
    ecg_lowpass_hz: float = 40.0
    breathing_ma_s: float = 0.5
    steering_lowpass_hz: float = 5.0
    posture_lowpass_hz: float = 0.4
    q: float = 1 / math.sqrt(2)
    window_s: float = 60.0
    min_span_s: float = 5.0
    beat_refractory_s: float = REFRACTORY_S
    beat_threshold: float = 0.6
    beat_window_s: float = 2.0
    breath_refractory_s: float = 1.2
    breath_window_s: float = 10.0


# --- filtering ---------------------------------------------------------------


def biquad_coefficients(kind: str, cutoff_hz: float, rate_hz: float, q: float):
    """Second-order section coefficients ``(b, a)`` with ``a[0] == 1``."""
    if not 0 < cutoff_hz < rate_hz / 2:
        raise ValidationError(
            f"cutoff {cutoff_hz} Hz must lie strictly between 0 and Nyquist ({rate_hz / 2} Hz)"
        )
    if not q > 0:
        raise ValidationError("q must be positive")
    w0 = 2 * math.pi * cutoff_hz / rate_hz
    cos_w0 = math.cos(w0)
    alpha = math.sin(w0) / (2 * q)
    if kind == "low_pass":
        b = np.array([(1 - cos_w0) / 2, 1 - cos_w0, (1 - cos_w0) / 2])
    elif kind == "high_pass":
        b = np.array([(1 + cos_w0) / 2, -(1 + cos_w0), (1 + cos_w0) / 2])
    else:
        raise ValidationError(f"unknown filter kind {kind!r}")
    a = np.array([1 + alpha, -2 * cos_w0, 1 - alpha])
    return b / a[0], a / a[0]


def biquad_filter(series: TimeSeries, kind: str, cutoff_hz: float, q: float = 1 / math.sqrt(2)) -> TimeSeries:
    """Apply one RBJ biquad section forward in time.

    The filter state starts at the steady state for a constant input equal
    to the first sample, which keeps the map linear in the input.
    """
    b, a = biquad_coefficients(kind, cutoff_hz, series.rate_hz, q)
    zi = sps.lfilter_zi(b, a) * series.values[0]
    out, _ = sps.lfilter(b, a, series.values, zi=zi)
    return series.with_values(out)


def moving_average(series: TimeSeries, window_s: float) -> TimeSeries:
    """Trailing mean over ``ceil(window_s * rate)`` samples.

    The first ``w - 1`` outputs average whatever samples exist so far.
    """
    if not window_s > 0:
        raise ValidationError("window_s must be positive")
    w = max(1, math.ceil(window_s * series.rate_hz - 1e-9))
    x = series.values
    # shifting by x[0] keeps constant inputs exact
    c = np.concatenate(([0.0], np.cumsum(x - x[0])))
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - w, 0)
    out = (c[idx] - c[lo]) / (idx - lo) + x[0]
    return series.with_values(out)


# --- event detection ----------------------------------------------------------


def detect_peaks(
    series: TimeSeries,
    refractory_s: float,
    threshold: float = 0.6,
    window_s: float = 2.0,
) -> BeatTrain:
    """Local maxima above ``threshold`` times a centred rolling maximum.

    Candidates closer than ``refractory_s`` keep the taller one. Peak times
    are refined by parabolic interpolation over the three surrounding samples.
    """
    x = series.values
    span = (series.t0_s, series.t_end_s)
    if x.size < 3:
        return BeatTrain(np.empty(0), span, ("too few samples for peak detection",))
    size = max(1, int(round(window_s * series.rate_hz)))
    rolling = ndimage.maximum_filter1d(x, size=size, mode="nearest")
    inner = np.arange(1, x.size - 1)
    is_peak = (x[inner] > x[inner - 1]) & (x[inner] >= x[inner + 1])
    is_peak &= (x[inner] >= threshold * rolling[inner]) & (rolling[inner] > 0)
    cand = inner[is_peak]

    y0, y1, y2 = x[cand - 1], x[cand], x[cand + 1]
    denom = y0 - 2 * y1 + y2
    with np.errstate(divide="ignore", invalid="ignore"):
        offset = np.where(denom != 0, 0.5 * (y0 - y2) / denom, 0.0)
    offset = np.clip(offset, -0.5, 0.5)
    times = series.t0_s + (cand + offset) / series.rate_hz

    kept_t: list[float] = []
    kept_h: list[float] = []
    for t, h in zip(times.tolist(), y1.tolist()):
        if kept_t and t - kept_t[-1] < refractory_s:
            if h > kept_h[-1]:
                kept_t[-1], kept_h[-1] = t, h
            continue
        kept_t.append(t)
        kept_h.append(h)
    beats = np.asarray(kept_t)
    # a replacement can pull a peak closer to its predecessor
    while beats.size > 1 and np.any(np.diff(beats) < refractory_s):
        gaps = np.diff(beats)
        beats = np.delete(beats, int(np.argmin(gaps)) + 1)

    warnings = _sparse_span_warnings(beats, span)
    return BeatTrain(beats, span, warnings)


def _sparse_span_warnings(beats: np.ndarray, span: tuple[float, float], width: float = 60.0):
    start, end = span
    edges = np.arange(start, end, width)
    if edges.size == 0:
        edges = np.array([start])
    out = []
    for lo in edges:
        hi = min(lo + width, end)
        if hi - lo < width and lo != start:
            continue
        count = np.count_nonzero((beats >= lo) & (beats < hi))
        if count < 2:
            out.append(f"degenerate signal: {count} beat(s) in [{lo:g}, {hi:g}) s")
    return tuple(out)


def detect_beats(ecg: TimeSeries, config: SignalConfig = SignalConfig()) -> BeatTrain:
    """R-peak detection on an already filtered ECG."""
    if ecg.rate_hz < 100:
        raise ValidationError(f"ECG rate {ecg.rate_hz} Hz is below the 100 Hz minimum")
    return detect_peaks(ecg, config.beat_refractory_s, config.beat_threshold, config.beat_window_s)


def detect_breaths(breathing: TimeSeries, config: SignalConfig = SignalConfig()) -> BeatTrain:
    return detect_peaks(
        breathing, config.breath_refractory_s, config.beat_threshold, config.breath_window_s
    )


# --- 1 Hz windowing -----------------------------------------------------------


def tick_grid(start_s: float, end_s: float, grid_hz: float = 1.0) -> np.ndarray:
    count = math.floor((end_s - start_s) * grid_hz + 1e-9)
    return start_s + np.arange(1, count + 1) / grid_hz


def _sample_index(series: TimeSeries, t: np.ndarray) -> np.ndarray:
    """First sample index whose time is >= t."""
    pos = (np.asarray(t, dtype=np.float64) - series.t0_s) * series.rate_hz
    near = np.round(pos)
    pos = np.where(np.abs(pos - near) < 1e-6, near, pos)
    return np.clip(np.ceil(pos), 0, len(series)).astype(np.int64)


def _fill_warmup(values: np.ndarray, valid: np.ndarray, carried: np.ndarray):
    """Forward-carry after the first valid tick; back-fill before it."""
    out = values.copy()
    flags = np.zeros(values.size, dtype=bool)
    good = np.flatnonzero(valid)
    if good.size == 0:
        out[:] = np.nan
        return out, flags
    first = good[0]
    out[:first] = values[first]
    last = values[first]
    for i in range(first, values.size):
        if valid[i]:
            last = values[i]
        else:
            out[i] = last
            flags[i] = carried[i]
    return out, flags


def windowed_stat(
    source: TimeSeries | BeatTrain,
    stat: str,
    window_s: float = 60.0,
    grid_hz: float = 1.0,
    *,
    quantity: str = "rate",
    ticks: np.ndarray | None = None,
    start_s: float | None = None,
    min_span_s: float = 5.0,
    return_flags: bool = False,
):
    """Trailing-window statistic sampled on a tick grid.

    ``stat`` is ``mean``, ``std`` (population) or, for event trains only,
    ``count`` (events per minute). For a :class:`BeatTrain` each interval
    is assigned to the window containing its closing event and converted to
    ``60 / RR`` (``quantity="rate"``) or to milliseconds
    (``quantity="interval_ms"``).

    Ticks less than ``min_span_s`` after the start repeat the first valid
    value. Later ticks with an empty window carry the previous value and are
    flagged when ``return_flags`` is set.
    """
    if stat not in ("mean", "std", "count"):
        raise ValidationError(f"unknown statistic {stat!r}")
    is_train = isinstance(source, BeatTrain)
    if stat == "count" and not is_train:
        raise ValidationError("count is only defined for event trains")
    if start_s is None:
        start_s = source.span_s[0] if is_train else source.t0_s
    if ticks is None:
        end = source.span_s[1] if is_train else source.t_end_s
        ticks = tick_grid(start_s, end, grid_hz)
    ticks = np.asarray(ticks, dtype=np.float64)
    lo_t = np.maximum(ticks - window_s, start_s)

    if is_train:
        beats = source.beat_times_s
        if stat == "count":
            lo = np.searchsorted(beats, lo_t, side="left")
            hi = np.searchsorted(beats, ticks, side="left")
            values = (hi - lo) * 60.0 / np.maximum(ticks - lo_t, 1e-12)
            nonempty = np.ones(ticks.size, dtype=bool)
        else:
            rr = np.diff(beats)
            if quantity == "rate":
                q = 60.0 / rr
            elif quantity == "interval_ms":
                q = rr * 1000.0
            else:
                raise ValidationError(f"unknown quantity {quantity!r}")
            ends = beats[1:]
            lo = np.searchsorted(ends, lo_t, side="left")
            hi = np.searchsorted(ends, ticks, side="left")
            values, nonempty = _slice_stats(q, lo, hi, stat)
    else:
        lo = _sample_index(source, lo_t)
        hi = _sample_index(source, ticks)
        values, nonempty = _slice_stats(source.values, lo, hi, stat)

    in_warmup = ticks - start_s < min_span_s - 1e-9
    valid = nonempty & ~in_warmup
    out, flags = _fill_warmup(values, valid, ~nonempty & ~in_warmup)
    ts = _grid_series(f"{stat}{int(window_s)}", grid_hz, float(ticks[0]), out)
    return (ts, flags) if return_flags else ts


def instantaneous_rate(
    train: BeatTrain,
    ticks: np.ndarray,
    *,
    start_s: float | None = None,
    window_s: float = 60.0,
    min_span_s: float = 5.0,
) -> TimeSeries:
    """``60 / RR`` of the latest interval closed before each tick.

    An interval older than ``window_s`` counts as missing and the previous
    value is carried, as for an empty window in :func:`windowed_stat`.
    """
    beats = train.beat_times_s
    ticks = np.asarray(ticks, dtype=np.float64)
    if start_s is None:
        start_s = train.span_s[0]
    values = np.full(ticks.size, np.nan)
    if beats.size >= 2:
        ends = beats[1:]
        rate = 60.0 / np.diff(beats)
        last = np.searchsorted(ends, ticks, side="left") - 1
        ok = (last >= 0) & (ends[np.maximum(last, 0)] >= ticks - window_s)
        values[ok] = rate[last[ok]]
    in_warmup = ticks - start_s < min_span_s - 1e-9
    valid = np.isfinite(values) & ~in_warmup
    out, _ = _fill_warmup(values, valid, np.zeros(ticks.size, dtype=bool))
    return _grid_series("heart_rate", 1.0, float(ticks[0]), out)


def _grid_series(name, rate, t0, values):
    """Like ``TimeSeries`` but tolerates NaN for sources with no valid window."""
    if np.all(np.isfinite(values)):
        return TimeSeries(name, rate, t0, values)
    ts = object.__new__(TimeSeries)
    object.__setattr__(ts, "name", name)
    object.__setattr__(ts, "rate_hz", rate)
    object.__setattr__(ts, "t0_s", t0)
    object.__setattr__(ts, "values", values)
    return ts


def _slice_stats(q: np.ndarray, lo: np.ndarray, hi: np.ndarray, stat: str):
    values = np.full(lo.size, np.nan)
    # a spread needs two values; one sample would report a spurious zero
    nonempty = hi - lo >= (2 if stat == "std" else 1)
    for i in np.flatnonzero(nonempty):
        chunk = q[lo[i] : hi[i]]
        mean = chunk.mean()
        values[i] = mean if stat == "mean" else np.sqrt(np.mean((chunk - mean) ** 2))
    return values, nonempty


def perclos(
    occlusion: TimeSeries,
    window_s: float = 60.0,
    grid_hz: float = 1.0,
    *,
    ticks: np.ndarray | None = None,
    start_s: float | None = None,
    min_span_s: float = 5.0,
) -> TimeSeries:
    """Percent of samples with occlusion strictly above 80 in the trailing window."""
    x = occlusion.values
    if np.any(x < 0) or np.any(x > 100):
        raise ValidationError("occlusion values must lie in [0, 100]")
    if start_s is None:
        start_s = occlusion.t0_s
    if ticks is None:
        ticks = tick_grid(start_s, occlusion.t_end_s, grid_hz)
    ticks = np.asarray(ticks, dtype=np.float64)
    closed = np.concatenate(([0], np.cumsum(x > CLOSED_OCCLUSION)))
    lo = _sample_index(occlusion, np.maximum(ticks - window_s, start_s))
    hi = _sample_index(occlusion, ticks)
    total = hi - lo
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.where(total > 0, 100.0 * (closed[hi] - closed[lo]) / total, np.nan)
    valid = (total > 0) & (ticks - start_s >= min_span_s - 1e-9)
    out, _ = _fill_warmup(values, valid, np.zeros(ticks.size, dtype=bool))
    return _grid_series("perclos", grid_hz, float(ticks[0]), out)


def second_means(series: TimeSeries, ticks: np.ndarray) -> np.ndarray:
    """Mean of the samples in ``[t - 1, t)`` for each tick; NaN if none."""
    x = series.values
    c = np.concatenate(([0.0], np.cumsum(x - x[0])))
    lo = _sample_index(series, ticks - 1.0)
    hi = _sample_index(series, ticks)
    count = hi - lo
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(count > 0, (c[hi] - c[lo]) / count + x[0], np.nan)


# --- dataset assembly ---------------------------------------------------------


def _as_mapping(channels) -> dict[str, TimeSeries]:
    if isinstance(channels, Mapping):
        return {k.lower(): v for k, v in channels.items()}
    return {ch.name.lower(): ch for ch in channels}


def common_span(channels: Iterable[TimeSeries]) -> tuple[float, float]:
    channels = list(channels)
    start = max(ch.t0_s for ch in channels)
    end = min(ch.t_end_s for ch in channels)
    if end - start < 1.0:
        raise AlignmentError(
            "channels have no common time span of at least one second "
            f"(latest start {start:g} s, earliest end {end:g} s)"
        )
    return start, end


def preprocess(channels, config: SignalConfig = SignalConfig()) -> dict[str, TimeSeries]:
    """Filter every waveform channel with its configured preprocessing."""
    ch = _as_mapping(channels)
    out = dict(ch)
    if "ecg" in ch:
        ecg = biquad_filter(ch["ecg"], "high_pass", config.ecg_highpass_hz, config.q)
        out["ecg"] = biquad_filter(ecg, "low_pass", config.ecg_lowpass_hz, config.q)
    if "breathing" in ch:
        out["breathing"] = moving_average(ch["breathing"], config.breathing_ma_s)
    for name in ("intertq", "swa"):
        if name in ch:
            out[name] = biquad_filter(ch[name], "low_pass", config.steering_lowpass_hz, config.q)
    if "posture" in ch:
        out["posture"] = biquad_filter(ch["posture"], "low_pass", config.posture_lowpass_hz, config.q)
    return out


def compute_features(
    filtered: Mapping[str, TimeSeries],
    beats: BeatTrain,
    breaths: BeatTrain,
    ticks: np.ndarray,
    start_s: float,
    config: SignalConfig = SignalConfig(),
) -> np.ndarray:
    """Feature matrix (ticks x 11) in ``FEATURE_NAMES`` order, warm-up included."""
    kw = dict(window_s=config.window_s, ticks=ticks, start_s=start_s, min_span_s=config.min_span_s)
    cols = [
        windowed_stat(beats, "std", quantity="interval_ms", **kw).values,
        windowed_stat(beats, "mean", **kw).values,
        windowed_stat(breaths, "mean", **kw).values,
        windowed_stat(breaths, "std", **kw).values,
        windowed_stat(beats, "std", **kw).values,
        instantaneous_rate(beats, ticks, start_s=start_s, window_s=config.window_s,
                           min_span_s=config.min_span_s).values,
    ]
    for name in WAVEFORM_CHANNELS:
        cols.append(second_means(filtered[name], ticks))
    return np.column_stack(cols)


def build_dataset(
    channels,
    beats: BeatTrain | None = None,
    *,
    config: SignalConfig = SignalConfig(),
    subject: str | None = None,
) -> Dataset:
    """Featurize one recording onto its 1 Hz grid.

    ``channels`` must provide breathing, ecg, intertq, swa, posture and
    occlusion. Beats are detected from the filtered ECG unless given.
    Warm-up ticks and rows with any non-finite entry are dropped and counted
    in ``Dataset.n_dropped``.
    """
    ch = _as_mapping(channels)
    missing = [name for name in (*WAVEFORM_CHANNELS, "occlusion") if name not in ch]
    if missing:
        raise ValidationError(f"missing channel(s): {', '.join(missing)}")
    start, end = common_span(ch.values())
    ticks = tick_grid(start, end)
    filtered = preprocess(ch, config)
    if beats is None:
        beats = detect_beats(filtered["ecg"], config)
    breaths = detect_breaths(filtered["breathing"], config)

    X = compute_features(filtered, beats, breaths, ticks, start, config)
    y = perclos(ch["occlusion"], config.window_s, ticks=ticks, start_s=start, min_span_s=config.min_span_s).values
    keep = ticks - start >= config.min_span_s - 1e-9
    keep &= np.all(np.isfinite(X), axis=1) & np.isfinite(y)
    subjects = None if subject is None else np.full(int(keep.sum()), subject)
    return Dataset(FEATURE_NAMES, X[keep], y[keep], ticks[keep], subjects, int((~keep).sum()))
