"""Text formats for channels, datasets, explanations and reports.

Floats are written with 17 significant digits so that every value reads
back bit-identical.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParseError, ValidationError
from .signal import Dataset, TimeSeries

FLOAT_FMT = "%.17g"


def fmt(x: float) -> str:
    return FLOAT_FMT % x


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def _json_safe(x):
    """NaN has no JSON spelling; undefined statistics are written as null."""
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    return x


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def _write_matrix(path, header: Sequence[str], columns: Sequence[np.ndarray]) -> None:
    data = np.column_stack([np.asarray(c, dtype=np.float64) for c in columns])
    buf = io.StringIO()
    np.savetxt(buf, data, fmt=FLOAT_FMT, delimiter=",", header=",".join(header), comments="")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _read_header(path) -> list[str]:
    with open(path, encoding="utf-8", newline="") as fh:
        line = fh.readline()
    if not line:
        raise ParseError(f"{path}: file is empty")
    return line.rstrip("\r\n").split(",")


def _read_matrix(path, header: Sequence[str]) -> np.ndarray:
    got = _read_header(path)
    if got != list(header):
        raise ParseError(f"{path}: header {','.join(got)!r} does not match {','.join(header)!r}")
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if data.shape[0] == 0:
        raise ParseError(f"{path}: no data rows")
    if data.shape[1] != len(header):
        raise ParseError(f"{path}: expected {len(header)} columns, found {data.shape[1]}")
    return data


# --- channels -----------------------------------------------------------------


def write_channel(path, series: TimeSeries) -> None:
    _write_matrix(path, ("t_s", "value"), (series.times, series.values))


def read_channel(path, name: str, rate_hz: float) -> TimeSeries:
    data = _read_matrix(path, ("t_s", "value"))
    t = data[:, 0]
    if t.size > 1:
        expected = t[0] + np.arange(t.size) / rate_hz
        if not np.allclose(t, expected, rtol=0, atol=0.5 / rate_hz):
            raise ParseError(f"{path}: t_s column is not uniformly sampled at {rate_hz} Hz")
    try:
        return TimeSeries(name, float(rate_hz), float(t[0]), data[:, 1])
    except ValidationError as exc:
        raise ParseError(f"{path}: {exc}") from None


def write_channels(directory, channels: dict[str, TimeSeries], subject: str | None = None) -> Path:
    """One CSV per channel plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(channels):
        series = channels[name]
        write_channel(directory / f"{name}.csv", series)
        entries.append({"name": name, "path": f"{name}.csv", "rate_hz": series.rate_hz})
    manifest = {"subject": subject, "channels": entries}
    write_json(directory / "manifest.json", manifest)
    return directory / "manifest.json"


def read_channels(manifest_path) -> tuple[dict[str, TimeSeries], str | None]:
    manifest_path = Path(manifest_path)
    doc = read_json(manifest_path)
    if not isinstance(doc, dict) or not isinstance(doc.get("channels"), list):
        raise ParseError(f"{manifest_path}: field 'channels' must be a list")
    out = {}
    for i, entry in enumerate(doc["channels"]):
        where = f"{manifest_path}: channels[{i}]"
        if not isinstance(entry, dict):
            raise ParseError(f"{where}: expected an object")
        for key in ("name", "path", "rate_hz"):
            if key not in entry:
                raise ParseError(f"{where}: missing field '{key}'")
        rate = entry["rate_hz"]
        if not isinstance(rate, (int, float)) or isinstance(rate, bool) or not rate > 0:
            raise ParseError(f"{where}: field 'rate_hz' must be a positive number")
        name = str(entry["name"])
        if name in out:
            raise ParseError(f"{where}: duplicate channel {name!r}")
        out[name] = read_channel(manifest_path.parent / entry["path"], name, float(rate))
    subject = doc.get("subject")
    return out, None if subject is None else str(subject)


def write_truth(path, t_s, latent, planted) -> None:
    _write_matrix(path, ("t_s", "latent", "planted_perclos"), (t_s, latent, planted))


def read_truth(path) -> np.ndarray:
    return _read_matrix(path, ("t_s", "latent", "planted_perclos"))


# --- datasets -----------------------------------------------------------------


def dataset_header(feature_names: Sequence[str]) -> list[str]:
    return ["t_s", "subject", *feature_names, "perclos"]


def write_dataset(path, dataset: Dataset) -> None:
    subjects = dataset.subject_id if dataset.subject_id is not None else [""] * dataset.n
    lines = [",".join(dataset_header(dataset.feature_names))]
    for i in range(dataset.n):
        fields = [fmt(dataset.timestamps_s[i]), str(subjects[i])]
        fields.extend(fmt(v) for v in dataset.X[i])
        fields.append(fmt(dataset.y[i]))
        lines.append(",".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path) -> Dataset:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: file is empty")
        if len(header) < 4 or header[:2] != ["t_s", "subject"] or header[-1] != "perclos":
            raise ParseError(f"{path}: header must be t_s,subject,<features...>,perclos")
        names = header[2:-1]
        t, subj, rows, y = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: line {lineno}: expected {len(header)} fields, found {len(row)}")
            try:
                t.append(float(row[0]))
                rows.append([float(v) for v in row[2:-1]])
                y.append(float(row[-1]))
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            subj.append(row[1])
    if not rows:
        raise ParseError(f"{path}: no data rows")
    y = np.asarray(y)
    if np.any((y < 0) | (y > 100)):
        raise ParseError(f"{path}: column 'perclos' must lie in [0, 100]")
    subjects = None if all(s == "" for s in subj) else np.asarray(subj)
    try:
        return Dataset(tuple(names), np.asarray(rows), y, np.asarray(t), subjects)
    except ValidationError as exc:
        raise ParseError(f"{path}: {exc}") from None


# --- explanations and reports ---------------------------------------------------


def write_explanations(path, rows, prediction, base, phi, feature_names) -> None:
    header = ["row", "prediction", "base", *(f"phi_{f}" for f in feature_names)]
    phi = np.atleast_2d(phi)
    base = np.broadcast_to(np.asarray(base, dtype=np.float64), (phi.shape[0],))
    _write_matrix(path, header, (rows, prediction, base, *phi.T))


def read_explanations(path) -> tuple[list[str], np.ndarray]:
    header = _read_header(path)
    if header[:3] != ["row", "prediction", "base"] or not all(h.startswith("phi_") for h in header[3:]):
        raise ParseError(f"{path}: header must be row,prediction,base,phi_<feature>...")
    return [h[4:] for h in header[3:]], _read_matrix(path, header)


def write_dependence(prefix, data) -> tuple[Path, Path]:
    """``<prefix>_points.csv`` and ``<prefix>_bins.csv``."""
    prefix = Path(prefix)
    points = prefix.with_name(prefix.name + "_points.csv")
    bins = prefix.with_name(prefix.name + "_bins.csv")
    _write_matrix(points, ("feature_value", "shap_value"), (data.feature_values, data.shap_values))
    _write_matrix(bins, ("bin_center", "mean_shap", "count"), (data.bin_centers, data.mean_shap, data.bin_counts))
    return points, bins


def write_importance(path, ranking) -> None:
    lines = ["rank,feature,global_impact"]
    for i, (name, impact) in enumerate(ranking, start=1):
        lines.append(f"{i},{name},{fmt(impact)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_curve(path, curve) -> None:
    lines = ["n_features,rmse_mean,rmse_std,mae_mean,mae_std,adjr2_mean,adjr2_std"]
    for p in curve:
        vals = [p.mean["rmse"], p.std["rmse"], p.mean["mae"], p.std["mae"], p.mean["adj_r2"], p.std["adj_r2"]]
        lines.append(",".join([str(p.n_features), *(fmt(v) for v in vals)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report(path, report_dict: dict) -> None:
    write_json(path, _json_safe(report_dict))
