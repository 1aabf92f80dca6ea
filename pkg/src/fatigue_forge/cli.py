"""``fatigue-forge`` command line.

Each subcommand wraps one library operation and writes that module's file
format, plus ``<output>.manifest.json`` recording inputs, seeds, versions
and wall time. Settings come from module defaults, then ``--config`` (a
``key=value`` file), then flags.

Exit codes: 0 success, 1 invalid input or arguments, 2 file-system error.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numba
import numpy as np
import scipy

from . import __version__, gbt, io, shap, signal, synth
from . import eval as ev
from .errors import ValidationError

THREADS_ENV = "FATIGUE_FORGE_THREADS"


class InputMissing(OSError):
    """An input path named by a flag does not exist."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


# --- arguments ----------------------------------------------------------------


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _add_train_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--max-depth", type=int, default=10)
    g.add_argument("--eta", type=float, default=0.1, help="learning rate")
    g.add_argument("--rounds", type=int, default=150, help="number of trees")
    g.add_argument("--lambda", dest="reg_lambda", type=float, default=1.0, help="L2 leaf penalty")
    g.add_argument("--alpha", type=float, default=1.0, help="L1 leaf penalty")
    g.add_argument("--gamma", type=float, default=0.0, help="minimum split gain")
    g.add_argument("--subsample", type=float, default=0.9)
    g.add_argument("--colsample", type=float, default=0.9)
    g.add_argument("--min-child-weight", type=float, default=1.0)


def _train_config(args, seed) -> gbt.TrainConfig:
    return gbt.TrainConfig(
        max_depth=args.max_depth,
        learning_rate=args.eta,
        n_estimators=args.rounds,
        reg_lambda=args.reg_lambda,
        reg_alpha=args.alpha,
        gamma=args.gamma,
        subsample=args.subsample,
        colsample=args.colsample,
        min_child_weight=args.min_child_weight,
        seed=seed,
    )


def _add_cv_flags(p):
    p.add_argument("--k", type=int, default=10, help="number of folds")
    p.add_argument("--grouping", choices=ev.GROUPINGS, default="row")
    p.add_argument("--r2-convention", choices=ev.R2_CONVENTIONS, default="paper")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fatigue-forge", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text, stochastic=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="key=value settings file; flags override it")
        p.add_argument("--threads", type=_positive_int, default=None,
                       help=f"worker threads (default: ${THREADS_ENV} or 1)")
        if stochastic:
            p.add_argument("--seed", type=int, default=None, help="required")
        return p

    p = command("synth", "generate synthetic subjects", stochastic=True)
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--duration", type=int, default=3600, help="seconds per subject")
    p.add_argument("--noise-ecg", type=float, default=synth.NoiseLevels.ecg)
    p.add_argument("--noise-breathing", type=float, default=synth.NoiseLevels.breathing)
    p.add_argument("--noise-perclos", type=float, default=synth.NoiseLevels.perclos)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = command("featurize", "raw channels to a 1 Hz dataset CSV")
    p.add_argument("--input", type=Path, nargs="+", required=True,
                   help="manifest.json files or directories holding them")
    p.add_argument("--out", type=Path, required=True)

    p = command("train", "fit a boosted tree model", stochastic=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--features", default=None, help="comma-separated subset, in order")
    p.add_argument("--out", type=Path, required=True)
    _add_train_flags(p)

    p = command("predict", "predict PERCLOS for a dataset")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = command("evaluate", "k-fold cross-validation with out-of-fold SHAP", stochastic=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="report JSON")
    p.add_argument("--explanations-out", type=Path, default=None, help="out-of-fold SHAP CSV")
    p.add_argument("--explain-rows", type=int, default=None, help="cap on explained rows per fold")
    p.add_argument("--baselines", action="store_true", help="also run OLS, single tree and random forest")
    p.add_argument("--forest-trees", type=int, default=100)
    _add_cv_flags(p)
    _add_train_flags(p)

    p = command("explain", "per-row SHAP values and force records")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--rows", default=None, help="comma-separated row indices (default: all)")
    p.add_argument("--out", type=Path, required=True, help="explanations CSV")
    p.add_argument("--force-row", type=int, default=None, help="also write a force record for this row")
    p.add_argument("--force-out", type=Path, default=None)

    p = command("importance", "global importance from an explanations CSV")
    p.add_argument("--explanations", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = command("dependence", "dependence data for one feature")
    p.add_argument("--explanations", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--feature", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", type=Path, required=True, help="output prefix")

    p = command("ablate", "forward feature-addition curve", stochastic=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ranking", type=Path, required=True, help="importance CSV")
    p.add_argument("--out", type=Path, required=True, help="curve CSV")
    _add_cv_flags(p)
    _add_train_flags(p)
    return parser


def _read_config(path: Path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}: line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("_", "-")] = value
    return out


def _apply_config(parser, argv, args):
    """Re-parse with config-file values inserted ahead of the explicit flags."""
    settings = _read_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {
        opt[2:]: action
        for action in sub._actions
        for opt in action.option_strings
        if opt.startswith("--")
    }
    injected = []
    for key, value in settings.items():
        if key in ("config", "help") or key not in known:
            raise ValidationError(f"{args.config}: unknown setting {key!r} for {args.command}")
        action = known[key]
        if action.nargs == 0:
            if value.lower() in ("1", "true", "yes", "on"):
                injected.append(f"--{key}")
            elif value.lower() not in ("0", "false", "no", "off"):
                raise ValidationError(f"{args.config}: setting {key!r} expects true or false")
        else:
            injected.extend([f"--{key}", *value.split()])
    return parser.parse_args([args.command, *injected, *argv[1:]])


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env is None or env == "":
        return 1
    try:
        value = int(env)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be a positive integer, got {env!r}") from None
    if value < 1:
        raise ValidationError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
    return value


def _require_seed(args) -> int:
    if getattr(args, "seed", None) is None:
        raise ValidationError(f"{args.command}: --seed is required")
    return args.seed


def _check_inputs(args):
    for flag in ("data", "model", "explanations", "ranking", "config"):
        path = getattr(args, flag, None)
        if path is not None and not Path(path).exists():
            raise InputMissing(f"--{flag}: no such file: {path}")
    for path in getattr(args, "input", None) or ():
        if not Path(path).exists():
            raise InputMissing(f"--input: no such file or directory: {path}")


# --- run manifest -------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _manifest_path(output: Path) -> Path:
    if output.is_dir():
        return output / "run_manifest.json"
    return output.with_name(output.name + ".manifest.json")


def _write_manifest(args, outputs, inputs, started, threads):
    settings = {
        k: (str(v) if isinstance(v, Path) else [str(x) for x in v] if isinstance(v, list) else v)
        for k, v in sorted(vars(args).items())
    }
    doc = {
        "command": args.command,
        "settings": settings,
        "seed": getattr(args, "seed", None),
        "threads": threads,
        "inputs": [{"path": str(p), "sha256": _sha256(p)} for p in inputs],
        "outputs": [str(p) for p in outputs],
        "versions": {
            "fatigue_forge": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
        },
        "wall_time_s": time.perf_counter() - started,
    }
    for output in outputs:
        io.write_json(_manifest_path(Path(output)), doc)


# --- commands -----------------------------------------------------------------


def _cmd_synth(args, threads):
    seed = _require_seed(args)
    spec = synth.SynthSpec(
        seed=seed,
        duration_s=args.duration,
        subjects=args.subjects,
        noise=synth.NoiseLevels(args.noise_ecg, args.noise_breathing, args.noise_perclos),
    )
    args.out.mkdir(parents=True, exist_ok=True)
    for i in range(spec.subjects):
        rec = synth.gen_subject(spec, i)
        label = synth.subject_label(i)
        folder = args.out / label
        io.write_channels(folder, rec.all_channels(), subject=label)
        io.write_truth(folder / "truth.csv", rec.latent.times, rec.latent.values, rec.planted.values)
    return [args.out], []


def _manifests(paths):
    found = []
    for path in paths:
        if path.is_dir():
            direct = path / "manifest.json"
            found.extend([direct] if direct.exists() else sorted(path.glob("*/manifest.json")))
        else:
            found.append(path)
    if not found:
        raise ValidationError("--input: no manifest.json found")
    return found


def _cmd_featurize(args, threads):
    manifests = _manifests(args.input)
    parts = []
    for manifest in manifests:
        channels, subject = io.read_channels(manifest)
        parts.append(signal.build_dataset(channels, subject=subject))
    io.write_dataset(args.out, signal.Dataset.concat(parts))
    inputs = [p for m in manifests for p in [m, *sorted(m.parent.glob("*.csv"))] if p.name != "truth.csv"]
    return [args.out], inputs


def _load_model(path):
    return gbt.load(Path(path).read_bytes())


def _cmd_train(args, threads):
    seed = _require_seed(args)
    data = io.read_dataset(args.data)
    if args.features:
        names = [s.strip() for s in args.features.split(",") if s.strip()]
        unknown = [s for s in names if s not in data.feature_names]
        if unknown:
            raise ValidationError(f"--features: unknown feature(s) {', '.join(unknown)}")
        data = data.select_features(names)
    model = gbt.train_dataset(data, _train_config(args, seed))
    args.out.write_bytes(gbt.save(model))
    return [args.out], [args.data]


def _dataset_for_model(model, data):
    missing = [f for f in model.feature_names if f not in data.feature_names]
    if missing:
        raise ValidationError(f"--data: dataset lacks model feature(s) {', '.join(missing)}")
    return data.select_features(model.feature_names)


def _cmd_predict(args, threads):
    model = _load_model(args.model)
    data = _dataset_for_model(model, io.read_dataset(args.data))
    pred = gbt.predict(model, data.X)
    lines = ["row,t_s,prediction"]
    lines += [f"{i},{io.fmt(t)},{io.fmt(p)}" for i, (t, p) in enumerate(zip(data.timestamps_s, pred))]
    args.out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return [args.out], [args.model, args.data]


def _cmd_evaluate(args, threads):
    seed = _require_seed(args)
    data = io.read_dataset(args.data)
    config = _train_config(args, seed)
    cv = dict(grouping=args.grouping, r2_convention=args.r2_convention)
    report = ev.kfold_cv(
        data, config, args.k, seed, explain=args.explanations_out is not None,
        explain_rows=args.explain_rows, threads=threads, **cv,
    )
    doc = report.to_dict()
    if args.baselines:
        ols = ev.ols_baseline(data, args.k, seed, **cv)
        single, forest = ev.tree_baselines(data, config, args.k, seed, n_trees=args.forest_trees, threads=threads, **cv)
        doc["baselines"] = {
            "ols": ols.to_dict(), "single_tree": single.to_dict(), "random_forest": forest.to_dict(),
        }
    io.write_report(args.out, doc)
    outputs = [args.out]
    if args.explanations_out is not None:
        rows = np.flatnonzero(report.explained)
        io.write_explanations(
            args.explanations_out, rows, report.prediction[rows], report.base_values[rows],
            report.phi[rows], data.feature_names,
        )
        outputs.append(args.explanations_out)
    return outputs, [args.data]


def _parse_rows(text, n):
    if text is None:
        return np.arange(n)
    try:
        rows = np.array([int(s) for s in text.split(",") if s.strip()], dtype=np.int64)
    except ValueError:
        raise ValidationError(f"--rows: expected comma-separated integers, got {text!r}") from None
    bad = rows[(rows < 0) | (rows >= n)]
    if bad.size:
        raise ValidationError(f"--rows: index {int(bad[0])} outside 0..{n - 1}")
    return rows


def _cmd_explain(args, threads):
    model = _load_model(args.model)
    data = _dataset_for_model(model, io.read_dataset(args.data))
    rows = _parse_rows(args.rows, data.n)
    phi, base = shap.tree_shap_values(model, data.X[rows], threads=threads)
    pred = gbt.predict(model, data.X[rows])
    io.write_explanations(args.out, rows, pred, base, phi, model.feature_names)
    outputs = [args.out]
    if (args.force_row is None) != (args.force_out is None):
        raise ValidationError("--force-row and --force-out must be given together")
    if args.force_row is not None:
        row = int(_parse_rows(str(args.force_row), data.n)[0])
        record = shap.explain_instance(model, data.X[row], row_index=row)
        io.write_json(args.force_out, record.to_dict())
        outputs.append(args.force_out)
    return outputs, [args.model, args.data]


def _cmd_importance(args, threads):
    names, table = io.read_explanations(args.explanations)
    ranking = shap.importance(table[:, 3:], names)
    io.write_importance(args.out, ranking)
    return [args.out], [args.explanations]


def _cmd_dependence(args, threads):
    names, table = io.read_explanations(args.explanations)
    if args.feature not in names:
        raise ValidationError(f"--feature: {args.feature!r} is not among {', '.join(names)}")
    data = io.read_dataset(args.data)
    missing = [f for f in names if f not in data.feature_names]
    if missing:
        raise ValidationError(f"--data: dataset lacks feature(s) {', '.join(missing)}")
    rows = table[:, 0].astype(np.int64)
    if rows.min() < 0 or rows.max() >= data.n or not np.all(table[:, 0] == rows):
        raise ValidationError("--explanations: row column does not index the dataset")
    X = data.select_features(names).X[rows]
    dep = shap.dependence(table[:, 3:], X, names.index(args.feature), args.bins, args.feature)
    points, bins = io.write_dependence(args.out, dep)
    return [points, bins], [args.explanations, args.data]


def _read_ranking(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "rank,feature,global_impact":
        raise ValidationError(f"{path}: header must be rank,feature,global_impact")
    return [line.split(",")[1] for line in lines[1:] if line.strip()]


def _cmd_ablate(args, threads):
    seed = _require_seed(args)
    data = io.read_dataset(args.data)
    curve = ev.forward_feature_curve(
        data, _read_ranking(args.ranking), _train_config(args, seed), args.k, seed,
        grouping=args.grouping, r2_convention=args.r2_convention, threads=threads,
    )
    io.write_curve(args.out, curve)
    return [args.out], [args.data, args.ranking]


COMMANDS = {
    "synth": _cmd_synth,
    "featurize": _cmd_featurize,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "evaluate": _cmd_evaluate,
    "explain": _cmd_explain,
    "importance": _cmd_importance,
    "dependence": _cmd_dependence,
    "ablate": _cmd_ablate,
}


def run(argv) -> None:
    """Parse and execute; raises instead of exiting."""
    argv = list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    _check_inputs(args)
    if args.config is not None:
        args = _apply_config(parser, argv[argv.index(args.command):], args)
    threads = _threads(args)
    started = time.perf_counter()
    outputs, inputs = COMMANDS[args.command](args, threads)
    _write_manifest(args, outputs, inputs, started, threads)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        run(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
