"""Command-line pipeline: synth, preprocess, train, eval, cv, predict, inspect.

One JSON document (--config) configures everything; --set SECTION.KEY=VALUE
overrides single keys and --seed overrides every seed at once. Progress
goes to stderr, machine-readable results to stdout or files, and nothing
is overwritten without --force.

Exit codes: 0 success, 1 invalid configuration or usage, 2 I/O or
dataset-level failure (including overwrite refusals), 3 checkpoint/config
mismatch.

Heavy imports happen inside handlers so VOLFORMER_THREADS can cap BLAS
thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IO = 2
EXIT_MISMATCH = 3

_THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _apply_thread_cap() -> None:
    cap = os.environ.get("VOLFORMER_THREADS")
    if cap:
        for var in _THREAD_ENV_VARS:
            os.environ.setdefault(var, cap)


@dataclasses.dataclass(frozen=True)
class SynthConfig:
    n_per_class: int = 10
    noise_sigma: float = 0.1
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class PreprocessConfig:
    normalize: str = "minmax"
    central_slices: int | None = None  # defaults to model.slices


@dataclasses.dataclass(frozen=True)
class PathsConfig:
    manifest: str = "manifest.jsonl"
    data_dir: str = "data"
    out_dir: str = "processed"
    checkpoint_dir: str = "checkpoints"
    report: str = "report.json"
    history: str = "history.jsonl"


@dataclasses.dataclass
class RunConfig:
    model: object
    train: object
    split: object
    synth: SynthConfig
    preprocess: PreprocessConfig
    paths: PathsConfig
    model_overridden: bool = False


def _sections():
    from .data import SplitSpec
    from .model import ModelConfig
    from .training import TrainConfig

    return {
        "model": ModelConfig,
        "train": TrainConfig,
        "split": SplitSpec,
        "synth": SynthConfig,
        "preprocess": PreprocessConfig,
        "paths": PathsConfig,
    }


def _config_help() -> str:
    lines = ["configuration keys (JSON document for --config; --set overrides):"]
    for section, cls in _sections().items():
        for f in dataclasses.fields(cls):
            lines.append(f"  {section}.{f.name} (default {f.default!r})")
    return "\n".join(lines)


def _parse_set_expr(expr: str) -> tuple[str, str, object]:
    from .errors import ConfigError

    key, sep, raw = expr.partition("=")
    if not sep:
        raise ConfigError(f"--set needs SECTION.KEY=VALUE, got '{expr}'")
    section, sep, name = key.partition(".")
    if not sep:
        raise ConfigError(f"--set key must be SECTION.KEY, got '{key}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, name, value


def load_run_config(config_path: str | None, set_exprs: list[str],
                    seed: int | None) -> RunConfig:
    from .errors import ConfigError

    sections = _sections()
    doc = {}
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{config_path}: invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{config_path}: top level must be a JSON object")
    unknown = set(doc) - set(sections)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")

    values: dict[str, dict] = {}
    for section, cls in sections.items():
        given = doc.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"config section '{section}' must be an object")
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(given) - known
        if bad:
            raise ConfigError(f"unknown key(s) in '{section}': {sorted(bad)}")
        values[section] = dict(given)

    model_overridden = "model" in doc and bool(doc["model"])
    for expr in set_exprs:
        section, name, value = _parse_set_expr(expr)
        if section not in sections:
            raise ConfigError(f"unknown config section '{section}'")
        known = {f.name for f in dataclasses.fields(sections[section])}
        if name not in known:
            raise ConfigError(f"unknown key '{name}' in section '{section}'")
        values[section][name] = value
        if section == "model":
            model_overridden = True

    if seed is not None:
        values["train"]["seed"] = seed
        values["split"]["seed"] = seed
        values["synth"]["seed"] = seed

    built = {}
    for section, cls in sections.items():
        try:
            built[section] = cls(**values[section])
        except TypeError as exc:
            raise ConfigError(f"bad value in section '{section}': {exc}") from exc
    return RunConfig(model=built["model"], train=built["train"], split=built["split"],
                     synth=built["synth"], preprocess=built["preprocess"],
                     paths=built["paths"], model_overridden=model_overridden)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _progress(args, message: str) -> None:
    if not args.quiet:
        print(message, file=sys.stderr)


def _refuse_existing(paths, force: bool) -> None:
    if force:
        return
    for p in paths:
        if os.path.exists(p):
            raise FileExistsError(f"refusing to overwrite '{p}'; pass --force")


def _refuse_nonempty_dir(path, force: bool) -> None:
    if force:
        return
    if os.path.isdir(path) and os.listdir(path):
        raise FileExistsError(f"refusing to write into non-empty '{path}'; pass --force")


def _class_names(n: int):
    from .data import DEFAULT_CLASS_NAMES

    return DEFAULT_CLASS_NAMES if n == len(DEFAULT_CLASS_NAMES) \
        else tuple(f"class{i}" for i in range(n))


def _save_manifest(manifest, path) -> None:
    """Write a manifest, rebasing entry paths relative to its location."""
    target_dir = os.path.dirname(os.path.abspath(path))
    rebased = []
    for e in manifest.entries:
        absolute = manifest.volume_path(e)
        rebased.append(dataclasses.replace(e, path=os.path.relpath(absolute, target_dir)))
    type(manifest)(entries=rebased, class_names=manifest.class_names,
                   base_dir=target_dir).save(path)


def _load_manifest(run: RunConfig):
    from .data import DatasetManifest

    return DatasetManifest.load(run.paths.manifest,
                                class_names=_class_names(run.model.num_classes))


def _default_checkpoint(run: RunConfig) -> str:
    return os.path.join(run.paths.checkpoint_dir, "model.vvck")


def _load_checkpoint_for(run: RunConfig, args):
    from .checkpoint import load_checkpoint

    path = args.checkpoint or _default_checkpoint(run)
    expect = run.model if run.model_overridden else None
    return load_checkpoint(path, expect_config=expect)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(run: RunConfig, args) -> int:
    from .data import gen_synthetic

    out_dir = run.paths.data_dir
    _refuse_nonempty_dir(out_dir, args.force)
    _refuse_existing([run.paths.manifest], args.force)
    extents = run.model.input_shape
    manifest = gen_synthetic(run.synth.n_per_class, extents, run.synth.seed,
                             out_dir, noise_sigma=run.synth.noise_sigma,
                             class_names=_class_names(run.model.num_classes))
    _save_manifest(manifest, run.paths.manifest)
    counts = {name: 0 for name in manifest.class_names}
    for e in manifest.entries:
        counts[manifest.class_names[e.label]] += 1
    _progress(args, f"wrote {len(manifest.entries)} volumes of shape {extents} to {out_dir}")
    print(json.dumps({"manifest": run.paths.manifest, "counts": counts}))
    return EXIT_OK


def cmd_preprocess(run: RunConfig, args) -> int:
    from .data import (normalize_intensity, resample_slices,
                       select_central_slices, write_volume)
    from .errors import DataError

    manifest = _load_manifest(run)
    if not manifest.entries:
        raise DataError(f"manifest '{run.paths.manifest}' is empty")
    out_dir = run.paths.out_dir
    _refuse_nonempty_dir(out_dir, args.force)
    os.makedirs(out_dir, exist_ok=True)
    k = run.preprocess.central_slices or run.model.slices
    processed, skipped = [], []
    for entry in manifest.entries:
        volume = manifest.load_volume(entry)
        try:
            volume = select_central_slices(volume, k)
        except DataError as exc:
            skipped.append(entry.path)
            _progress(args, f"skipping {entry.path}: {exc}")
            continue
        volume = resample_slices(volume, run.model.height, run.model.width)
        volume = normalize_intensity(volume, run.preprocess.normalize)
        filename = os.path.basename(entry.path)
        write_volume(volume, os.path.join(out_dir, filename))
        processed.append(dataclasses.replace(entry, path=filename))
    if not processed:
        raise DataError(f"all {len(skipped)} volumes failed preprocessing")
    out_manifest_path = os.path.join(out_dir, os.path.basename(run.paths.manifest))
    type(manifest)(entries=processed, class_names=manifest.class_names,
                   base_dir=os.path.abspath(out_dir)).save(out_manifest_path)
    _progress(args, f"processed {len(processed)} volumes, skipped {len(skipped)}")
    print(json.dumps({"manifest": out_manifest_path, "processed": len(processed),
                      "skipped": len(skipped)}))
    return EXIT_OK


def _split_manifest_if_needed(run: RunConfig, manifest, args):
    from .data import stratified_split
    from .errors import DataError

    tags = [e.split for e in manifest.entries]
    if all(t is None for t in tags):
        _progress(args, "manifest has no split tags; applying stratified split "
                        f"(seed {run.split.seed})")
        return stratified_split(manifest, run.split)
    if any(t is None for t in tags):
        raise DataError("manifest has partial split tags; clear or complete them")
    return manifest


def cmd_train(run: RunConfig, args) -> int:
    from .model import ModelParams
    from .rng import derive_seed
    from .training import train

    manifest = _split_manifest_if_needed(run, _load_manifest(run), args)
    train_vols = manifest.load_volumes(manifest.subset("train"))
    val_vols = manifest.load_volumes(manifest.subset("val"))
    checkpoint_path = _default_checkpoint(run)
    _refuse_existing([checkpoint_path, run.paths.history], args.force)
    os.makedirs(run.paths.checkpoint_dir, exist_ok=True)
    params = ModelParams.initialize(run.model, seed=derive_seed(run.train.seed, 0))
    _progress(args, f"training on {len(train_vols)} volumes, validating on "
                    f"{len(val_vols)} ({params.num_params()} parameters)")

    def on_epoch(row):
        marker = " *" if row["checkpointed"] else ""
        _progress(args, f"epoch {row['epoch']}/{run.train.epochs} "
                        f"train_loss={row['train_loss']:.6f} "
                        f"val_loss={row['val_loss']:.6f} "
                        f"val_acc={row['val_acc']:.4f}{marker}")

    result = train(params, run.model, train_vols, val_vols, run.train,
                   checkpoint_path=checkpoint_path, history_path=run.paths.history,
                   on_epoch=on_epoch)
    print(json.dumps({"checkpoint": checkpoint_path, "history": run.paths.history,
                      "monitor": run.train.monitor, "best_epoch": result.best_epoch,
                      "best_value": result.best_value}))
    return EXIT_OK


def _evaluate_entries(manifest, entries, params, config, batch_size):
    from .metrics import confusion
    from .model import predict_classes
    from .training import predict_probs

    volumes = manifest.load_volumes(entries)
    probs = predict_probs(params, config, volumes, batch_size)
    preds = predict_classes(probs)
    labels = [v.label for v in volumes]
    return confusion(labels, preds, num_classes=config.num_classes,
                     class_names=manifest.class_names)


def cmd_eval(run: RunConfig, args) -> int:
    from .errors import DataError
    from .metrics import report

    config, params = _load_checkpoint_for(run, args)
    manifest = _split_manifest_if_needed(run, _load_manifest(run), args)
    entries = manifest.subset(args.split)
    if not entries:
        raise DataError(f"manifest has no entries tagged '{args.split}'")
    cm = _evaluate_entries(manifest, entries, params, config, run.train.batch_size)
    rep = report([cm])
    _refuse_existing([run.paths.report], args.force)
    with open(run.paths.report, "w", encoding="utf-8") as fh:
        json.dump(rep.to_dict(), fh, indent=2)
        fh.write("\n")
    _progress(args, f"report written to {run.paths.report}")
    print(rep.render_text(), end="")
    return EXIT_OK


def cmd_cv(run: RunConfig, args) -> int:
    from .checkpoint import load_checkpoint
    from .data import carve_validation, make_folds
    from .metrics import report
    from .model import ModelParams
    from .rng import derive_seed
    from .training import train

    manifest = _load_manifest(run)
    k = run.split.folds
    stem, ext = os.path.splitext(run.paths.report)
    rep_indices = [run.split.repetition + r for r in range(args.repeats)]
    fold_report_paths = [
        f"{stem}_rep{rep}_fold{i}{ext or '.json'}"
        for rep in rep_indices for i in range(k)
    ]
    _refuse_existing([run.paths.report, *fold_report_paths], args.force)
    os.makedirs(run.paths.checkpoint_dir, exist_ok=True)

    inner_val_fraction = run.split.val_fraction / (
        run.split.train_fraction + run.split.val_fraction)
    matrices = []
    for r in range(args.repeats):
        rep = run.split.repetition + r
        folds = make_folds(manifest, k, seed=derive_seed(run.split.seed, rep))
        for i, fold in enumerate(folds):
            train_entries, val_entries = carve_validation(
                fold.train_val, inner_val_fraction,
                seed=derive_seed(run.split.seed, rep, i),
                num_classes=run.model.num_classes)
            params = ModelParams.initialize(
                run.model, seed=derive_seed(run.train.seed, rep, i))
            ckpt = os.path.join(run.paths.checkpoint_dir, f"cv_rep{rep}_fold{i}.vvck")
            if not args.force and os.path.exists(ckpt):
                raise FileExistsError(f"refusing to overwrite '{ckpt}'; pass --force")
            train(params, run.model,
                  manifest.load_volumes(train_entries),
                  manifest.load_volumes(val_entries),
                  run.train, checkpoint_path=ckpt)
            _, best_params = load_checkpoint(ckpt)
            cm = _evaluate_entries(manifest, fold.test, best_params, run.model,
                                   run.train.batch_size)
            matrices.append(cm)
            fold_report = report([cm])
            path = fold_report_paths[r * k + i]
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(fold_report.to_dict(), fh, indent=2)
                fh.write("\n")
            _progress(args, f"repetition {rep} fold {i + 1}/{k}: "
                            f"test_acc={fold_report.accuracy_mean:.4f}")
    aggregate = report(matrices)
    with open(run.paths.report, "w", encoding="utf-8") as fh:
        json.dump(aggregate.to_dict(), fh, indent=2)
        fh.write("\n")
    _progress(args, f"aggregate report written to {run.paths.report}")
    print(aggregate.render_text(), end="")
    return EXIT_OK


def cmd_predict(run: RunConfig, args) -> int:
    from .data import read_volume
    from .model import predict_classes
    from .training import predict_probs

    config, params = _load_checkpoint_for(run, args)
    if args.volumes:
        volumes = [read_volume(p) for p in args.volumes]
        paths = list(args.volumes)
    else:
        manifest = _load_manifest(run)
        volumes = manifest.load_volumes()
        paths = [e.path for e in manifest.entries]
    names = _class_names(config.num_classes)
    probs = predict_probs(params, config, volumes, run.train.batch_size)
    preds = predict_classes(probs)
    if args.out:
        _refuse_existing([args.out], args.force)
    sink = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for path, row, pred in zip(paths, probs, preds):
            record = {"path": path, "probabilities": [float(p) for p in row],
                      "predicted": int(pred), "class_name": names[int(pred)]}
            sink.write(json.dumps(record) + "\n")
    finally:
        if args.out:
            sink.close()
    return EXIT_OK


def cmd_inspect(run: RunConfig, args) -> int:
    from .model import count_params, parameter_shapes

    if args.checkpoint:
        config, _ = _load_checkpoint_for(run, args)
    else:
        config = run.model
    total = 0
    for name, shape in parameter_shapes(config):
        size = 1
        for extent in shape:
            size *= extent
        total += size
        print(f"{name:<28} {'x'.join(str(s) for s in shape):>12} {size:>10}")
    closed_form = count_params(config)
    print(f"total trainable parameters: {closed_form}")
    if total != closed_form:
        print(f"warning: enumerated size {total} != closed form {closed_form}",
              file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map usage to exit 1
        from .errors import UsageError

        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=None,
                        help="JSON run configuration (see key listing below)")
    common.add_argument("--seed", type=int, default=None, metavar="N",
                        help="override train/split/synth seeds at once")
    common.add_argument("--force", action="store_true",
                        help="overwrite existing output files")
    common.add_argument("--quiet", action="store_true",
                        help="suppress progress output on stderr")
    common.add_argument("--set", action="append", default=[], dest="set_exprs",
                        metavar="SECTION.KEY=VALUE",
                        help="override one configuration key (repeatable)")

    parser = _Parser(
        prog="volformer",
        description="Volumetric scan classification pipeline.",
        epilog=_config_help() + "\n\nexit codes: 0 ok, 1 invalid input, "
               "2 I/O or dataset failure, 3 checkpoint/config mismatch.\n"
               "VOLFORMER_THREADS caps internal BLAS parallelism.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common],
                       help="generate a labeled synthetic VVOL dataset")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common],
                       help="central slices, resample, normalize per manifest")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common],
                       help="train with improvement-gated checkpointing")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", metavar="PATH", default=None)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", parents=[common],
                       help="repeated stratified k-fold cross-validation")
    p.add_argument("--repeats", type=int, default=1, metavar="R")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("predict", parents=[common],
                       help="per-volume class probabilities as JSON lines")
    p.add_argument("volumes", nargs="*", metavar="VOLUME.vvol",
                   help="volumes to classify (default: every manifest entry)")
    p.add_argument("--checkpoint", metavar="PATH", default=None)
    p.add_argument("--out", metavar="PATH", default=None,
                   help="write JSON lines here instead of stdout")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect", parents=[common],
                       help="parameter count and per-array shapes")
    p.add_argument("--checkpoint", metavar="PATH", default=None)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    from .errors import (CheckpointMismatchError, ConfigError, DataError,
                         DimensionError, FormatError, NumericError, UsageError)

    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        run = load_run_config(args.config, args.set_exprs, args.seed)
        return args.func(run, args)
    except CheckpointMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (DataError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, UsageError, DimensionError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
