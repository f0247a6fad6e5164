"""Command-line frontend: dataset synthesis, slicing, training, evaluation.

Exit codes: 0 success, 2 usage/config error, 3 numerical failure, 4 I/O.
All randomness flows from explicit --seed / config values; the
environment is never consulted.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, evaluation, network, training, voxel
from .mdr import compute_mdr, export_mdr_text, export_slice_pgm, slice_name, valid_slice_counts
from .training import ConfigError, TrainingError
from .voxel import DatasetError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _write_atomic(path: Path, data):
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, bytes):
        tmp.write_bytes(data)
    else:
        tmp.write_text(data, encoding="utf-8")
    tmp.rename(path)


def cmd_dataset_synth(args):
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    try:
        dataset = voxel.build_synthetic_dataset(classes, args.per_class, args.seed)
    except DatasetError as e:
        raise CliError(str(e), EXIT_USAGE)
    try:
        manifest = voxel.write_dataset(dataset, args.out)
    except OSError as e:
        raise CliError(f"cannot write dataset: {e}", EXIT_IO)
    n_train = sum(1 for p in dataset.split.values() if p == "train")
    print(f"wrote {len(dataset.shapes)} shapes ({n_train} train / "
          f"{len(dataset.shapes) - n_train} test) to {manifest}")


def cmd_mdr_export(args):
    try:
        grid = voxel.load_binvox(Path(args.infile).read_bytes())
    except OSError as e:
        raise CliError(f"cannot read {args.infile}: {e}", EXIT_IO)
    except voxel.BinvoxError as e:
        raise CliError(f"bad binvox file: {e}", EXIT_USAGE)
    if any(d % args.k for d in grid.dims):
        raise CliError(
            f"k={args.k} does not divide the grid; valid divisors: "
            f"{valid_slice_counts(grid.dims[0])}",
            EXIT_USAGE,
        )
    seq = compute_mdr(grid, args.k)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.infile).stem
    _write_atomic(out_dir / f"{stem}.mdr", export_mdr_text(seq))
    if args.images:
        for i in range(3 * seq.k):
            name = f"{stem}_{slice_name(seq, i)}.pgm"
            _write_atomic(out_dir / name, export_slice_pgm(seq, i))
    print(f"wrote MDR (k={seq.k}) for {stem} to {out_dir}")


def _load_dataset(path):
    path = Path(path)
    manifest = path / "manifest.tsv" if path.is_dir() else path
    try:
        return voxel.load_dataset(manifest)
    except OSError as e:
        raise CliError(f"cannot read dataset: {e}", EXIT_IO)
    except (DatasetError, voxel.BinvoxError) as e:
        raise CliError(f"bad dataset: {e}", EXIT_USAGE)


def cmd_train(args):
    try:
        config = training.parse_config(Path(args.config).read_text(encoding="utf-8"))
    except OSError as e:
        raise CliError(f"cannot read config: {e}", EXIT_IO)
    except ConfigError as e:
        raise CliError(f"config error: {e}", EXIT_USAGE)
    dataset = _load_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "checkpoint.mdrnet"
    metrics_path = out_dir / "metrics.csv"
    manifest = {
        "config": training.format_config(config).splitlines(),
        "seed": config.seed,
        "dataset_manifest": str(args.data),
        "checkpoint": str(checkpoint_path),
        "metrics": str(metrics_path),
        "tool_version": __version__,
    }
    _write_atomic(out_dir / "run_manifest.json", json.dumps(manifest, indent=2) + "\n")

    trainer = training.Trainer(config, len(dataset.classes))
    train_x, train_y, _ = training.prepare_inputs(dataset.subset("train"), config.k)
    try:
        for _ in range(config.epochs):
            m = trainer.train_epoch(train_x, train_y)
            _write_atomic(checkpoint_path, trainer.save())
            _write_atomic(metrics_path, training.metrics_csv(trainer.metrics))
            print(
                f"epoch {m.epoch}: g_loss={m.g_loss:.4f} d_loss={m.d_loss:.4f} "
                f"train_acc={m.train_acc:.4f}"
            )
    except TrainingError as e:
        raise CliError(f"training aborted: {e}", EXIT_NUMERIC)
    if config.epochs == 0:
        _write_atomic(checkpoint_path, trainer.save())
        _write_atomic(metrics_path, training.metrics_csv(trainer.metrics))
    final_acc = trainer.metrics[-1].train_acc if trainer.metrics else float("nan")
    print(f"final train accuracy: {final_acc:.4f}")


def _restore_trainer(checkpoint):
    try:
        data = Path(checkpoint).read_bytes()
    except OSError as e:
        raise CliError(f"cannot read checkpoint: {e}", EXIT_IO)
    try:
        return training.Trainer.restore(data)
    except (network.NetworkError, ConfigError, KeyError) as e:
        raise CliError(f"bad checkpoint: {e}", EXIT_USAGE)


def cmd_extract(args):
    trainer = _restore_trainer(args.checkpoint)
    dataset = _load_dataset(args.data)
    shapes = dataset.subset(args.split) if args.split != "all" else dataset.shapes
    x, _, ids = training.prepare_inputs(shapes, trainer.model.k)
    vecs = trainer.extract(x)
    _write_atomic(Path(args.out), network.save_descriptors(ids, vecs))
    print(f"wrote {len(ids)} descriptors to {args.out}")


def cmd_eval(args):
    if not args.checkpoint and not args.descriptors:
        raise CliError("eval needs --checkpoint and/or --descriptors", EXIT_USAGE)
    dataset = _load_dataset(args.data)
    test_shapes = dataset.subset("test")
    labels = {s.shape_id: s.label for s in dataset.shapes}
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {}

    trainer = _restore_trainer(args.checkpoint) if args.checkpoint else None
    if trainer is not None and len(dataset.classes) != trainer.model.n_classes:
        raise CliError(
            f"checkpoint was trained for {trainer.model.n_classes} classes, "
            f"dataset has {len(dataset.classes)}",
            EXIT_USAGE,
        )

    if args.descriptors:
        try:
            ids, vecs = network.load_descriptors(Path(args.descriptors).read_bytes())
        except OSError as e:
            raise CliError(f"cannot read descriptors: {e}", EXIT_IO)
        except network.NetworkError as e:
            raise CliError(f"bad descriptor file: {e}", EXIT_USAGE)
        missing = [i for i in ids if i not in labels]
        if missing:
            raise CliError(f"descriptor ids not in dataset: {missing[:5]}", EXIT_USAGE)
    else:
        x, _, ids = training.prepare_inputs(test_shapes, trainer.model.k)
        vecs = trainer.extract(x)

    id_labels = np.array([labels[i] for i in ids])
    if trainer is not None:
        logits = trainer.model.head_logits(vecs).data
        preds = np.array(
            [evaluation.classify(l, trainer.model.n_classes) for l in logits]
        )
        summary["accuracy"] = evaluation.accuracy(preds, id_labels)

    results = evaluation.leave_one_out_retrieval(
        ids, vecs, list(id_labels), metric=args.metric
    )
    mean_ap, excluded = evaluation.mean_ap(results)
    summary["map"] = mean_ap
    summary["excluded_queries"] = excluded
    if excluded:
        print(f"warning: {excluded} queries had no relevant gallery item")

    _write_atomic(out_dir / "macro_pr.csv", evaluation.macro_pr_csv(results))
    ranks_dir = out_dir / "pr"
    ranks_dir.mkdir(exist_ok=True)
    for r in results:
        if any(r.relevant):
            _write_atomic(ranks_dir / f"{r.query_id}.csv", evaluation.pr_csv(r))
    _write_atomic(out_dir / "summary.txt", evaluation.summary_text(summary))
    for k, v in summary.items():
        print(f"{k} = {v}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mdrnet",
        description="Volumetric shape descriptors from dense slice sequences",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-synth", help="generate a synthetic voxel dataset")
    p.add_argument("--classes", default=",".join(voxel.SYNTHETIC_CLASSES))
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset_synth)

    p = sub.add_parser("mdr-export", help="export slice sequences for one shape")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--images", action="store_true")
    p.set_defaults(func=cmd_mdr_export)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="write shape descriptors for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="classification and retrieval metrics")
    p.add_argument("--checkpoint")
    p.add_argument("--descriptors")
    p.add_argument("--data", required=True)
    p.add_argument("--metric", choices=("euclidean", "cosine"), default="euclidean")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
