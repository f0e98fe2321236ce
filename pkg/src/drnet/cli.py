"""Command-line entry point: gen | train | eval | gradcheck | dilation-dump.

Every command is driven by a flat key=value config file (--config) with
--set key=value overrides; all randomness flows from the config seed. Exit
codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

from drnet import data as dataio
from drnet import gradcheck, trainer
from drnet.config import ConfigError, load_config
from drnet.numerics import NumericalError, RandomStream, fold_seed

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="drnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to key=value config file")
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key"
        )
        return p

    add("gen", "generate a synthetic dataset into data_dir")
    train = add("train", "train a model, writing checkpoints and a CSV log to out_dir")
    train.add_argument("--resume", help="checkpoint to resume from")
    train.add_argument(
        "--stop-after", type=int, default=None, help="interrupt after this many epochs"
    )
    evalp = add("eval", "evaluate a checkpoint on the test split")
    evalp.add_argument("--checkpoint", required=True)
    evalp.add_argument("--votes", type=int, default=None, help="override config votes")
    add("gradcheck", "run the finite-difference suite; nonzero exit on any failure")
    dump = add("dilation-dump", "write per-point dilation factors for a cloud file")
    dump.add_argument("--checkpoint", required=True)
    dump.add_argument("--cloud", required=True, help="point cloud text file")
    dump.add_argument("--layer", type=int, default=1, help="module index, 1-based")
    dump.add_argument("--out", default=None, help="output CSV path (default: stdout)")
    return parser


def _load_bundle(cfg):
    bundle = dataio.load_dataset(cfg.data_dir)
    if bundle.task != cfg.task:
        raise dataio.CloudFormatError(
            f"dataset at {cfg.data_dir} is for task {bundle.task!r}, config says {cfg.task!r}"
        )
    return bundle


def _build_model_for(cfg, bundle):
    part_table = bundle.part_ids()
    n_parts = max((max(p) for p in part_table), default=-1) + 1 if part_table else None
    return trainer.build_model(cfg, len(bundle.class_names), n_parts, len(bundle.class_names))


def cmd_gen(cfg) -> int:
    if cfg.task == "cls":
        bundle = dataio.gen_cls_dataset(cfg.seed, cfg.n_per_class, cfg.points)
    else:
        bundle = dataio.gen_seg_dataset(cfg.seed, cfg.n_shapes, cfg.points)
    manifest = dataio.save_dataset(bundle, cfg.data_dir)
    print(
        f"generated {len(bundle.train)} train / {len(bundle.test)} test clouds "
        f"({cfg.task}, {cfg.points} points) -> {manifest}"
    )
    return EXIT_OK


def cmd_train(cfg, resume_path=None, stop_after=None) -> int:
    bundle = _load_bundle(cfg)
    resume = dataio.load_checkpoint(resume_path) if resume_path else None
    result = trainer.train_loop(cfg, bundle, resume=resume, stop_after=stop_after)
    print(f"log: {result.log_path}")
    print(f"last checkpoint: {result.last_path}")
    print(f"best checkpoint: {result.best_path} (val_metric {result.best_metric:.9g})")
    return EXIT_OK


def cmd_eval(cfg, checkpoint: str, votes=None) -> int:
    bundle = _load_bundle(cfg)
    model = _build_model_for(cfg, bundle)
    model.load_state_dict(dataio.load_checkpoint(checkpoint))
    votes = cfg.votes if votes is None else votes
    if cfg.task == "cls":
        report = trainer.evaluate_classifier(model, bundle.test)
        if votes > 1:
            hits = 0
            for i, cloud in enumerate(bundle.test):
                rng = RandomStream(fold_seed(cfg.seed, trainer.TAG_VOTE, i))
                pred = trainer.vote_eval(model, cloud.coords, votes, rng)
                hits += int(pred == cloud.cloud_label)
            report.overall_acc = hits / max(len(bundle.test), 1)
    else:
        report = trainer.evaluate_segmenter(model, bundle.test, bundle.part_ids())
    for line in report.lines():
        print(line)
    print(f"summary: overall accuracy {report.overall_acc:.4f}", end="")
    if report.miou is not None:
        print(f", mean IoU {report.miou:.4f}", end="")
    print(f" over {len(bundle.test)} test clouds ({votes} vote(s))")
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    results = gradcheck.run_suite(report=print)
    failures = [r for r in results if not r.ok]
    if failures:
        print(f"{len(failures)} gradient check(s) FAILED", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


def cmd_dilation_dump(cfg, checkpoint: str, cloud_path: str, layer: int, out_path=None) -> int:
    bundle = _load_bundle(cfg)
    model = _build_model_for(cfg, bundle)
    model.load_state_dict(dataio.load_checkpoint(checkpoint))
    coords, _ = dataio.load_cloud(cloud_path)
    n_modules = len(model.fr.modules)
    if not 1 <= layer <= n_modules:
        raise UsageError(f"--layer must be in [1, {n_modules}]")
    model.features(coords[None].astype(model.dtype), training=False)
    dil = model.last_dilations[layer - 1]
    lines = ["x,y,z,dilation_factor,gate"]
    for i in range(coords.shape[0]):
        x, y, z = coords[i]
        lines.append(f"{x:.9g},{y:.9g},{z:.9g},{int(dil.factors[0, i])},{dil.gate[0, i]:.9g}")
    text = "\n".join(lines) + "\n"
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text)
        print(f"wrote {coords.shape[0]} rows to {out_path}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config, args.set)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.resume, args.stop_after)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.votes)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        return cmd_dilation_dump(cfg, args.checkpoint, args.cloud, args.layer, args.out)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (dataio.CloudFormatError, dataio.CheckpointFormatError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
