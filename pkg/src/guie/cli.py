"""Command-line pipeline: synth, train, embed, fit-reduce, reduce, evaluate,
gradcheck, margins.

Exit codes: 0 success, 1 runtime or data error, 2 usage error. Logs go to
stderr; reports go to the named file or stdout. Every file written gets an
adjacent ``<file>.run.json`` recording the subcommand, resolved flags and
inputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datastore import (FeatureBank, class_stats, draw_class_counts, filter_min_samples,
                        load_feature_bank, load_manifest, save_feature_bank, save_manifest,
                        split_unseen_classes, synth_dataset)
from .model import compute_dynamic_margins, embed, load_checkpoint, save_checkpoint
from .numkit import RngStream
from .reduce import ReduceConfig, load_pca, pca_fit, reduce, save_pca
from .retrieval import build_index, evaluate
from .trainer import TrainConfig, grad_check, prepare_training, train

log = logging.getLogger("guie")


def write_run_manifest(output, args, inputs) -> None:
    flags = {k: (str(v) if isinstance(v, Path) else v)
             for k, v in sorted(vars(args).items()) if k != "func"}
    record = {
        "subcommand": args.command,
        "flags": flags,
        "seed": flags.get("seed"),
        "inputs": [str(p) for p in inputs if p is not None],
        "output": str(output),
        "tool_version": __version__,
    }
    Path(f"{output}.run.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


def _write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


# ------------------------------------------------------------ commands


def cmd_synth(args):
    if args.count_range:
        counts = draw_class_counts(args.classes, args.count_range[0], args.count_range[1], args.seed)
    else:
        counts = args.per_class
    bank, manifest = synth_dataset(args.classes, counts, args.dim, args.spread, args.seed,
                                   n_verticals=args.verticals, prefix=args.prefix,
                                   nuisance_dims=args.nuisance_dims,
                                   nuisance_scale=args.nuisance_scale)
    bank_path, man_path = f"{args.out}.guef", f"{args.out}.csv"
    save_feature_bank(bank, bank_path)
    save_manifest(manifest, man_path)
    for p in (bank_path, man_path):
        write_run_manifest(p, args, [])
    log.info("wrote %d records (%d-d) to %s / %s", len(bank), bank.dim, bank_path, man_path)


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size, epochs_head_only=args.epochs_head, epochs_joint=args.epochs_joint,
        lr_head=args.lr_head, lr_backbone_group=args.lr_backbone, seed=args.seed,
        emb_dim=args.emb_dim, subcenters=args.subcenters, scale=args.scale,
        dropout_rate=args.dropout, m_min=args.m_min, m_max=args.m_max,
        margin_lambda=args.margin_lambda,
    )


def _training_data(args):
    bank = load_feature_bank(args.bank)
    manifest = filter_min_samples(load_manifest(args.manifest).subset(bank.ids), args.min_samples)
    split = None
    if args.val_fraction > 0:
        split = split_unseen_classes(manifest, args.val_fraction, args.seed)
        if args.val_ids:
            _write_text(args.val_ids, "".join(k + "\n" for k in split.val_ids))
            write_run_manifest(args.val_ids, args, [args.bank, args.manifest])
    return bank, manifest, split


def cmd_train(args):
    bank, manifest, split = _training_data(args)
    model, report = train(bank, manifest, split, _train_config(args))
    save_checkpoint(model, args.out)
    report.checkpoint = str(args.out)
    log_path = args.log or f"{args.out}.log"
    _write_text(log_path, "epoch,phase,mean_loss,seconds\n" + "".join(l + "\n" for l in report.log_lines()))
    for p in (args.out, log_path):
        write_run_manifest(p, args, [args.bank, args.manifest])
    log.info("saved checkpoint %s after %d epochs", args.out, len(report.epochs))


def cmd_embed(args):
    model = load_checkpoint(args.checkpoint)
    bank = load_feature_bank(args.bank)
    if args.ids:
        bank = bank.subset([l.strip() for l in Path(args.ids).read_text().splitlines() if l.strip()])
    save_feature_bank(FeatureBank(bank.ids, embed(bank.vectors, model)), args.out)
    write_run_manifest(args.out, args, [args.checkpoint, args.bank, args.ids])


def cmd_fit_reduce(args):
    bank = load_feature_bank(args.fit_bank)
    model = pca_fit(bank.vectors, args.out_dim, whiten=args.whiten)
    save_pca(model, args.out)
    write_run_manifest(args.out, args, [args.fit_bank])
    log.info("PCA %d -> %d, explained variance %.4g of top component", model.in_dim,
             model.out_dim, model.explained_variance[0])


def cmd_reduce(args):
    config = ReduceConfig(args.method, args.out_dim, not args.no_renormalize)
    pca = load_pca(args.pca) if args.method == "pca" else None
    bank = load_feature_bank(args.bank)
    save_feature_bank(FeatureBank(bank.ids, reduce(bank.vectors, config, pca)), args.out)
    write_run_manifest(args.out, args, [args.bank, args.pca])


def cmd_evaluate(args):
    bank = load_feature_bank(args.bank)
    manifest = load_manifest(args.manifest)
    index = build_index(bank, manifest)
    if args.query_bank:
        queries = load_feature_bank(args.query_bank)
        qman = load_manifest(args.query_manifest) if args.query_manifest else manifest
    else:
        queries, qman = bank, manifest
    report = evaluate(index, queries, qman, k=args.k, p_at=args.p_at,
                      exclude_self=not args.keep_self)
    inputs = [args.bank, args.manifest, args.query_bank, args.query_manifest]
    if args.out:
        _write_text(args.out, report.to_text())
        write_run_manifest(args.out, args, inputs)
    else:
        sys.stdout.write(report.to_text())
    if args.ap_out:
        _write_text(args.ap_out, report.ap_dump())
        write_run_manifest(args.ap_out, args, inputs)
    if args.json:
        _write_text(args.json, report.to_json() + "\n")
        write_run_manifest(args.json, args, inputs)
    if report.skipped:
        log.warning("skipped %d queries with no relevant item in the index", len(report.skipped))


def cmd_gradcheck(args):
    bank, manifest, split = _training_data(args)
    config = _train_config(args)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        x, y, _ = prepare_training(bank, manifest, split, config)
    else:
        x, y, model = prepare_training(bank, manifest, split, config)
    idx = RngStream(args.seed).choice(len(y), min(args.batch, len(y)))
    report = grad_check(model, x[idx], y[idx], args.epsilon, args.coords, args.seed)
    lines = ["tensor,max_rel_error,ok"]
    for name, err in report.max_rel_error.items():
        lines.append(f"{name},{err:.3e},{'yes' if err <= args.tolerance else 'no'}")
    sys.stdout.write("\n".join(lines) + "\n")
    if report.worst > args.tolerance:
        log.error("gradient check failed: worst relative error %.3e > %.1e", report.worst,
                  args.tolerance)
        return 1


def cmd_margins(args):
    manifest = filter_min_samples(load_manifest(args.manifest), args.min_samples)
    stats = class_stats(manifest)
    classes = sorted(stats.counts, key=lambda c: (stats.counts[c], c))
    sched = compute_dynamic_margins(stats, args.m_min, args.m_max, args.margin_lambda, classes)
    rows = ["class,count,margin"] + [f"{c},{stats.counts[c]},{m:.6g}"
                                     for c, m in zip(classes, sched.margins)]
    sys.stdout.write("\n".join(rows) + "\n")


# --------------------------------------------------------------- parser


def _positive_int(minimum):
    def parse(text):
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
        if value < minimum:
            raise argparse.ArgumentTypeError(f"must be >= {minimum}, got {value}")
        return value
    return parse


def _add_training_flags(p):
    p.add_argument("--bank", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=_positive_int(2), default=32)
    p.add_argument("--epochs-head", type=_positive_int(0), default=5,
                   help="head-only epochs (adapter learning rate 0)")
    p.add_argument("--epochs-joint", type=_positive_int(0), default=4)
    p.add_argument("--lr-head", type=float, default=1e-4)
    p.add_argument("--lr-backbone", type=float, default=1e-7,
                   help="adapter group learning rate during the joint phase")
    p.add_argument("--emb-dim", type=_positive_int(1), default=256)
    p.add_argument("--subcenters", type=_positive_int(1), default=3)
    p.add_argument("--scale", type=float, default=30.0)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--m-min", type=float, default=0.005)
    p.add_argument("--m-max", type=float, default=0.45)
    p.add_argument("--margin-lambda", type=float, default=0.25)
    p.add_argument("--min-samples", type=_positive_int(1), default=3,
                   help="drop classes with fewer samples before training")
    p.add_argument("--val-fraction", type=float, default=0.0,
                   help="hold out this fraction of classes (0 trains on everything)")
    p.add_argument("--val-ids", type=Path, help="write held-out ids here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="guie", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_parser = sub.add_parser

    def add_parser(name, **kw):
        return _add_parser(name, parents=[common], **kw)

    sub.add_parser = add_parser

    p = sub.add_parser("synth", help="generate a synthetic Gaussian-cluster dataset")
    p.add_argument("--classes", type=_positive_int(2), required=True)
    p.add_argument("--per-class", type=_positive_int(1), default=10)
    p.add_argument("--count-range", type=_positive_int(1), nargs=2, metavar=("LO", "HI"),
                   help="draw per-class counts uniformly from LO..HI instead of --per-class")
    p.add_argument("--dim", type=_positive_int(2), default=1024)
    p.add_argument("--spread", type=float, default=0.3, help="within-class std per coordinate")
    p.add_argument("--verticals", type=_positive_int(1), default=4)
    p.add_argument("--nuisance-dims", type=_positive_int(0), default=0)
    p.add_argument("--nuisance-scale", type=float, default=0.0)
    p.add_argument("--prefix", default="s")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output prefix; writes PREFIX.guef and PREFIX.csv")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train head + SubCenter ArcFace on a feature bank")
    _add_training_flags(p)
    p.add_argument("--out", required=True, type=Path, help="checkpoint path")
    p.add_argument("--log", type=Path, help="epoch log (default: OUT.log)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="eval-mode embeddings from a checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--bank", required=True, type=Path)
    p.add_argument("--ids", type=Path, help="only embed the ids listed in this file")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("fit-reduce", help="fit PCA on a separate corpus")
    p.add_argument("--fit-bank", required=True, type=Path)
    p.add_argument("--out-dim", type=_positive_int(1), default=64)
    p.add_argument("--whiten", action="store_true")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_fit_reduce)

    p = sub.add_parser("reduce", help="reduce a bank to --out-dim dimensions")
    p.add_argument("--bank", required=True, type=Path)
    p.add_argument("--method", choices=("pca", "avgpool"), default="pca")
    p.add_argument("--pca", type=Path, help="PCA model from fit-reduce (method pca)")
    p.add_argument("--out-dim", type=_positive_int(1), default=64)
    p.add_argument("--no-renormalize", action="store_true")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser(
        "evaluate", help="kNN retrieval mAP",
        description="Report lines: 'mAP,<v>', 'precision_at_<n>,<v>', 'k,<depth>', "
                    "'n_queries,<n>', 'n_skipped,<n>', then one "
                    "'vertical,<name>,<mAP>,<n_queries>' per vertical. "
                    "--ap-out writes 'query_id,ap' rows; --json writes all fields.")
    p.add_argument("--bank", required=True, type=Path, help="index bank")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--query-bank", type=Path, help="default: query with the index itself")
    p.add_argument("--query-manifest", type=Path)
    p.add_argument("--k", type=_positive_int(1), default=100, help="ranking depth for AP")
    p.add_argument("--p-at", type=_positive_int(1), default=5)
    p.add_argument("--keep-self", action="store_true", help="do not drop self-matches")
    p.add_argument("--out", type=Path, help="report file (default: stdout)")
    p.add_argument("--ap-out", type=Path)
    p.add_argument("--json", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    _add_training_flags(p)
    p.add_argument("--checkpoint", type=Path, help="check this model instead of a fresh one")
    p.add_argument("--batch", type=_positive_int(2), default=8)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--coords", type=_positive_int(1), default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("margins", help="per-class dynamic margin table")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--m-min", type=float, default=0.005)
    p.add_argument("--m-max", type=float, default=0.45)
    p.add_argument("--margin-lambda", type=float, default=0.25)
    p.add_argument("--min-samples", type=_positive_int(1), default=1)
    p.set_defaults(func=cmd_margins)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "evaluate" and args.query_manifest and not args.query_bank:
        parser.error("--query-manifest needs --query-bank")
    if args.command == "reduce" and args.method == "pca" and not args.pca:
        parser.error("--method pca needs --pca")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args) or 0
    except (ValueError, OSError, KeyError) as exc:
        print(f"guie {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
