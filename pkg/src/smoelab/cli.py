"""Command-line entry point.

Verbs: ingest, pretrain, finetune, eval, entropy, flops, export-gates,
census. All verbs except ingest assemble a run config from an optional
preset, an optional config file, and dotted key=value overrides; outputs go
under $SMOELAB_OUT (default ./runs) in a directory named by the config
hash. Exit codes: 0 success, 1 data errors, 2 config errors.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as data_mod
from . import diagnostics, training
from .config import build_config, config_hash, run_dir, valid_keys
from .errors import ConfigError, ContractError, DataError
from .model import count_params


def _add_config_args(p):
    p.add_argument("--config", help="path to a key = value config file")
    p.add_argument("--preset", help="named base config (desk or paper)")
    p.add_argument(
        "overrides",
        nargs="*",
        metavar="section.key=value",
        help="dotted overrides applied after preset and file",
    )


def build_parser():
    parser = argparse.ArgumentParser(prog="smoelab", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("ingest", help="tokenize a source file into a dataset directory")
    p.add_argument("--source", required=True)
    p.add_argument("--kind", required=True, choices=data_mod.KINDS)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="train a language model")
    _add_config_args(p)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("finetune", help="train a classifier head on a pretrained trunk")
    _add_config_args(p)
    p.add_argument("--pretrained", required=True, help="pretraining checkpoint")
    p.add_argument("--resume", help="finetune checkpoint to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint over a sweep of expert counts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", help="comma-separated expert counts (default: config eval_ks)")
    p.add_argument("--split", default="test")
    p.add_argument("--dataset", help="override the dataset directory")

    p = sub.add_parser("entropy", help="measure router output entropy per layer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--dataset")
    p.add_argument("--max-batches", type=int, default=8)

    p = sub.add_parser("flops", help="analytic inference cost for a config")
    _add_config_args(p)
    p.add_argument("--k", help="comma-separated expert counts")
    p.add_argument("--seq-len", type=int)
    p.add_argument("--batch", type=int, default=1)

    p = sub.add_parser("export-gates", help="dump dense gate distributions for a sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--dataset")
    p.add_argument("--k", type=int)

    p = sub.add_parser("census", help="count trainable / frozen / generated parameters")
    _add_config_args(p)
    return parser


def _eval_batches(model_cfg, run_cfg, split, dataset=None, max_batches=None):
    dataset = dataset or run_cfg.dataset
    tokens = data_mod.load_tokens(dataset, split)
    t = run_cfg.input_length
    n_chunks = (tokens.size - 1) // t
    if n_chunks < 1:
        raise DataError(f"split {split!r} too small for input length {t}")
    batches = []
    for start in range(0, n_chunks, run_cfg.batch_size):
        ids = range(start, min(start + run_cfg.batch_size, n_chunks))
        batches.append(np.stack([tokens[c * t : c * t + t] for c in ids]))
        if max_batches and len(batches) >= max_batches:
            break
    return batches, tokens


def cmd_ingest(args):
    manifest = data_mod.ingest(args.source, args.kind, args.out)
    print(f"ingested {args.source} as {manifest.kind}: vocab={manifest.vocab_size}", end="")
    if manifest.kind == "classification":
        print(f" labels={manifest.n_labels} records={manifest.splits['test'][1]}")
    else:
        print(f" tokens={manifest.splits['test'][1]}")
    return 0


def cmd_pretrain(args):
    cfg = build_config(args.config, args.preset, args.overrides)
    out = run_dir(cfg)
    print(f"run {config_hash(cfg)} -> {out}")
    training.pretrain(cfg, out, resume=args.resume, progress=print)
    print(f"done; metrics in {os.path.join(out, 'metrics.csv')}")
    return 0


def cmd_finetune(args):
    cfg = build_config(args.config, args.preset, args.overrides)
    out = run_dir(cfg)
    print(f"run {config_hash(cfg)} -> {out}")
    training.finetune(cfg, args.pretrained, out, resume=args.resume, progress=print)
    print(f"done; metrics in {os.path.join(out, 'metrics.csv')}")
    return 0


def cmd_eval(args):
    model, cfg = training.build_model_from_checkpoint(args.checkpoint)
    if args.dataset:
        cfg = cfg.with_(dataset=args.dataset)
    ks = (
        tuple(int(x) for x in args.k.split(","))
        if args.k
        else cfg.eval_ks
    )
    manifest = data_mod.load_manifest(cfg.dataset)
    out = run_dir(cfg)
    metrics = training.MetricsLog(os.path.join(out, "metrics.csv"))
    metric_name = "bpc" if manifest.kind == "char-lm" else "ppl"
    tokens = data_mod.load_tokens(cfg.dataset, args.split)
    step = cfg.total_iterations
    for k in ks:
        result = training.evaluate(model, tokens, k, cfg)
        metrics.log(step, k, args.split, metric_name, result[metric_name])
        print(f"k={k} {metric_name}={result[metric_name]:.4f}")
    return 0


def cmd_entropy(args):
    model, cfg = training.build_model_from_checkpoint(args.checkpoint)
    if args.dataset:
        cfg = cfg.with_(dataset=args.dataset)
    batches, _ = _eval_batches(cfg.model, cfg, args.split, max_batches=args.max_batches)
    report = diagnostics.router_entropy(model, batches)
    path = os.path.join(run_dir(cfg), f"entropy_{config_hash(cfg)}.csv")
    diagnostics.write_entropy_report(report, path)
    for i, (m, s) in enumerate(zip(report.per_layer_mean, report.per_layer_std)):
        print(f"layer {i}: entropy {m:.4f} +/- {s:.4f}")
    print(f"report written to {path}")
    return 0


def cmd_flops(args):
    cfg = build_config(args.config, args.preset, args.overrides)
    ks = tuple(int(x) for x in args.k.split(",")) if args.k else cfg.eval_ks
    seq_len = args.seq_len or cfg.input_length
    out = run_dir(cfg)
    for k in ks:
        report = diagnostics.count_flops(cfg.model, k, seq_len, args.batch)
        path = os.path.join(out, f"flops_{config_hash(cfg)}_k{k}.csv")
        diagnostics.write_flops_report(report, path)
        print(f"k={k} total={report.total:,}")
    return 0


def cmd_export_gates(args):
    model, cfg = training.build_model_from_checkpoint(args.checkpoint)
    if args.dataset:
        cfg = cfg.with_(dataset=args.dataset)
    batches, _ = _eval_batches(cfg.model, cfg, args.split, max_batches=1)
    k = args.k or cfg.model.n_experts
    path = os.path.join(run_dir(cfg), f"gates_{config_hash(cfg)}_k{k}.csv")
    rows = diagnostics.export_gate_distributions(model, batches[0], k, path)
    print(f"{rows} rows written to {path}")
    return 0


def cmd_census(args):
    cfg = build_config(args.config, args.preset, args.overrides)
    from .model import LanguageModel

    census = count_params(LanguageModel(cfg.model))
    print(f"{'component':<20}{'trainable':>12}{'frozen':>12}{'generated':>12}")
    for cat in sorted(census["categories"]):
        slot = census["categories"][cat]
        print(f"{cat:<20}{slot['trainable']:>12}{slot['frozen']:>12}{slot['generated']:>12}")
    t = census["totals"]
    print(f"{'total':<20}{t['trainable']:>12}{t['frozen']:>12}{t['generated']:>12}")
    return 0


_COMMANDS = {
    "ingest": cmd_ingest,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "entropy": cmd_entropy,
    "flops": cmd_flops,
    "export-gates": cmd_export_gates,
    "census": cmd_census,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
