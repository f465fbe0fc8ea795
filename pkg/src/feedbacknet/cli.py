"""Command-line entry point: ``feedbacknet <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .checkpoint import load_checkpoint
from .config import load_config, parse_config
from .data import SyntheticSpec, generate_dataset, load_cifar_binary, load_dataset, save_dataset
from .errors import CheckpointError, ConfigError, FormatError, NumericError, TaxonomyError
from .graph import GraphSpec, report
from .harness import evaluate, export_representations, load_data, train
from .taxonomy import Taxonomy, load_taxonomy


def _load_images(path):
    return load_cifar_binary(path) if path.endswith(".bin") else load_dataset(path)


def _taxonomy_for(data, path):
    """Taxonomy file next to the data when present, else the observed label pairs."""
    candidate = os.path.join(os.path.dirname(os.path.abspath(path)), "taxonomy.txt")
    return load_taxonomy(candidate) if os.path.exists(candidate) else data.taxonomy()


def _report_dict(rep):
    return {
        "fine_accuracy": rep.fine_accuracy,
        "coarse_accuracy": rep.coarse_accuracy,
        "parent_accuracy": rep.parent_accuracy,
        "compliance": rep.compliance,
        "top1": rep.top1,
        "top5": rep.top5,
        "test_loss": rep.test_loss,
        "loss_history": rep.loss_history,
    }


def cmd_train(args):
    config = load_config(args.config)
    out = args.out or os.path.splitext(args.config)[0] + "-run"
    os.makedirs(out, exist_ok=True)
    log = None if args.quiet else (lambda line: print(line, flush=True))
    try:
        result = train(config, checkpoint_dir=out, log=log, log_path=os.path.join(out, "train.log"))
    except NumericError as exc:
        if getattr(exc, "checkpoint", None) is not None:
            from .checkpoint import save_checkpoint

            save_checkpoint(exc.checkpoint, os.path.join(out, "last-good.fbnc"))
        raise
    with open(os.path.join(out, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump([_report_dict(r) for r in result.history], fh, indent=1)
    print(f"final checkpoint: {os.path.join(out, 'final.fbnc')}")
    return 0


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    data = _load_images(args.data)
    tax = load_taxonomy(args.taxonomy) if args.taxonomy else _taxonomy_for(data, args.data)
    rep = evaluate(ckpt, data, tax)
    print(json.dumps(_report_dict(rep), indent=1))
    return 0


def cmd_analyze_graph(args):
    print(report(GraphSpec(m=args.m, n=args.n, s=args.s, layer_time=args.layer_time)), end="")
    return 0


def cmd_export(args):
    ckpt = load_checkpoint(args.checkpoint)
    if args.data:
        data = _load_images(args.data)
    else:
        _, data, _ = load_data(parse_config(f"seed = {args.seed}\n"))
    if args.limit:
        data = data.subset(slice(0, args.limit))
    export_representations(ckpt, data, args.out)
    return 0


def cmd_gen_data(args):
    values = {}
    if args.spec:
        with open(args.spec, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, value = (part.strip() for part in line.partition("="))
                if not sep or key not in SyntheticSpec.__dataclass_fields__:
                    raise ConfigError(f"{args.spec} line {lineno}: unknown or malformed entry {raw.strip()!r}")
                values[key] = float(value) if key in ("noise", "wobble") else int(value)
    train_set, test_set, tax = generate_dataset(SyntheticSpec(**values))
    os.makedirs(args.out, exist_ok=True)
    save_dataset(train_set, os.path.join(args.out, "train.fbds"))
    save_dataset(test_set, os.path.join(args.out, "test.fbds"))
    with open(os.path.join(args.out, "taxonomy.txt"), "w", encoding="utf-8") as fh:
        fh.write(tax.to_text())
    print(f"{len(train_set)} train / {len(test_set)} test images, {tax.fine_count} fine / {tax.coarse_count} coarse")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="feedbacknet", description="Feedback ConvLSTM networks at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a feedback network from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default: <config>-run)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help=".fbds dataset or CIFAR-100 .bin file")
    p.add_argument("--taxonomy", help="taxonomy file (default: taxonomy.txt next to the data, else observed labels)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-graph", help="depths and availability of an unrolled feedback graph")
    p.add_argument("--m", type=int, required=True, help="iterations")
    p.add_argument("--n", type=int, required=True, help="physical depth")
    p.add_argument("--s", type=int, default=1, help="stack length")
    p.add_argument("--layer-time", type=float, default=1.0)
    p.set_defaults(func=cmd_analyze_graph)

    p = sub.add_parser("export-reprs", help="dump per-iteration pooled features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset file (default: synthetic test split for --seed)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=0, help="export only the first N samples")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gen-data", help="write the synthetic dataset as train/test .fbds files")
    p.add_argument("--spec", help="'field = value' overrides of the synthetic dataset settings")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError, CheckpointError, TaxonomyError, NumericError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
