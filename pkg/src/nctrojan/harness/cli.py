"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad flags, bad config, bad
input files), 2 runtime failure.
"""

import argparse
import json
import logging
import sys

import numpy as np

from .. import collapse
from .. import dataforge as df
from .. import trainer as tr
from .. import trojanlab as tl
from ..errors import FormatError
from ..etfkit import construct_etf, etf_gram, ideal_gram
from ..rng import RngStream
from . import checkpoint, report
from . import config as config_mod
from .experiment import StageError, build_datasets, run_experiment

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_data_spec(spec, split="train"):
    """``synthetic:K=4,n=200,shape=1x8x8,sigma=0.1,seed=0,split=train``,
    ``idx:images=PATH,labels=PATH``, ``cifar:PATH[;PATH]`` or ``config:PATH[,split=test]``."""
    kind, _, rest = spec.partition(":")
    if kind == "cifar":
        paths = [p for p in rest.split(";") if p]
        if not paths:
            raise UsageError("cifar data spec needs at least one path")
        return df.load_cifar_binary(paths, split_tag=split)
    opts = dict(item.split("=", 1) for item in rest.split(",") if "=" in item)
    if kind == "synthetic":
        shape = tuple(int(s) for s in opts.get("shape", "1x8x8").split("x"))
        which = opts.get("split", split)
        seed = int(opts.get("seed", 0))
        return df.generate_synthetic(int(opts.get("K", 4)), int(opts.get("n", 200)), shape,
                                     float(opts.get("sigma", 0.1)), RngStream(seed, f"data/{which}"),
                                     split_tag=which)
    if kind == "idx":
        if "images" not in opts or "labels" not in opts:
            raise UsageError("idx data spec needs images= and labels=")
        return df.load_idx(opts["images"], opts["labels"], split_tag=split)
    if kind == "config":
        path = rest.split(",")[0]
        cfg = config_mod.load(path)
        train, test = build_datasets(cfg["dataset"], cfg["seeds"])
        return test if opts.get("split", split) == "test" else train
    raise UsageError(f"unknown data spec kind {kind!r}")


def cmd_run(args):
    cfg = config_mod.load(args.config)
    cfg = config_mod.apply_seed_overrides(cfg, args.seed_override)
    if args.out:
        cfg["out_dir"] = args.out
    summary = run_experiment(cfg, args.out)
    print(json.dumps({k: summary[k] for k in ("acc_before", "asr_before", "acc_after", "asr_after",
                                              "tpt_start_epoch")}, indent=2))
    return EXIT_OK


def cmd_metrics(args):
    model = checkpoint.load_checkpoint(args.checkpoint)
    data = parse_data_spec(args.data)
    rep = collapse.full_report(model, data, checkpoint.checkpoint_meta(args.checkpoint)["epoch"],
                               args.nc1_mode)
    print(json.dumps(rep.to_dict(), indent=2))
    return EXIT_OK


def cmd_etf(args):
    head = construct_etf(args.k, args.m, RngStream(args.seed, "etf"))
    W = head.W_etf.astype(np.float64)
    norms = np.linalg.norm(W, axis=1)
    cos = (W / norms[:, None]) @ (W / norms[:, None]).T
    off = cos[~np.eye(args.k, dtype=bool)]
    result = {
        "K": args.k, "m": args.m, "seed": args.seed,
        "max_gram_deviation": float(np.abs(etf_gram(W) - ideal_gram(args.k)).max()),
        "max_row_norm_deviation": float(np.abs(norms - 1.0).max()),
        "max_cosine_deviation": float(np.abs(off + 1.0 / (args.k - 1)).max()),
        "max_orthonormality_deviation": float(np.abs(head.P.T @ head.P - np.eye(args.k)).max()),
    }
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_eval(args):
    model = checkpoint.load_checkpoint(args.checkpoint)
    test = parse_data_spec(args.test, split="test")
    asr_set = None
    if args.asr:
        poison = checkpoint.checkpoint_meta(args.checkpoint).get("extra", {}).get("poison")
        if poison is None:
            raise UsageError("--asr needs a checkpoint saved from a poisoned run")
        target = poison["target_class"] if args.target is None else args.target
        asr_set = tl.build_asr_eval_set(test, tl.TriggerSpec.from_dict(poison["trigger"]), target)
    acc, asr = tr.evaluate(model, test, asr_set)
    print(json.dumps({"acc": acc, "asr": asr}, indent=2))
    return EXIT_OK


def cmd_report(args):
    rows = report.read_timeline_csv(args.timeline)
    written = report.emit_plots(rows, args.out, report.tpt_from_rows(rows))
    for path in written:
        print(path)
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="nctj", description="Neural Collapse / trojan cleansing lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("run", help="run an experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed-override", action="append", default=[], metavar="NAME=VALUE")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("metrics", help="NC report for a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--nc1-mode", choices=collapse.NC1_MODES, default="literal_transpose")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("etf", help="build a random simplex ETF and check its gram matrix")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_etf)

    p = sub.add_parser("eval", help="clean accuracy (and ASR) of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--asr", action="store_true")
    p.add_argument("--target", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render SVG plots from a timeline CSV")
    p.add_argument("--timeline", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def _usage_for(parser, argv):
    """Usage text of the subcommand named in ``argv`` (top level otherwise)."""
    for action in parser._subparsers._group_actions if parser._subparsers else ():
        for arg in argv or ():
            if arg in getattr(action, "choices", {}):
                return action.choices[arg].format_usage()
    return parser.format_usage()


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_VALIDATION
    except (config_mod.ConfigError, FormatError, FileNotFoundError) as exc:
        sys.stderr.write(_usage_for(parser, argv))
        print(str(exc), file=sys.stderr)
        return EXIT_VALIDATION
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
