"""Command line entry point: ``linbp {train,surgery,attack,eval,inspect}``.

Every config key is also a flag (``--step-size`` or ``--step_size``); flags
override values read from ``--config``. Exit codes: 0 success, 1 usage or
configuration error, 2 data or format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import bench, lab
from .errors import LinBPError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    valid_keys: list = []

    def error(self, message):
        self.print_usage(sys.stderr)
        extra = f"\nvalid keys: {', '.join(self.valid_keys)}" if self.valid_keys else ""
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}{extra}\n")


def _add_keys(p, cls):
    p.valid_keys = cls.keys()
    p.add_argument("--config", help="flat key=value file supplying defaults")
    for f in cls.keys():
        flags = {f"--{f.replace('_', '-')}", f"--{f}"}
        p.add_argument(*sorted(flags), dest=f, default=None, metavar="VALUE")


def _overrides(args, cls):
    return {k: getattr(args, k) for k in cls.keys() if getattr(args, k, None) is not None}


def build_parser():
    root = _Parser(prog="linbp", description="Transferable adversarial examples with linear backpropagation.")
    root.add_argument("-v", "--verbose", action="store_true")
    sub = root.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    root.commands = sub.choices

    p = sub.add_parser("train", help="train or fine-tune a model")
    _add_keys(p, bench.TrainConfig)

    p = sub.add_parser("surgery", help="remove ReLUs from a model tail")
    p.add_argument("--checkpoint", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--from-layer", type=int, help="layer id; every ReLU at or after it is removed")
    g.add_argument("--split-k", type=int, help="weight-layer boundary, converted to a layer id")
    p.add_argument("--output", required=True)

    p = sub.add_parser("attack", help="craft adversarial examples and save them as .npz")
    _add_keys(p, bench.ExperimentConfig)
    p.add_argument("--adv-output", default="adversarial.npz")

    p = sub.add_parser("eval", help="transfer evaluation; writes a report")
    _add_keys(p, bench.ExperimentConfig)

    p = sub.add_parser("inspect", help="print a checkpoint's architecture and metadata")
    p.add_argument("checkpoint")
    return root


def cmd_train(args):
    cfg = bench.TrainConfig.load(args.config, _overrides(args, bench.TrainConfig))
    train_set = bench.load_dataset(cfg, "train")
    test_set = bench.load_dataset(cfg, "test", cfg.test_path) if (cfg.test_path or not cfg.data_path) else None
    if cfg.init:
        net = lab.load(cfg.init)
    else:
        net = lab.build_model(cfg.arch, train_set.shape, train_set.num_classes, seed=cfg.rng_seed)
    net, metrics = lab.train(net, train_set, cfg.train_spec(), test_set)
    for row in metrics:
        print(json.dumps(row, sort_keys=True))
    lab.save(net, cfg.output)
    print(f"saved {cfg.output}")
    return EXIT_OK


def cmd_surgery(args):
    net = lab.load(args.checkpoint)
    from_layer = args.from_layer if args.split_k is None else net.boundary_id(args.split_k)
    out = lab.lins_remove_relus(net, from_layer)
    lab.save(out, args.output)
    print(f"removed ReLUs from layer {from_layer}; saved {args.output}")
    return EXIT_OK


def _prepare(args):
    cfg = bench.ExperimentConfig.load(args.config, _overrides(args, bench.ExperimentConfig))
    return cfg.validate()


def cmd_attack(args):
    cfg = _prepare(args)
    source, victims = bench.load_models(cfg)
    dataset = bench.load_dataset(cfg, "test")
    ids = bench.select_samples(dataset, [source] + victims, cfg.sample_count, cfg.filter_correct, cfg.rng_seed)
    x, y = dataset.images[ids], dataset.labels[ids]
    goal = bench.draw_targets(y, ids, source.num_classes, cfg.rng_seed) if cfg.targeted else y
    res = bench.craft(cfg, source, x, goal, ids)
    np.savez(args.adv_output, x_adv=res.x_adv, x=x, labels=y, goal=goal, sample_ids=ids,
             achieved_linf=res.achieved_linf, source_fooled=res.source_fooled)
    print(f"source fooling rate {float(np.mean(res.source_fooled)):.4f} on {len(ids)} samples; "
          f"saved {args.adv_output}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _prepare(args)
    report = bench.eval_transfer(cfg)
    bench.emit_report(report, cfg.output, cfg.format)
    for v in report.victims:
        star = "*" if v.is_source else " "
        print(f"{v.victim_id}{star} n={v.n} fooling_rate={v.fooling_rate:.4f} mean_linf={v.mean_linf:.6f}")
    print(f"wrote {cfg.output}")
    return EXIT_OK


def cmd_inspect(args):
    net = lab.load(args.checkpoint)
    print(net.summary())
    print("split boundaries (k -> layer id): "
          + ", ".join(f"{k}->{net.boundary_id(k)}" for k in sorted(net.boundaries())))
    print("metadata: " + json.dumps(net.metadata, sort_keys=True))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "surgery": cmd_surgery, "attack": cmd_attack,
            "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            parser.commands[args.command].error(f"unrecognized arguments: {' '.join(extra)}")
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except LinBPError as exc:
        print(f"linbp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"linbp {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"linbp {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
