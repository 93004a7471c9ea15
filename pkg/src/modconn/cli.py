"""Command-line entry point: ``modconn <command> [options]``.

Exit codes: 0 success, 1 configuration error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import connectivity as conn
from .errors import CifarFormatError, ConfigError, NumericError
from .experiments import ExperimentConfig, rows_csv, run_experiment, sweep_k
from .graph import load_checkpoint, save_checkpoint
from .train import evaluate

logger = logging.getLogger("modconn")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "subset_size", None) is not None:
        cfg.subset_size = args.subset_size
    if getattr(args, "phases", None):
        cfg.epochs = tuple(int(v) for v in args.phases.split(","))
    if getattr(args, "out", None):
        cfg.out = args.out
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.prune:
        cfg.prune = True
    out = run_experiment(cfg, cfg.out)
    print(f"test top1 {out.test:.4f}")
    if out.report is not None:
        print(json.dumps(out.report.to_dict()))
    print(f"wrote {cfg.out}")
    return EXIT_OK


def _data_config(meta: dict, args) -> ExperimentConfig:
    extra = meta.get("extra", {})
    cfg = ExperimentConfig()
    cfg.dataset = args.dataset or extra.get("dataset", cfg.dataset)
    cfg.data_path = args.data or extra.get("data_path", cfg.data_path)
    cfg.subset_size = extra.get("subset_size", cfg.subset_size)
    cfg.synthetic_size = extra.get("synthetic_size", cfg.synthetic_size)
    cfg.seed = extra.get("seed", cfg.seed)
    return cfg


def cmd_eval(args) -> int:
    graph, meta = load_checkpoint(args.checkpoint)
    _, test = _data_config(meta, args).load_data()
    result = evaluate(graph, test)
    print(f"top1 {result.top1:.4f} loss {result.loss:.6f}")
    return EXIT_OK


def cmd_prune(args) -> int:
    graph, meta = load_checkpoint(args.checkpoint)
    pruned, report = conn.prune_unused(graph)
    target = Path(args.out) if args.out else Path(args.checkpoint).with_name("pruned.npz")
    save_checkpoint(pruned, target, rng_state=meta.get("rng_state"), extra=meta.get("extra"))
    target.with_suffix(".report.json").write_text(json.dumps(report.to_dict(), indent=2))
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def cmd_export_conn(args) -> int:
    graph, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "connectivity.json").write_text(conn.to_json(graph))
    (out / "connectivity.dot").write_text(conn.to_dot(graph))
    print(f"wrote {out / 'connectivity.json'} and {out / 'connectivity.dot'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all()
    for r in results:
        print(r)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_sweep_k(args) -> int:
    cfg = _load_config(args)
    ks = [int(v) for v in args.k.split(",")]
    rows = sweep_k(cfg, ks)
    text = rows_csv(rows)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep_k.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="modconn", description="Learn inter-module connectivity and weights jointly.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def experiment_flags(p):
        p.add_argument("--config", help="flat key = value experiment file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--subset-size", type=int, help="use only the first N training images")
        p.add_argument("--phases", help="comma-separated epochs per phase, e.g. 12,10,5,5")

    p = sub.add_parser("train", help="train a model and write checkpoint, metrics and connectivity")
    experiment_flags(p)
    p.add_argument("--prune", action="store_true", help="prune unused blocks after training")
    p.set_defaults(func=cmd_train)

    for name, func, text in (
        ("eval", cmd_eval, "print test top-1 of a checkpoint"),
        ("prune", cmd_prune, "remove blocks without an active path to the output"),
        ("export-conn", cmd_export_conn, "write connectivity as JSON and Graphviz DOT"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("checkpoint")
        if name == "eval":
            p.add_argument("--data", help="dataset path (default: the one recorded in the checkpoint)")
            p.add_argument("--dataset", choices=("cifar10", "cifar100", "blobs"))
        else:
            p.add_argument("--out")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="run every finite-difference gradient check")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep-k", help="accuracy and parameter count for several fan-in values")
    experiment_flags(p)
    p.add_argument("--k", required=True, help="comma-separated fan-in values")
    p.set_defaults(func=cmd_sweep_k)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CifarFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
