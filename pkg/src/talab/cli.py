"""Command-line interface: gen-data, train, attack, sweep, report.

Exit codes: 0 ok, 2 configuration error, 3 numeric error, 4 io/format
error.  Every config-file key is exposed as ``--<section>.<key>`` on the
attack and sweep subcommands and overrides the file value.
"""

from __future__ import annotations

import argparse
import csv
import sys

from . import __version__
from .configfile import (
    DEFAULTS,
    build_experiment_config,
    merge_settings,
    parse_number,
    read_config_file,
)
from .datasets import generate_dataset, load_dataset, save_dataset
from .errors import ConfigurationError, FormatError, NumericError
from .experiments import run_experiment, sweep, write_csv, rows_to_csv
from .models import ArchSpec, build_model, save_weights, train_model


def _add_override_flags(parser: argparse.ArgumentParser):
    for section, keys in DEFAULTS.items():
        for key in keys:
            parser.add_argument(
                f"--{section}.{key}",
                dest=f"{section}__{key}",
                default=None,
                metavar="V",
                help=argparse.SUPPRESS,
            )


def _collect_overrides(args) -> dict:
    out: dict[str, dict[str, str]] = {}
    for section, keys in DEFAULTS.items():
        for key in keys:
            value = getattr(args, f"{section}__{key}", None)
            if value is not None:
                out.setdefault(section, {})[key] = value
    return out


def _settings_from_args(args) -> dict:
    layers = []
    if args.config:
        layers.append(read_config_file(args.config))
    layers.append(_collect_overrides(args))
    return merge_settings(*layers)


def cmd_gen_data(args) -> int:
    data = generate_dataset(
        seed=args.seed,
        n=args.n,
        height=args.height,
        width=args.width,
        channels=args.channels,
        classes=args.classes,
    )
    save_dataset(data, args.out)
    print(f"wrote {data.count} images ({args.height}x{args.width}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    data = load_dataset(args.dataset)
    spec = ArchSpec(
        args.arch,
        input_shape=data.images.shape[1:],
        classes=data.classes,
    )
    model = build_model(spec, seed=args.init_seed)
    report = train_model(
        model,
        data.images,
        data.labels,
        epochs=args.epochs,
        lr=args.lr,
        seed=args.train_seed,
    )
    save_weights(model, args.out)
    print(
        f"{args.arch}: train acc {report.train_accuracy:.4f}, "
        f"holdout acc {report.holdout_accuracy:.4f} "
        f"({report.epochs} epochs) -> {args.out}"
    )
    return 0


def cmd_attack(args) -> int:
    config = build_experiment_config(_settings_from_args(args))
    report, rows = run_experiment(config)
    if config.output:
        write_csv(rows, config.output)
    else:
        sys.stdout.write(rows_to_csv(rows))
    print(
        f"# whitebox {report.whitebox_rate:.4f}  "
        f"mean transfer {report.mean_transfer:.4f}  "
        f"wall {report.wall_seconds:.1f}s",
        file=sys.stderr,
    )
    return 0


def cmd_sweep(args) -> int:
    config = build_experiment_config(_settings_from_args(args))
    values = [parse_number(v) for v in args.values.split(",") if v.strip()]
    rows = sweep(config, args.axis, values)
    if config.output:
        write_csv(rows, config.output)
    else:
        sys.stdout.write(rows_to_csv(rows))
    return 0


def cmd_report(args) -> int:
    with open(args.csv, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        print("empty CSV")
        return 0
    columns = ["method", "tricks", "axis", "axis_value", "victim", "transfer_asr"]
    widths = {
        c: max(len(c), max(len(r[c]) for r in rows)) for c in columns
    }
    header = "  ".join(c.ljust(widths[c]) for c in columns)
    print(header)
    print("-" * len(header))
    for row in rows:
        print("  ".join(row[c].ljust(widths[c]) for c in columns))
    # gnuplot-ready blocks: axis_value vs transfer rate per (method, victim)
    groups: dict[tuple, list] = {}
    for row in rows:
        if row["axis"] != "-" and row["victim"] != "mean":
            groups.setdefault((row["method"], row["victim"]), []).append(row)
    for (method, victim), items in groups.items():
        print(f"\n# {method} -> {victim}")
        for row in items:
            print(f"{row['axis_value']} {row['transfer_asr']}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="talab",
        description="toy adversarial-transferability laboratory",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the procedural glyph dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=4000)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one zoo model on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--arch", required=True)
    p.add_argument("--init-seed", type=int, default=0)
    p.add_argument("--train-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.08)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="run one attack experiment")
    p.add_argument("--config", default=None)
    _add_override_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="sweep one hyper-parameter axis")
    p.add_argument("--config", default=None)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    _add_override_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render a results CSV as text tables")
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except (FormatError, OSError) as exc:
        print(f"io/format error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
