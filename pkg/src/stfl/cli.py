"""Command line: ``python -m stfl {split,train-vae,run,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .data import write_csv
from .nn import TrainConfig
from .runner import (
    METHODS,
    TRANSPORTS,
    ExperimentConfig,
    load_dataset,
    parse_records,
    prepare,
    report,
    run_experiment,
    split_spec,
)
from .vae import VaeSizing, save_vae, train_vae


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config; its values override flags")
    p.add_argument("--dataset", default="cancer", help="cancer, payment, credit or a CSV path")
    p.add_argument("--data-dir", help="directory holding payment.csv / credit.csv")
    p.add_argument("--id-column", default="id")
    p.add_argument("--label-column", default="y")
    p.add_argument("--subsample", type=int)
    p.add_argument("--n-guests", type=int, default=1)
    p.add_argument("--seed", type=int, action="append", dest="seeds",
                   help="repeatable; defaults to 5 seeds (0-4)")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--vae-epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--transport", choices=TRANSPORTS, default="in-process")
    p.add_argument("--out", dest="output_dir")


def _config(args, method: str) -> ExperimentConfig:
    flags = {
        "method": method,
        "dataset": args.dataset,
        "data_dir": args.data_dir,
        "id_column": args.id_column,
        "label_column": args.label_column,
        "subsample": args.subsample,
        "n_guests": args.n_guests,
        "epochs": args.epochs,
        "vae_epochs": args.vae_epochs,
        "batch_size": args.batch_size,
        "transport": args.transport,
        "output_dir": args.output_dir,
    }
    for name in ("all_data", "key_bits", "psi_mode", "latent_mode"):
        if getattr(args, name, None) is not None:
            flags[name] = getattr(args, name)
    if args.seeds:
        flags["seeds"] = args.seeds
    if args.config:
        return ExperimentConfig.from_json(args.config, flags)
    return ExperimentConfig.from_dict(flags)


def cmd_split(args) -> int:
    cfg = _config(args, "stfl")
    ds = load_dataset(cfg)
    spec = split_spec(cfg, ds)
    from .data import PartitionSpec, partition, vertical_split

    host, guests = vertical_split(ds, spec)
    st, tr, te = partition(ds.ids, PartitionSpec(*cfg.fractions, seed=cfg.seeds[0]))
    out = Path(args.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_csv(host, out / "host.csv")
    for k, g in enumerate(guests, 1):
        write_csv(g, out / f"guest{k}.csv")
    (out / "partition.json").write_text(json.dumps({"self_taught": st, "train": tr, "test": te}))
    print(f"host: {host.n_features} features, {len(guests)} guest(s); "
          f"partition {len(st)}/{len(tr)}/{len(te)} written to {out}")
    return 0


def cmd_train_vae(args) -> int:
    cfg = _config(args, "stfl")
    seed = cfg.seeds[0]
    prep = prepare(cfg, seed)
    taught = prep.self_taught[args.guest - 1]
    model = train_vae(taught.features, VaeSizing(taught.n_features),
                      TrainConfig(cfg.learning_rate, cfg.batch_size, cfg.vae_epochs, seed))
    path = Path(args.model or f"guest{args.guest}.vae")
    fp = save_vae(model, path)
    log = model.training_log
    print(f"guest {args.guest}: loss {log[0].total:.4f} -> {log[-1].total:.4f}; saved {path} ({fp[:16]})")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args, args.method)
    reports = run_experiment(cfg)
    text, records = report(reports)
    print(text, end="")
    if args.jsonl:
        sys.stdout.write(records)
    return 0


def cmd_report(args) -> int:
    reports = []
    for path in args.files:
        reports.extend(parse_records(Path(path).read_text()))
    text, _ = report(reports)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m stfl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="write per-party CSVs and the partition")
    _common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-vae", help="self-train one guest's VAE and save it")
    _common(p)
    p.add_argument("--guest", type=int, default=1)
    p.add_argument("--model", help="output file (default guest<k>.vae)")
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("run", help="run one method over the configured seeds")
    p.add_argument("method", choices=METHODS)
    _common(p)
    p.add_argument("--all-data", action="store_true", default=None)
    p.add_argument("--key-bits", type=int)
    p.add_argument("--psi-mode", choices=("blinded", "naive"))
    p.add_argument("--latent-mode", choices=("mean", "sample"))
    p.add_argument("--jsonl", action="store_true", help="also print JSON records")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="tables from one or more reports.jsonl files")
    p.add_argument("files", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
