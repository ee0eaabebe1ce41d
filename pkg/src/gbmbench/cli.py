"""Command-line entry point: ``gbmbench <subcommand> [options]``.

Exit codes: 0 success, 1 user error (bad flags, bad config, bad inputs),
2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import load_config, schema_markdown
from .errors import GBMBenchError, UserError

log = logging.getLogger("gbmbench")


class UsageError(UserError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat TOML config file (see `gbmbench config-schema`)")
    p.add_argument("--seed", type=int, help="master seed (config key `seed`)")
    p.add_argument("--workdir", help="working directory (config key `workdir`)")
    p.add_argument("--data-root", help="cohort root (config key `data_root`)")
    p.add_argument("--stages", help="comma-separated stages, e.g. first,second")
    p.add_argument("--families", help="comma-separated model families")
    p.add_argument("--set", dest="overrides", action="append", type=_kv, default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gbmbench", description="Follow-up MRI classification benchmark toolkit")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _common(p)
        return p

    add("scan", "index a cohort directory into manifest.json")
    add("qc", "geometry QC and best-series selection")
    add("label", "consolidate per-visit labels into one label per patient")
    add("prep", "resample, skull-strip, register and z-score the selected volumes")
    add("split", "patient-level stratified folds per stage")
    add("balance", "fold-local autoencoder + latent SMOTE plans")
    p = add("train", "train and evaluate one (family, stage, batch, seed, fold) unit")
    p.add_argument("--family", required=True)
    p.add_argument("--stage", default="first")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--train-seed", type=int, default=21)
    p.add_argument("--fold", type=int, default=0)
    add("sweep", "run every pending unit of the configured grid (runs missing steps first)")
    p = add("profile", "parameter and FLOP counts per family")
    p.add_argument("--scale", choices=["PAPER", "TOY"], default="PAPER")
    p.add_argument("--batch", type=int, default=1)
    p = add("report", "tables, plots and galleries from stored results")
    p.add_argument("--format", default="csv,md", help="comma-separated: csv, md")
    p = add("phantom", "write a seeded synthetic cohort")
    p.add_argument("--n", type=int, default=30, help="number of patients")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--missing-second", type=int, default=0, help="patients without a second follow-up")
    p.add_argument("--bad-geometry", type=float, default=0.1, help="fraction of patients with a thick-slice series")
    p = add("zoo", "list or describe model families")
    p.add_argument("action", choices=["list", "describe"])
    p.add_argument("family", nargs="?")
    add("config-schema", "print the config keys as a markdown table")
    return parser


def _config(args):
    overrides = dict(args.overrides)
    for flag, key in (("seed", "seed"), ("workdir", "workdir"), ("data_root", "data_root"),
                      ("stages", "stages"), ("families", "families")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = val
    return load_config(args.config, overrides)


def _run(args) -> int:
    from . import pipeline as pl

    cmd = args.command
    if cmd == "config-schema":
        print(schema_markdown())
        return 0
    if cmd == "zoo":
        from .zoo import LABELS, Family, describe

        if args.action == "list":
            for fam in Family:
                print(f"{fam.value:12s} {LABELS[fam]}")
            return 0
        if not args.family:
            raise UsageError("zoo describe: missing family name")
        print(json.dumps(describe(args.family), indent=1))
        return 0
    if cmd == "phantom":
        from .cohort import generate_phantom_cohort

        seed = 42 if args.seed is None else args.seed
        m = generate_phantom_cohort(args.n, seed, args.out, size=args.size, n_missing_second=args.missing_second,
                                    bad_geometry_fraction=args.bad_geometry)
        print(f"wrote {len(m.patients)} patients, {len(m.series)} series to {args.out}")
        return 0

    cfg = _config(args)
    if cmd == "scan":
        m = pl.step_scan(cfg, force=True)
        print(f"{len(m.series)} series, {len(m.patients)} patients, {len(m.orphans)} orphans; hash {m.content_hash[:12]}")
    elif cmd == "qc":
        sel = pl.step_qc(cfg, force=True)
        print(f"{sum(v is not None for v in sel.values())}/{len(sel)} patient-timepoints have a selected series")
    elif cmd == "label":
        labels = pl.step_label(cfg, force=True)
        print(f"{len(labels)} patients labelled -> {pl.workdir_of(cfg).labels}")
    elif cmd == "prep":
        for stage, c in pl.step_prep(cfg, force=True).items():
            print(f"{stage}: {len(c.samples)} prepared, {len(c.excluded)} excluded")
    elif cmd == "split":
        for stage, f in pl.step_split(cfg, force=True).items():
            sizes = [len(f.val_patients(i)) for i in range(f.k)]
            print(f"{stage}: {f.k} folds, sizes {sizes}")
    elif cmd == "balance":
        paths = pl.step_balance(cfg)
        print(f"{len(paths)} sample plans written")
    elif cmd == "train":
        for rec in pl.step_train(cfg, args.family, args.stage, args.batch, args.train_seed, args.fold):
            print(json.dumps({k: rec[k] for k in ("unit", "final_loss", "metrics")}, indent=1))
    elif cmd == "sweep":
        rep = pl.step_sweep(cfg)
        print(f"executed {len(rep.executed)}, failed {len(rep.failed)}, skipped {len(rep.skipped)}"
              + (" (stopped at max_units; rerun to resume)" if rep.interrupted else ""))
        pl.step_report(cfg)
        print(f"report written to {pl.workdir_of(cfg).report}")
    elif cmd == "profile":
        if args.scale == "PAPER":
            path = pl.step_profile(cfg)
            print((path.parent / "reference_complexity.md").read_text())
        else:
            profiles = pl.profile_specs(pl.model_specs(cfg.with_overrides({"scale": "TOY"})), args.batch,
                                        n_timed=cfg.timing_batches)
            for key, p in profiles.items():
                print(f"{key:14s} params {p['params']:>10d}  GFLOPs {p['flops_per_sample'] / 1e9:.4f}  "
                      f"batch time {p['batch_time_mean_s']:.4f} s")
    elif cmd == "report":
        for p in pl.step_report(cfg, [f.strip() for f in args.format.split(",") if f.strip()]):
            print(p)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.WARNING - 10 * min(2, getattr(args, "verbose", 0)),
            format="%(levelname)s %(name)s: %(message)s",
        )
        return _run(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except GBMBenchError as exc:
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
