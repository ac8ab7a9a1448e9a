"""Command-line entry point: ``landmark-stn <command> ...``.

Exit status is 0 on success, 1 on a validation, configuration or format
error, and 2 on numeric divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DegenerateInputError, DimensionError, FormatError, NumericError
from .config import build_configs, dump_config, parse_text
from .synth import DatasetConfig, GeneratorConfig, load_split, write_dataset

log = logging.getLogger("landmark_stn")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2


def _configs(args):
    raw = parse_text(Path(args.config).read_text(), args.config) if args.config else {}
    raw.update(parse_text("\n".join(args.set or []), "--set"))
    overrides = {
        "epochs": args.epochs, "lr": args.lr, "seed": args.seed, "batch_size": args.batch_size,
        "checkpoint_interval": args.checkpoint_interval,
    }
    if args.data:
        overrides["dataset"] = str(args.data)
    cfg, tcfg = build_configs(raw, overrides)
    if not tcfg.dataset:
        raise ConfigError("no dataset given (use --data or dataset = ... in the config)")
    return cfg, tcfg


def _add_config_flags(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoint-interval", type=int)


def cmd_gen(args) -> int:
    cfg = DatasetConfig(train=args.train, val=args.val, test=args.test, seed=args.seed,
                        gen=GeneratorConfig(extent=args.extent))
    m = write_dataset(cfg, args.out)
    print(f"wrote {len(m.entries)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import build_model
    from .train import RunReport, evaluate, load_checkpoint, save_checkpoint, time_inference, train, write_report

    cfg, tcfg = _configs(args)
    out = Path(args.out)
    if tcfg.checkpoint_interval and not tcfg.checkpoint_dir:
        tcfg.checkpoint_dir = str(out / "checkpoints")
    data = Path(tcfg.dataset)
    train_data, val_data = load_split(data, "train"), load_split(data, "val")
    resume = None
    if args.resume:
        resume, cfg, _ = load_checkpoint(args.resume)
    state = train(build_model(cfg, tcfg.seed), cfg, train_data, tcfg, val=val_data, resume=resume)
    save_checkpoint(out / "model.ckpt", state, cfg, tcfg)
    (out / "config.txt").write_text(dump_config(cfg, tcfg))
    report = RunReport(state.history)
    test_seeds = None
    if not args.no_test:
        test = load_split(data, "test")
        report.test = evaluate(state.params, cfg, test)
        test_seeds = test.seeds
        if args.timing_passes:
            report.timing_ms = time_inference(state.params, cfg, test.images[:1], args.timing_passes)
        print(f"test PDL {report.test.pdl:.2f}")
    write_report(report, out, test_seeds)
    print(f"wrote {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import RunReport, evaluate, load_checkpoint, time_inference, write_report

    state, cfg, _ = load_checkpoint(args.checkpoint)
    data = load_split(args.data, args.split)
    rep = evaluate(state.params, cfg, data, args.threshold)
    report = RunReport(state.history, rep)
    if args.timing_passes:
        report.timing_ms = time_inference(state.params, cfg, data.images[:1], args.timing_passes)
    for row in report.summary_rows()[1:]:
        print(",".join(str(v) for v in row))
    for row in report.timing_rows()[1:] if report.timing_ms else []:
        print("timing," + ",".join(str(v) for v in row))
    if args.out:
        write_report(report, args.out, data.seeds)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck, tiny_config

    rep = gradcheck(tiny_config(), seed=args.seed or 0, tolerance=args.tolerance)
    print("\n".join(rep.lines()))
    print(f"{rep.seconds:.1f} s")
    return EXIT_OK if rep.passed else EXIT_INVALID


def cmd_ablate(args) -> int:
    from .ablate import ablate, write_ablation_csv

    cfg, tcfg = _configs(args)
    data = Path(tcfg.dataset)
    rows = ablate(cfg, load_split(data, "train"), load_split(data, "test"), tcfg, load_split(data, "val"),
                  groups=tuple(g.strip() for g in args.groups.split(",")))
    write_ablation_csv(rows, args.out)
    for r in rows:
        print(f"{r.group:12s} {r.variant:12s} {r.test_pdl:6.2f}")
    return EXIT_OK


def cmd_trace(args) -> int:
    from .model import forward
    from .train import load_checkpoint

    state, cfg, _ = load_checkpoint(args.checkpoint)
    data = load_split(args.data, args.split)
    ids = [int(s) for s in args.samples.split(",")]
    for i in ids:
        if not 0 <= i < len(data):
            raise DegenerateInputError(f"sample {i} out of range for split {args.split} ({len(data)} samples)")
    trace, _ = forward(state.params, cfg, data.images[ids])
    for k, i in enumerate(ids):
        print(f"# sample {i} seed {data.seeds[i]}")
        print(trace.dump(k))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="landmark-stn", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=1600)
    p.add_argument("--val", type=int, default=800)
    p.add_argument("--test", type=int, default=600)
    p.add_argument("--extent", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model and report test metrics")
    p.add_argument("--data", required=False)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--no-test", action="store_true")
    p.add_argument("--timing-passes", type=int, default=50)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, help="pixels (default scales 35 px at 512 px)")
    p.add_argument("--timing-passes", type=int, default=50)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check on the tiny model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score ablation variants")
    p.add_argument("--data", required=False)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--groups", default="chain,lambda,aggregation")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("trace", help="print per-step transforms for some samples")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", required=True, help="comma-separated sample indices")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_trace)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, FormatError, DegenerateInputError, DimensionError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
