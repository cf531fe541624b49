"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 failed
numerical check.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import checkpoint as ckpt_io
from .errors import (
    CheckpointError,
    ContractError,
    DataError,
    NumericalError,
    ShapeError,
    SpecError,
)
from .evalkit import DEFAULT_METRICS, DEFAULT_SPLITS, EvalReport, alpha_sweep, evaluate_checkpoint
from .experiment import format_table, robustness_checks, run_seed
from .gradcheck import run_all
from .synthdata import SPLITS, RecordSet, TaskSpec, TaskWorld, gen_split, read_spec, read_split, write_dataset
from .synthdata import _atomic_write_text
from .trainer import TrainConfig, finetune, pretrain, pretrain_defaults

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# fields whose default is None but which take integers
_OPTIONAL_INT = {"warmup_steps", "rank"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_dataclass_flags(parser: argparse.ArgumentParser, cls, defaults, skip=("seed",)) -> None:
    """One kebab-case flag per dataclass field; defaults come from ``defaults``."""
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        if f.name in _OPTIONAL_INT:
            parser.add_argument(flag, type=int, default=default)
        elif isinstance(default, bool):
            parser.add_argument(flag, action=argparse.BooleanOptionalAction, default=default)
        else:
            parser.add_argument(flag, type=type(default), default=default)


def _dataclass_from_args(cls, args, **extra):
    values = {f.name: getattr(args, f.name) for f in dataclasses.fields(cls) if hasattr(args, f.name)}
    values.update(extra)
    return cls(**values)


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from exc


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _load_data(data_dir, splits) -> tuple[TaskSpec, dict[str, RecordSet]]:
    spec = read_spec(data_dir)
    return spec, {s: RecordSet(read_split(data_dir, s)) for s in splits}


def _write_report(report: EvalReport, out) -> None:
    text = report.to_csv()
    if out is None:
        sys.stdout.write(text)
    else:
        _atomic_write_text(Path(out), text)


def _provenance(seed: int, spec: TaskSpec, cfg: TrainConfig, **extra) -> dict:
    prov = {"seed": seed, "config_hash": ckpt_io.config_hash({"spec": spec.to_dict(), "train": cfg.to_dict()}),
            "train_config": cfg.to_dict(), "task_spec": spec.to_dict()}
    prov.update(extra)
    return prov


def cmd_gen_data(args) -> int:
    spec = _dataclass_from_args(TaskSpec, args, seed=args.seed)
    write_dataset(args.out, spec, gen_split(spec))
    print(f"wrote {', '.join(SPLITS)} to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    spec, data = _load_data(args.data, ["pretrain"])
    cfg = _dataclass_from_args(TrainConfig, args, seed=args.seed)
    res = pretrain(data["pretrain"], spec, cfg, steps=args.steps)
    for line in res.epoch_log:
        print(line)
    ckpt_io.save(ckpt_io.checkpoint_from_model(res.model, None, _provenance(args.seed, spec, cfg)), args.out)
    return EXIT_OK


def cmd_finetune(args) -> int:
    spec, data = _load_data(args.data, ["id_train"])
    base = ckpt_io.load(args.base)
    model, bank = ckpt_io.model_from_checkpoint(base)
    if bank is not None:
        raise CheckpointError("base checkpoint already carries adapters")
    cfg = _dataclass_from_args(TrainConfig, args, seed=args.seed)
    res = finetune(model, data["id_train"], spec, cfg, steps=args.steps)
    for line in res.epoch_log:
        print(line)
    prov = _provenance(args.seed, spec, cfg, base=base.digest())
    ckpt_io.save(ckpt_io.checkpoint_from_model(res.model, res.bank, prov), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    spec, data = _load_data(args.data, args.splits)
    ckpt = ckpt_io.load(args.ckpt)
    if ckpt.adapters is not None:
        if args.alpha is None:
            raise CheckpointError("checkpoint carries adapters; pass --alpha or merge it first")
        ckpt = ckpt_io.merge_checkpoint(ckpt, args.alpha, use_ema=not args.raw)
    report = evaluate_checkpoint(ckpt, TaskWorld(spec), data, args.splits, args.metrics)
    _write_report(report.sorted(), args.out)
    return EXIT_OK


def cmd_merge(args) -> int:
    merged = ckpt_io.merge_checkpoint(ckpt_io.load(args.ckpt), args.alpha, use_ema=not args.raw)
    ckpt_io.save(merged, args.out)
    print(f"merged alpha={args.alpha} weights={'raw' if args.raw else 'ema'} -> {args.out}")
    return EXIT_OK


def cmd_sweep_alpha(args) -> int:
    spec, data = _load_data(args.data, args.splits)
    base = ckpt_io.load(args.base) if args.base else None
    report = alpha_sweep(base, ckpt_io.load(args.finetuned), args.alphas, TaskWorld(spec), data, args.splits,
                         args.metrics, use_ema=not args.raw)
    _write_report(report, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_all(args.seed)
    worst: dict[str, tuple[float, float]] = {}
    for r in results:
        comp = r.name.split(".")[0]
        err, tol = worst.get(comp, (0.0, r.tol))
        worst[comp] = (max(err, r.error), tol)
    for r in results if args.verbose else []:
        print(f"{r.name} max_rel_err={r.error:.3e} tol={r.tol:.0e} {'ok' if r.ok else 'FAIL'}")
    for comp, (err, tol) in worst.items():
        print(f"{comp} max_rel_err={err:.3e} tol={tol:.0e} {'ok' if err <= tol else 'FAIL'}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_robustness(args) -> int:
    results = []
    for seed in args.seeds:
        results.append(run_seed(seed, pretrain_cfg=pretrain_defaults(epochs=args.pretrain_epochs)))
        print(f"seed={seed} wall_s={results[-1].seconds:.1f}", file=sys.stderr)
    table = format_table(results)
    if args.out:
        _atomic_write_text(Path(args.out), table)
    else:
        sys.stdout.write(table)
    for name, (ok, detail) in robustness_checks(results).items():
        print(f"{name} {'ok' if ok else 'FAIL'} {detail}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="radapter", description="Residual adapters for a toy dual encoder.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="render the synthetic dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True, help="output directory")
    _add_dataclass_flags(g, TaskSpec, TaskSpec())
    g.set_defaults(func=cmd_gen_data)

    for name, defaults, func in (("pretrain", pretrain_defaults(), cmd_pretrain),
                                 ("finetune", TrainConfig(), cmd_finetune)):
        t = sub.add_parser(name, help=f"{name} and write a checkpoint")
        t.add_argument("--seed", type=int, required=True)
        t.add_argument("--data", required=True, help="dataset directory")
        t.add_argument("--out", required=True, help="output checkpoint")
        t.add_argument("--steps", type=int, default=None, help="override the step count")
        if name == "finetune":
            t.add_argument("--base", required=True, help="pretrained checkpoint")
        _add_dataclass_flags(t, TrainConfig, defaults)
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--alpha", type=float, default=None, help="merge coefficient for adapter checkpoints")
    e.add_argument("--raw", action="store_true", help="merge raw adapter weights instead of EMA shadows")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("merge", help="fold adapters into the backbone")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--alpha", type=float, default=0.5)
    m.add_argument("--raw", action="store_true", help="use raw adapter weights instead of EMA shadows")
    m.set_defaults(func=cmd_merge)

    s = sub.add_parser("sweep-alpha", help="merge and evaluate over a grid of alphas")
    s.add_argument("--finetuned", required=True)
    s.add_argument("--base", default=None, help="pretrained checkpoint, checked for a matching architecture")
    s.add_argument("--data", required=True)
    s.add_argument("--alphas", type=_float_list, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    s.add_argument("--raw", action="store_true")
    s.set_defaults(func=cmd_sweep_alpha)

    for sp in (e, s):
        sp.add_argument("--splits", type=_str_list, default=list(DEFAULT_SPLITS))
        sp.add_argument("--metrics", type=_str_list, default=list(DEFAULT_METRICS))
        sp.add_argument("--out", default=None, help="CSV path (stdout when omitted)")

    r = sub.add_parser("robustness", help="multi-seed pretrain, fine-tune and alpha sweep")
    r.add_argument("--seeds", type=lambda t: [int(x) for x in _float_list(t)], default=[0, 1, 2, 3, 4])
    r.add_argument("--pretrain-epochs", type=int, default=pretrain_defaults().epochs)
    r.add_argument("--out", default=None, help="CSV path (stdout when omitted)")
    r.set_defaults(func=cmd_robustness)

    c = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--verbose", action="store_true", help="print every tensor")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, SpecError, ShapeError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
