"""``melora`` command line.

Exit codes: 0 success, 1 verification or training failure, 2 usage error,
3 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import yaml

from . import checkpoint
from .analysis import (
    ModelShape, audit_params, block_diag_stack_rank, get_preset, humanize_count,
    load_presets, profiles_csv, rank_profile, serial_stack_rank_demo,
)
from .adapters import equivalent_rank
from .checks import SABOTAGE_MODES, run_checks
from .errors import CheckpointFormatError, DivergenceError, DivisibilityError
from .harness import ExperimentConfig, run_single, run_sweep

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("melora")


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _emit(text: str, out: str | None) -> None:
    if out:
        checkpoint.atomic_write(out, text)
    else:
        sys.stdout.write(text)


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def cmd_verify(args) -> int:
    results = run_checks(args.seed, args.filter, args.sabotage)
    if not results:
        print(f"no checks match filter {args.filter!r}", file=sys.stderr)
        return EXIT_USAGE
    width = max(len(name) for name, _, _ in results)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}")
    failed = [name for name, ok, _ in results if not ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed"
          + (f"; failed: {', '.join(failed)}" if failed else ""))
    if args.out:
        rows = [["check", "outcome", "detail"]]
        rows += [[name, "pass" if ok else "fail", detail] for name, ok, detail in results]
        checkpoint.atomic_write(args.out, _csv(rows))
    return EXIT_FAIL if failed else EXIT_OK


def _shape_from_args(args) -> ModelShape:
    if args.preset:
        return get_preset(args.preset)
    if args.d is None or args.layers is None:
        raise ValueError("give --preset, or both --d and --layers")
    return ModelShape.square(args.d, args.layers, [m for m in args.matrices.split(",") if m])


def cmd_count_params(args) -> int:
    shape = _shape_from_args(args)
    n = 1 if args.mode == "lora" else args.n
    total = audit_params(shape, args.mode, n, args.r)
    print(f"{total} (~{humanize_count(total)})")
    if shape.full_params:
        print(f"full fine-tuning: {humanize_count(shape.full_params)} (preset metadata)")
    if args.out:
        rows = [["shape", "mode", "n", "r_mini", "params", "equivalent_rank"],
                [shape.name, args.mode, n, args.r, total, equivalent_rank(n, args.r)]]
        checkpoint.atomic_write(args.out, _csv(rows))
    return EXIT_OK


def cmd_analyze_rank(args) -> int:
    profiles = []
    for path in args.checkpoint:
        adapter = checkpoint.load(path)
        profiles.append(rank_profile(adapter, args.threshold, scaled=not args.unscaled,
                                     name=Path(path).stem))
    _emit(profiles_csv(profiles), args.out)
    return EXIT_OK


def cmd_demo_rank(args) -> int:
    diag = block_diag_stack_rank(args.num_stacked, args.r, args.d, args.seed)
    rows = [["overlap", "num_stacked", "r", "d", "serial_rank", "block_diag_rank"]]
    for overlap in args.overlaps:
        serial = serial_stack_rank_demo(args.num_stacked, args.r, args.d, overlap, args.seed)
        rows.append([overlap, args.num_stacked, args.r, args.d, serial, diag])
    _emit(_csv(rows), args.out)
    return EXIT_OK


CONFIG_FLAGS = ("task", "mode", "alpha", "dropout", "lr", "warmup", "weight_decay", "steps",
                "batch", "d", "k", "teacher", "teacher_blocks", "threshold", "workers")


def _config_from_args(args, sweep: bool) -> ExperimentConfig:
    overrides = {k: getattr(args, k) for k in CONFIG_FLAGS if getattr(args, k, None) is not None}
    if not sweep and any(v is not None and len(v) > 1 for v in (args.n, args.r)):
        raise ValueError("train takes a single n and r_mini; use sweep for lists")
    if args.n is not None:
        overrides["n"] = args.n if sweep else args.n[0]
    if args.r is not None:
        overrides["r_mini"] = args.r if sweep else args.r[0]
    if overrides.get("mode") == "lora" and args.n is None:
        overrides["n"] = 1
    if args.seeds:
        overrides["seeds"] = args.seeds
    if args.config:
        file_data = yaml.safe_load(Path(args.config).read_text()) or {}
        if "seeds" not in overrides and "seeds" not in file_data:
            overrides["seeds"] = [args.seed]
        return ExperimentConfig.from_file(args.config, **overrides)
    overrides.setdefault("seeds", [args.seed])
    return ExperimentConfig(**overrides)


def cmd_train(args) -> int:
    config = _config_from_args(args, sweep=False)
    if len(config.grid()) != 1:
        raise ValueError("train takes a single n and r_mini; use sweep for lists")
    result = run_single(config, config.seed)
    print(f"task={config.task} mode={config.mode} n={config.n} r_mini={config.r_mini} "
          f"seed={config.seed} params={result.params} equiv_rank={result.equiv_rank}")
    print(f"final_metric={result.final_metric!r} sv_count={result.sv_count}")
    for key, value in result.extra.items():
        print(f"{key}={value!r}")
    _emit(result.train_report.to_csv(timing=not args.no_timing), args.out)
    if args.save_checkpoint:
        if config.task == "attention":
            raise ValueError("--save-checkpoint supports single-matrix tasks only")
        adapter = config.make_adapter(config.seed)
        for dst, src in zip(adapter.parameters(), result.train_report.final_params):
            dst[:] = src
        checkpoint.save(adapter, args.save_checkpoint)
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _config_from_args(args, sweep=True)
    _emit(run_sweep(config, timing=not args.no_timing), args.out or config.out)
    return EXIT_OK


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=42, help="random seed")
    p.add_argument("--out", default=None, help="output file (written atomically); stdout if omitted")


def _experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="YAML experiment config (flat keys and lists)")
    p.add_argument("--task", choices=["recovery", "classify", "attention"], default=None)
    p.add_argument("--mode", choices=["lora", "melora"], default=None)
    p.add_argument("--n", type=_int_list, default=None, help="mini LoRA count(s), comma separated")
    p.add_argument("--r", type=_int_list, default=None, help="rank(s) per mini LoRA, comma separated")
    p.add_argument("--seeds", type=_int_list, default=None, help="seed list; overrides --seed")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--warmup", type=int, default=None, help="warmup steps")
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--d", type=int, default=None, help="feature dimension")
    p.add_argument("--k", type=int, default=None, help="teacher update rank")
    p.add_argument("--teacher", choices=["block", "dense"], default=None)
    p.add_argument("--teacher-blocks", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None, help="singular value threshold")
    p.add_argument("--no-timing", action="store_true", help="write 0 in wall_ms for byte-stable output")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="melora", formatter_class=fmt,
                                     description="LoRA / MELoRA adapters: audits, rank analysis, training")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", formatter_class=fmt, help="run the invariant checks")
    _common(p)
    p.add_argument("--filter", default=None, help="run only checks whose name contains this")
    p.add_argument("--sabotage", choices=SABOTAGE_MODES, default=None,
                   help="test hook: break one construction on purpose")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("count-params", formatter_class=fmt, help="audit trainable parameters")
    _common(p)
    p.add_argument("--preset", choices=sorted(load_presets()), default=None)
    p.add_argument("--d", type=int, default=None, help="hidden size for a custom square shape")
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--matrices", default="Q,V", help="adapted matrices per layer")
    p.add_argument("--mode", choices=["lora", "melora"], default="lora")
    p.add_argument("--n", type=int, default=1, help="number of mini LoRAs")
    p.add_argument("--r", type=int, default=8, help="rank (per mini LoRA for melora)")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("analyze-rank", formatter_class=fmt,
                       help="count singular values of checkpointed updates above a threshold")
    _common(p)
    p.add_argument("--checkpoint", nargs="+", required=True, help="MELR checkpoint file(s)")
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--unscaled", action="store_true", help="omit the alpha/r factor")
    p.set_defaults(func=cmd_analyze_rank)

    p = sub.add_parser("demo-rank", formatter_class=fmt,
                       help="serial stacking vs block-diagonal rank")
    _common(p)
    p.add_argument("--num-stacked", type=int, default=4)
    p.add_argument("--r", type=int, default=2)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--overlaps", type=_float_list, default=[0.0, 0.5, 1.0])
    p.set_defaults(func=cmd_demo_rank)

    p = sub.add_parser("train", formatter_class=fmt, help="train one adapter on a harness task")
    _common(p)
    _experiment_flags(p)
    p.add_argument("--save-checkpoint", default=None, help="write the trained adapter (MELR format)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", formatter_class=fmt, help="grid over n, r_mini and seeds to CSV")
    _common(p)
    _experiment_flags(p)
    p.add_argument("--workers", type=int, default=None, help="parallel worker threads")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CheckpointFormatError as exc:
        print(f"error: checkpoint format: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (DivisibilityError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
