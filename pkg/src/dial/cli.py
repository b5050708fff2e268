"""Command-line entry point: ``dial <subcommand> ...``.

Errors print one line ``error: <kind>: <message>`` to stderr.  Exit status is
0 on success, 2 for bad usage, configs, inputs or files, 1 for failures while
running (diverged training, failed gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .data import write_dataset_csv
from .errors import CompatibilityError, ConfigError, DialError, TrainingAborted
from .evaluate import ablation_json, ablation_tsv, evaluate, export_embeddings, run_ablation, source_retention
from .gradcheck import run_grad_check
from .trainer import Variant, resume, train

GRAD_TOLERANCE = 1e-4
RUNTIME_KINDS = {TrainingAborted.kind, "gradcheck"}


class _UsageError(DialError):
    kind = "usage"


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of printing usage and exiting."""

    def error(self, message):
        raise _UsageError(message)


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("need at least one seed")
    return seeds


def _variant(text: str) -> Variant:
    for v in Variant:
        if text.lower() in (v.value.lower(), v.name.lower()):
            return v
    raise argparse.ArgumentTypeError(f"unknown variant {text!r}; choose from {[v.value for v in Variant]}")


def _setup(args):
    ds_spec, cfg = load_config(args.config)
    overrides = {}
    for name in ("variant", "seed", "max_epochs"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return ds_spec, dataclasses.replace(cfg, **overrides) if overrides else cfg


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_gen_data(args) -> int:
    ds_spec, _ = _setup(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in write_dataset_csv(ds_spec.build(), out):
        print(p)
    _write(out / "dataset.json", json.dumps(ds_spec.to_dict(), indent=2) + "\n")
    return 0


def cmd_train(args) -> int:
    ds_spec, cfg = _setup(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = ds_spec.build()
    report_path = out / "report.jsonl"
    # stream records so a diverged run still leaves its history behind
    mode = "a" if args.resume else "w"
    with report_path.open(mode) as fh:
        def on_epoch(rec):
            fh.write(rec.to_json(timing=args.timing) + "\n")
            fh.flush()

        if args.resume:
            params, centers, report = resume(dataset, cfg, args.resume, args.start_epoch, on_epoch)
        else:
            params, centers, report = train(dataset, cfg, on_epoch=on_epoch)
    save_checkpoint(params, centers, out / "model.ckpt")
    _write(out / "config.json", json.dumps({"dataset": ds_spec.to_dict(), "train": cfg.to_dict()}, indent=2) + "\n")
    last = report.last() if report.records else None
    if last is not None:
        print(f"epoch {last.epoch}: source_acc {last.source_acc:.4f} target_acc {last.target_acc:.4f}"
              + (" (stopped early)" if report.stopped_early else ""))
    return 0


def cmd_eval(args) -> int:
    ds_spec, cfg = _setup(args)
    params, centers = load_checkpoint(args.checkpoint)
    dataset = ds_spec.build()
    if params.spec().encoder.widths[0] != dataset.input_dim:
        raise CompatibilityError(f"checkpoint expects input width {params.spec().encoder.widths[0]}, "
                                 f"dataset has {dataset.input_dim}")
    summary = evaluate(params, centers, dataset, cfg.threshold, probe_seed=cfg.seed)
    text = json.dumps(summary.to_dict(), indent=2) + "\n"
    if args.out:
        _write(Path(args.out), text)
    sys.stdout.write(text)
    return 0


def cmd_ablation(args) -> int:
    ds_spec, cfg = _setup(args)
    if len(args.seeds) < 2:
        raise ConfigError("ablation needs at least 2 seeds")
    results = run_ablation(ds_spec, cfg, args.seeds, args.workers)
    tsv = ablation_tsv(results)
    out = Path(args.out)
    _write(out / "ablation.tsv", tsv)
    _write(out / "ablation.json", ablation_json(results, cfg, ds_spec))
    sys.stdout.write(tsv)
    return 0


def cmd_retention(args) -> int:
    ds_spec, cfg = _setup(args)
    report = source_retention(ds_spec, cfg, args.seeds, args.workers)
    out = Path(args.out)
    _write(out / "retention.tsv", report.to_tsv())
    _write(out / "retention.json", json.dumps(report.to_dict(), indent=2) + "\n")
    sys.stdout.write(report.to_tsv())
    for key, gap in report.mean_gap.items():
        print(f"{key}: {100 * gap:+.2f} points")
    return 0


def cmd_export_embeddings(args) -> int:
    ds_spec, _ = _setup(args)
    params, _ = load_checkpoint(args.checkpoint)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    for p in export_embeddings(params, ds_spec.build(), args.out):
        print(p)
    return 0


def cmd_grad_check(args) -> int:
    worst = run_grad_check(args.draws, args.seed)
    for name, err in worst.items():
        print(f"{name}\t{err:.3e}")
    top = max(worst.values())
    print(f"max_relative_error\t{top:.3e}")
    if top >= GRAD_TOLERANCE:
        raise _GradFailure(f"max relative error {top:.3e} >= {GRAD_TOLERANCE:g}")
    return 0


class _GradFailure(DialError):
    kind = "gradcheck"


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dial", description="Adversarial domain adaptation with class-center alignment.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_, config=True):
        sp = sub.add_parser(name, help=help_)
        if config:
            sp.add_argument("--config", type=Path, help="TOML config (default: the blobs preset)")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "write the configured dataset as CSV files")
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train one model; writes model.ckpt, report.jsonl, config.json")
    sp.add_argument("--out", required=True)
    sp.add_argument("--variant", type=_variant)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--max-epochs", type=int)
    sp.add_argument("--resume", type=Path, help="checkpoint to continue from")
    sp.add_argument("--start-epoch", type=int, default=0)
    sp.add_argument("--timing", action="store_true", help="include wall_time in the report")

    sp = add("eval", cmd_eval, "evaluate a checkpoint; prints EvalSummary JSON")
    sp.add_argument("--checkpoint", required=True, type=Path)
    sp.add_argument("--seed", type=int, help="domain-probe seed")
    sp.add_argument("--out")

    for name, fn, help_ in (("ablation", cmd_ablation, "SourceOnly/GanOnly/GanCenter/Full over seeds"),
                            ("retention", cmd_retention, "source accuracy before and after adaptation")):
        sp = add(name, fn, help_)
        sp.add_argument("--seeds", type=_seeds, default=[1, 2, 3, 4, 5])
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--max-epochs", type=int)
        sp.add_argument("--out", required=True)

    sp = add("export-embeddings", cmd_export_embeddings, "encoder features of every split as CSV (+SVG if 2-D)")
    sp.add_argument("--checkpoint", required=True, type=Path)
    sp.add_argument("--out", required=True)

    sp = add("grad-check", cmd_grad_check, "finite-difference check of every differentiable op", config=False)
    sp.add_argument("--draws", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "train" and args.start_epoch and not args.resume:
            raise _UsageError("--start-epoch requires --resume")
        return args.fn(args)
    except DialError as exc:
        print(f"error: {exc.kind}: {_one_line(exc)}", file=sys.stderr)
        return 1 if exc.kind in RUNTIME_KINDS else 2
    except OSError as exc:
        print(f"error: io: {_one_line(exc)}", file=sys.stderr)
        return 2


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
