"""``gaitcaps`` command line: synth, train, eval, gradcheck, ablate, embed.

Exit codes are 0 on success, 1 on runtime failure and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional


from . import data, evaluation, gradcheck, training
from .config import CONV_SPECS, TrainConfig


DEFAULT_SEED = 42


class UsageError(Exception):
    """Bad flag values discovered after argparse succeeded."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _int_list(text: str) -> List[int]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a non-empty comma-separated list")
    try:
        return [int(t) for t in items]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of integers: {text!r}")


def _conditions(text: str):
    """``nm:4,bg:2`` -> dict; bare names use the default counts."""
    out = {}
    for tok in (t.strip() for t in text.split(",")):
        if not tok:
            continue
        name, _, count = tok.partition(":")
        name = name.lower()
        if name not in data.CONDITION_LABELS:
            raise argparse.ArgumentTypeError(f"unknown condition {name!r}")
        try:
            out[name] = int(count) if count else data.DEFAULT_CONDITIONS[name]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad sequence count in {tok!r}")
        if out[name] < 1:
            raise argparse.ArgumentTypeError(f"sequence count must be positive in {tok!r}")
    if not out:
        raise argparse.ArgumentTypeError("expected at least one condition")
    return out


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "freeze_pfe", False):
        cfg = cfg.replace(freeze_pfe=True)
    return cfg


def _load_index(path, layout: str) -> data.DatasetIndex:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory not found: {root}")
    index = data.load_dataset(root, layout)
    if not index.sequences:
        raise ValueError(f"no sequences found under {root}")
    return index


def _split_ids(index: data.DatasetIndex, n_train: Optional[int]):
    ids = index.identities
    if n_train is None:
        return index, None
    if not 2 <= n_train <= len(ids):
        raise UsageError(f"--train-ids must lie in [2, {len(ids)}], got {n_train}")
    rest = ids[n_train:]
    return index.subset(ids[:n_train]), (index.subset(rest) if rest else None)


def _held_out(index: data.DatasetIndex, ckpt: training.Checkpoint, all_ids: bool):
    """Test identities: those the checkpoint was not trained on, unless told otherwise."""
    if all_ids or not ckpt.classes:
        return index
    seen = set(ckpt.classes)
    rest = [i for i in index.identities if i not in seen]
    if not rest:
        raise ValueError("every identity in the data was a training class; pass --all-ids "
                         "to evaluate on them anyway")
    return index.subset(rest)


def _check_against_config(ckpt: training.Checkpoint, config_path) -> None:
    cfg = TrainConfig.from_file(config_path)
    want = training.param_shapes(cfg, ckpt.n_classes)
    have = {k: v.shape for k, v in ckpt.params.items()}
    problems = []
    for k in sorted(set(want) | set(have)):
        if want.get(k) != have.get(k):
            problems.append(f"{k}: checkpoint {have.get(k, 'absent')} vs config {want.get(k, 'absent')}")
    if problems:
        raise ValueError("checkpoint/config mismatch: " + "; ".join(problems))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    counts = data.synth_dataset(args.out, args.identities, args.views, args.conditions,
                                args.frames, args.seed)
    print(f"synth: identities={counts['identities']} sequences={counts['sequences']} "
          f"frames={counts['frames']} out={args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    index = _load_index(args.data, args.layout)
    train_index, _ = _split_ids(index, args.train_ids)
    loss_path = Path(args.loss_log) if args.loss_log else Path(str(args.out_checkpoint) + ".loss.txt")
    t0 = time.perf_counter()
    with open(loss_path, "w", encoding="utf-8") as fh:
        def pre(step, loss):
            fh.write(f"pretrain {step} {loss:.9g}\n")

        def full(step, loss):
            fh.write(f"train {step} {loss:.9g}\n")

        ckpt = training.train_full(train_index, cfg, on_step=full, on_pretrain_step=pre)
    training.save_checkpoint(ckpt, args.out_checkpoint)
    print(f"train: classes={len(ckpt.classes)} steps={cfg.pretrain_steps}+{cfg.train_steps} "
          f"seconds={time.perf_counter() - t0:.1f} checkpoint={args.out_checkpoint} "
          f"loss_log={loss_path}")
    return 0


def cmd_eval(args) -> int:
    ckpt = training.load_checkpoint(args.checkpoint)
    if args.config:
        _check_against_config(ckpt, args.config)
    index = _held_out(_load_index(args.data, args.layout), ckpt, args.all_ids)
    split = evaluation.build_protocol(index, args.protocol)
    report = evaluation.evaluate(ckpt, split)
    Path(args.report_out).write_text(report.to_csv(), encoding="utf-8")
    sys.stdout.write(report.summary())
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    only = [b.strip() for b in args.blocks.split(",") if b.strip()] if args.blocks else None
    if only is not None and not only:
        raise UsageError("--blocks needs at least one block name")
    try:
        results = gradcheck.run_all(args.scale, args.seed, only)
    except ValueError as exc:
        raise UsageError(str(exc))
    failing = []
    for name, err in results:
        ok = err < args.threshold
        print(f"{name:24s} max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
        if not ok:
            failing.append(name)
    print(f"gradcheck: {len(results)} blocks, {time.perf_counter() - t0:.1f}s")
    if failing:
        print(f"gradcheck failed: {', '.join(failing)} exceed {args.threshold:g}", file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    index = _load_index(args.data, args.layout)
    train_index, test_index = _split_ids(index, args.train_ids)
    if test_index is None:
        raise UsageError("--train-ids must leave at least one held-out identity")
    ckpt_dir = args.checkpoint_dir or str(Path(args.report_out).with_suffix("")) + "_ckpt"
    report = training.ablate(train_index, test_index, cfg, args.protocol, ckpt_dir)
    Path(args.report_out).write_text(report.to_csv(), encoding="utf-8")
    for v, row in report.rows.items():
        print(f"{v}: mean={row['mean']:.2f}")
    for v, err in report.errors.items():
        print(f"{v}: failed ({err})", file=sys.stderr)
    if not report.complete:
        print(f"ablate: report incomplete, written to {args.report_out}", file=sys.stderr)
        return 1
    print(f"ablate: report={args.report_out}")
    return 0


def cmd_embed(args) -> int:
    ckpt = training.load_checkpoint(args.checkpoint)
    index = _held_out(_load_index(args.data, args.layout), ckpt, args.all_ids)
    split = evaluation.build_protocol(index, args.protocol)
    n = evaluation.export_embeddings(split, ckpt, args.out_csv)
    print(f"embed: rows={n} out={args.out_csv}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gaitcaps", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic CASIA-B-layout dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--identities", type=int, required=True)
    s.add_argument("--views", type=_int_list, default=[0, 45, 90, 135])
    s.add_argument("--conditions", type=_conditions, default=None,
                   help="e.g. nm:6,bg:2,cl:2 (default) or nm:4")
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--seed", type=int, default=DEFAULT_SEED)
    s.set_defaults(func=cmd_synth)

    def data_flags(q):
        q.add_argument("--data", required=True)
        q.add_argument("--layout", choices=data.LAYOUTS, default="casia-b")

    t = sub.add_parser("train", help="phase 1 + phase 2 training")
    data_flags(t)
    t.add_argument("--config")
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--loss-log", help="default: <checkpoint>.loss.txt")
    t.add_argument("--train-ids", type=int, help="train on the first N identities only")
    t.add_argument("--freeze-pfe", action="store_true")
    t.add_argument("--seed", type=int, default=None, help="overrides the config seed (42)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="cross-view rank-1 evaluation")
    data_flags(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--protocol", choices=evaluation.PROTOCOLS, default="casia-b")
    e.add_argument("--report-out", required=True)
    e.add_argument("--config", help="verify the checkpoint against this config")
    e.add_argument("--all-ids", action="store_true", help="include training identities")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every block")
    g.add_argument("--scale", choices=sorted(CONV_SPECS), default="desk")
    g.add_argument("--threshold", type=float, default=gradcheck.THRESHOLD)
    g.add_argument("--seed", type=int, default=DEFAULT_SEED)
    g.add_argument("--blocks", help="comma-separated subset of blocks (default: all)")
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train and evaluate every architectural variant")
    data_flags(a)
    a.add_argument("--config")
    a.add_argument("--report-out", required=True)
    a.add_argument("--checkpoint-dir")
    a.add_argument("--protocol", choices=evaluation.PROTOCOLS, default="synthetic")
    a.add_argument("--train-ids", type=int, required=True)
    a.add_argument("--seed", type=int, default=None)
    a.set_defaults(func=cmd_ablate)

    m = sub.add_parser("embed", help="export per-sequence embeddings as CSV")
    data_flags(m)
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--out-csv", required=True)
    m.add_argument("--protocol", choices=evaluation.PROTOCOLS, default="casia-b")
    m.add_argument("--all-ids", action="store_true")
    m.set_defaults(func=cmd_embed)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gaitcaps: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("gaitcaps: interrupted", file=sys.stderr)
        return 1
    except (OSError, ValueError, FloatingPointError, MemoryError) as exc:
        print(f"gaitcaps {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
