"""Command-line driver: ``addgcn {train,eval,ablate,export-maps,dump-adjacency}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import TrainConfig, format_config, load_config
from .data import load_feature_dataset
from .errors import ConfigError
from .export import dump_adjacency, export_maps
from .metrics import evaluate, per_class_ap, read_score_jsonl, write_score_jsonl
from .train import ABLATION_AXES, Checkpoint, ablate, load_datasets, predict, train

def _dataset_for(ckpt: Checkpoint, data: str | None):
    """The index at ``data``, else the checkpoint config's eval split."""
    if data:
        return load_feature_dataset(data)
    return load_datasets(ckpt.config)[1]


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg = cfg.replace(out_dir=args.out)
    if not cfg.out_dir:
        cfg = cfg.replace(out_dir=str(Path("runs") / cfg.hash()))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(format_config(cfg))
    resume = Checkpoint.load(args.resume) if args.resume else None
    result = train(cfg, resume=resume)
    (out / "report.json").write_text(json.dumps(result.final, indent=1))
    print(json.dumps(result.final))
    return 0


def cmd_eval(args) -> int:
    if args.scores:
        # Re-score an existing JSONL file; no model needed.
        _, scores, labels = read_score_jsonl(args.scores)
        out = Path(args.out or Path(args.scores).parent)
        source = {"scores": args.scores}
    elif args.checkpoint and args.data:
        ckpt = Checkpoint.load(args.checkpoint)
        ds = load_feature_dataset(args.data)
        out = Path(args.out or Path(args.checkpoint).parent / "eval")
        scores, labels = predict(ckpt.build_model(), ds), ds.y
        out.mkdir(parents=True, exist_ok=True)
        write_score_jsonl(out / "scores.jsonl", ds.ids, scores, labels)
        source = {"checkpoint": args.checkpoint, "data": args.data}
    else:
        raise ConfigError("eval needs --checkpoint and --data, or --scores")
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(scores, labels, top3_threshold=args.top3_threshold)
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(report.csv_row(header=True, **source))
    for c, ap in enumerate(per_class_ap(scores, labels)):
        print(f"class {c:3d}  AP {'n/a (no positives)' if ap is None else f'{ap:.4f}'}")
    print(report.to_json())
    return 0


def cmd_ablate(args) -> int:
    base = load_config(args.config) if args.config else TrainConfig()
    out = Path(args.out or f"ablate_{args.axis}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = ablate(base, args.axis, out_csv=out)
    for row in rows:
        print(f"{row['variant']:>14}  loss {row['loss']:.4f}  mAP {row['mAP']:.4f}")
    print(f"wrote {out}")
    return 0


def cmd_export_maps(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    ds = _dataset_for(ckpt, args.data)
    if args.limit is not None:
        ds = ds.subset(range(min(args.limit, len(ds))))
    out = args.out or Path(args.checkpoint).parent / "maps"
    print(f"wrote {export_maps(ckpt.build_model(), ds, out)}")
    return 0


def cmd_dump_adjacency(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    ds = _dataset_for(ckpt, args.data)
    idx = ds.index_of(args.sample)
    out = args.out or Path(args.checkpoint).parent / "adjacency"
    files = dump_adjacency(ckpt.build_model(), ds.x[idx], args.sample, out)
    if not files:
        print("model has no graph to dump", file=sys.stderr)
        return 1
    for key, path in sorted(files.items()):
        print(f"{key}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="addgcn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a dataset index with a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--data", help="dataset index.json")
    e.add_argument("--scores", help="evaluate an existing scores.jsonl instead")
    e.add_argument("--out", help="output directory (default: next to the checkpoint)")
    e.add_argument("--top3-threshold", action="store_true",
                   help="Top-3 predictions must also have a positive logit")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train every variant along one axis")
    a.add_argument("--axis", required=True, choices=ABLATION_AXES)
    a.add_argument("--config", help="base config (default: built-in defaults)")
    a.add_argument("--out", help="comparison CSV path")
    a.set_defaults(func=cmd_ablate)

    m = sub.add_parser("export-maps", help="dump activation maps and attention scores")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--data", help="dataset index (default: the config's eval split)")
    m.add_argument("--out")
    m.add_argument("--limit", type=int, help="only the first N samples")
    m.set_defaults(func=cmd_export_maps)

    d = sub.add_parser("dump-adjacency", help="dump A_d for one sample, and A_s")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--sample", required=True, help="sample id")
    d.add_argument("--data", help="dataset index (default: the config's eval split)")
    d.add_argument("--out")
    d.set_defaults(func=cmd_dump_adjacency)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
