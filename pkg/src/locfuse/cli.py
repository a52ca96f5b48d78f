"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import Backbone, PretrainConfig, PretrainingError, pretrain
from .data import CapacityError, PromptPair, TaskSpec, generate_dataset, read_image, save_dataset, write_image
from .errors import ConfigError, DataError
from .harness.config import PRESETS, TrainConfig, apply_preset
from .harness.engine import TrainingAborted, evaluate, infer, load_fuser, load_workspace, train
from .harness.export import export_attention_map, export_fused_prompt

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("locfuse")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig.for_task(args.task or "seg")
    paths = cfg.paths
    overrides = {}
    for name in ("data", "backbone", "out"):
        value = getattr(args, name, None)
        if value is not None:
            paths = type(paths)(**{**paths.__dict__, name: value})
    overrides["paths"] = paths
    for name in ("epochs", "seed", "batch_size"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "num_prompts", None) is not None:
        overrides["fusion"] = type(cfg.fusion)(**{**cfg.fusion.__dict__, "num_prompts": args.num_prompts})
    try:
        return cfg.replace(**overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _checkpoint(args, cfg: TrainConfig) -> Path:
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.paths.out) / "best"
    if not ckpt.with_suffix(".json").exists():
        raise DataError(f"no fusion checkpoint at {ckpt}")
    return ckpt


def _query(args, ws) -> PromptPair:
    if args.query_id:
        for p in ws.dataset.test:
            if p.id == args.query_id:
                return p
        if args.query_id in ws.db._by_id:
            return ws.db[ws.db.index_of(args.query_id)]
        raise DataError(f"unknown query id {args.query_id}")
    if args.query:
        img = read_image(args.query)
        lbl = read_image(args.label) if args.label else np.zeros_like(img)
        return PromptPair(img, lbl, Path(args.query).stem, -1)
    return ws.dataset.test[0]


def cmd_gen_data(args) -> int:
    spec = TaskSpec(kind=args.task, seed=args.seed, n_train=args.n_train, n_test=args.n_test)
    train_db, test = generate_dataset(spec)
    save_dataset(args.out, spec, train_db, test, ext="." + args.format)
    print(f"wrote {len(train_db)} train / {len(test)} test pairs to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    spec = TaskSpec(kind=args.task, seed=args.seed)
    pc = PretrainConfig(seed=args.seed, enc_steps=args.enc_steps, vq_steps=args.vq_steps)
    bb, report = pretrain(spec, pc)
    bb.save(args.out, {"task": spec.kind.value, "report": report, "pretrain": pc.__dict__})
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if getattr(args, "preset", None):
        cfg = apply_preset(cfg, args.preset)
    result = train(cfg)
    print(json.dumps({"final": str(result.final), "best": str(result.best), "best_metric": result.best_metric,
                      "best_epoch": result.best_epoch}, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    ws = load_workspace(cfg)
    fuser = load_fuser(cfg, _checkpoint(args, cfg))
    result = evaluate(cfg, ws, fuser)
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    T.atomic_write(out / "eval.json", json.dumps(result.to_dict(), indent=2).encode("utf-8"))
    summary = {k: v for k, v in result.to_dict().items() if k != "records"}
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _config(args)
    ws = load_workspace(cfg)
    fuser = load_fuser(cfg, _checkpoint(args, cfg))
    query = _query(args, ws)
    pred = infer(query.image, ws, fuser)
    write_image(Path(args.output), pred)
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_export_fused(args) -> int:
    cfg = _config(args)
    ws = load_workspace(cfg)
    fuser = load_fuser(cfg, _checkpoint(args, cfg))
    metrics = export_fused_prompt(ws, fuser, _query(args, ws), args.output)
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def cmd_export_attn(args) -> int:
    cfg = _config(args)
    ws = load_workspace(cfg)
    fuser = load_fuser(cfg, _checkpoint(args, cfg))
    paths = export_attention_map(ws, fuser, _query(args, ws), args.output)
    print("\n".join(str(p) for p in paths))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="locfuse", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic task dataset")
    p.add_argument("--task", required=True, choices=["seg", "det", "color"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-test", type=int, default=128)
    p.add_argument("--format", choices=["png", "ppm"], default="png")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-backbone", help="pretrain and freeze the surrogate backbone")
    p.add_argument("--task", required=True, choices=["seg", "det", "color"])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--enc-steps", type=int, default=PretrainConfig.enc_steps)
    p.add_argument("--vq-steps", type=int, default=PretrainConfig.vq_steps)
    p.set_defaults(func=cmd_pretrain)

    def common(p, with_query=False, output=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--task", choices=["seg", "det", "color"])
        p.add_argument("--data")
        p.add_argument("--backbone")
        p.add_argument("--out")
        p.add_argument("--epochs", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--num-prompts", type=int)
        if with_query:
            p.add_argument("--checkpoint")
            p.add_argument("--query", help="query image file")
            p.add_argument("--label", help="ground-truth label file for the query (optional)")
            p.add_argument("--query-id", help="id of a dataset pair to use as the query")
        if output:
            p.add_argument("--output", required=True)

    p = sub.add_parser("train", help="train the fusion module")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train with an ablation preset")
    p.add_argument("preset", choices=sorted(PRESETS))
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_eval)

    for name, func, help_ in (("infer", cmd_infer, "predict one query's label"),
                              ("export-fused", cmd_export_fused, "decode the fused prompt pair"),
                              ("export-attn", cmd_export_attn, "write attention heat maps")):
        p = sub.add_parser(name, help=help_)
        common(p, with_query=True, output=True)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CapacityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (T.NumericError, TrainingAborted, PretrainingError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
