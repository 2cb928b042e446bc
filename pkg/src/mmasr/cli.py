"""Command line entry point: ``mmasr <subcommand> [--seed N] [--config FILE] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .dataset import SNR_GRID, DatasetHandle, build_dataset
from .evalkit import EvalReport, evaluate
from .model import ModelCheckpoint, ModelConfig
from .trainer import TrainConfig, fresh_model, train


def _load_json(path):
    return json.loads(Path(path).read_text()) if path else {}


def cmd_gen_data(args) -> int:
    cfg = _load_json(args.config)
    n = args.n if args.n is not None else cfg.get("n_examples", 5000)
    m = build_dataset(args.out, n, args.seed)
    print(json.dumps({"path": str(args.out), **m.counts, "config_hash": m.config_hash}))
    return 0


def cmd_train(args) -> int:
    handle = DatasetHandle(args.data)
    mods, variant = harness.parse_config_label(args.label)
    cfg = _load_json(args.config)
    tcfg = TrainConfig(**cfg.get("train", {}), seed=args.seed, modality_set=mods, ocr_variant=variant)
    mcfg = ModelConfig(**{"vocab_size": len(handle.vocab), **cfg.get("model", {})})
    out = Path(args.out)
    res = train(fresh_model(mcfg, args.seed), handle, tcfg, log_path=out / "train_log.jsonl")
    res.checkpoint.save(out / "model.ckpt")
    print(json.dumps({"checkpoint": str(out / "model.ckpt"), "best_step": res.best_step,
                      "best_dev_wer": res.best_dev_wer, "stopped_early": res.stopped_early}))
    return 0


def cmd_eval(args) -> int:
    handle = DatasetHandle(args.data)
    mods, variant = harness.parse_config_label(args.label)
    model = ModelCheckpoint.load(args.checkpoint).to_model()
    rows = evaluate(model, handle, SNR_GRID, args.label, mods, variant, split=args.split, limit=args.limit)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(json.dumps(rows, indent=1))
    print(EvalReport.from_rows(rows, baseline=args.label).table())
    return 0


def _verdict_exit(bundle, assert_trends: bool) -> int:
    failed_cells = [c for c in bundle.get("cells", []) if c["status"] == "failed"]
    if failed_cells or bundle["missing"] or any(v is None for v in bundle["verdicts"].values()):
        return 1
    if assert_trends and not all(bundle["verdicts"].values()):
        return 2
    return 0


def cmd_run_plan(args) -> int:
    if not args.config:
        print("run-plan needs --config <plan.json>", file=sys.stderr)
        return 1
    plan = harness.ExperimentPlan.load(args.config)
    if args.seed is not None and args.seeds is None:
        plan.seeds = [args.seed]
    if args.seeds:
        plan.seeds = [int(s) for s in args.seeds.split(",")]
    bundle = harness.run_plan(plan, args.out)
    print(harness.format_summary(bundle))
    return _verdict_exit(bundle, args.assert_trends)


def cmd_report(args) -> int:
    bundle = harness.load_bundle(args.out)
    fresh = harness.recompute(bundle)
    if fresh["verdicts"] != bundle["verdicts"]:
        print("warning: stored verdicts differ from the per-cell WERs", file=sys.stderr)
    bundle.update(fresh)
    print(harness.format_summary(bundle))
    return _verdict_exit(bundle, args.assert_trends)


def cmd_emit_plots(args) -> int:
    bundle = harness.load_bundle(args.out)
    try:
        path = harness.emit_plots(bundle, args.plot_file or Path(args.out) / "plots.tsv")
    except harness.IncompleteGrid as exc:
        print(str(exc), file=sys.stderr)
        return 1
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config or plan file")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="mmasr", parents=[common],
                                description="Multimodal discrete-token ASR on synthetic spoken equations.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="build a dataset directory")
    g.add_argument("--n", type=int, help="number of examples (default 5000)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--data", required=True)
    t.add_argument("--label", default="A", help="config label, e.g. O_real+A")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the SNR grid")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--label", default="A")
    e.add_argument("--split", default="test")
    e.add_argument("--limit", type=int)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("run-plan", parents=[common], help="run an experiment plan (resumable)")
    r.add_argument("--seeds", help="comma-separated seed list overriding the plan")
    r.add_argument("--assert-trends", action="store_true", help="exit nonzero when a verdict fails")
    r.set_defaults(func=cmd_run_plan)

    rep = sub.add_parser("report", parents=[common], help="print tables and verdicts of a bundle")
    rep.add_argument("--assert-trends", action="store_true")
    rep.set_defaults(func=cmd_report)

    pl = sub.add_parser("emit-plots", parents=[common], help="write benefit curves as TSV")
    pl.add_argument("--plot-file", help="destination (default <out>/plots.tsv)")
    pl.set_defaults(func=cmd_emit_plots)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("seed", None), ("config", None), ("out", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    if args.seed is None and args.command in ("gen-data", "train"):
        args.seed = 0
    if args.out is None and args.command not in ("eval",):
        print(f"{args.command} needs --out", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
