"""Command-line interface.

Subcommands:

    gen-data      write a synthetic word-in-utterance corpus
    train         train one variant on a dataset directory
    train-staged  run the three-stage protocol (3 checkpoints)
    eval          score a checkpoint on a split and write reports
    gradcheck     finite-difference checks for every layer family
    summary       per-subnetwork parameter counts for a variant

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .tensor import ConfigError, ContractError, DataError, LipwordsError, NumericError, ShapeError
from .checkpoint import load_checkpoint, load_partial, save_checkpoint
from .checks import TOLERANCE, run_suite
from .data import ClipDataset, gen_synthetic
from .networks import PRESETS, VARIANTS, ModelConfig, build_variant
from .training import (
    BILSTM_SCHEDULE,
    TCONV_SCHEDULE,
    LrSchedule,
    StagePlan,
    run_training,
    staged_train,
    write_log,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise SystemExit_(EXIT_USAGE, f"error: {message}")


class SystemExit_(Exception):
    def __init__(self, code, message=""):
        super().__init__(message)
        self.code = code


def _build_parser():
    parser = _Parser(prog="lipwords", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    gd = sub.add_parser("gen-data", help="generate a synthetic corpus")
    gd.add_argument("--out", required=True, help="output dataset directory")
    gd.add_argument("--vocab", type=int, default=10)
    gd.add_argument("--clips-per-word", type=int, default=60)
    gd.add_argument("--seed", type=int, default=0)
    gd.add_argument("--frames", type=int, default=31)
    gd.add_argument("--frame-size", type=int, default=122,
                    help="stored frame size; models consume size-10 crops")

    def add_model_args(p):
        p.add_argument("--preset", choices=sorted(PRESETS), default="desk",
                       help="capacity preset; geometry and vocab follow the dataset")
        p.add_argument("--config-json", help="JSON file overriding ModelConfig fields")

    tr = sub.add_parser("train", help="train a single variant")
    tr.add_argument("--data", required=True)
    tr.add_argument("--variant", choices=VARIANTS, required=True)
    tr.add_argument("--epochs", type=int, default=None, help="defaults to the schedule budget")
    tr.add_argument("--batch", type=int, default=16)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--checkpoint", required=True, help="where to save the result")
    tr.add_argument("--init", help="checkpoint to partially load before training")
    tr.add_argument("--freeze", help="comma list of components to freeze (frontend,core)")
    tr.add_argument("--loss-mode", choices=("every", "last"), default="every")
    tr.add_argument("--lr-initial", type=float, default=None)
    tr.add_argument("--lr-final", type=float, default=5e-5)
    tr.add_argument("--log", help="CSV training log path")
    add_model_args(tr)

    ts = sub.add_parser("train-staged", help="run the three-stage protocol")
    ts.add_argument("--data", required=True)
    ts.add_argument("--out-dir", required=True)
    ts.add_argument("--seed", type=int, default=0)
    ts.add_argument("--batch", type=int, default=16)
    ts.add_argument("--stage1-variant", choices=("N1", "N2", "N3"), default="N2")
    ts.add_argument("--layers", type=int, choices=(1, 2), default=2)
    ts.add_argument("--merge", choices=("add", "concat"), default="concat")
    ts.add_argument("--stage1-epochs", type=int, default=20)
    ts.add_argument("--stage3-epochs", type=int, default=20)
    ts.add_argument("--log", help="CSV training log path")
    add_model_args(ts)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--data", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--topk", default="1,5,10")
    ev.add_argument("--batch", type=int, default=16)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--report", help="write the JSON report here")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--layer", default="all", help="layer selector (see checks module)")
    gc.add_argument("--seed", type=int, default=0, help="first seed of the batch")
    gc.add_argument("--cases", type=int, default=10, help="seeded cases per layer")
    gc.add_argument("--report", help="write results as JSON here")

    sm = sub.add_parser("summary", help="parameter counts per subnetwork")
    sm.add_argument("--variant", choices=VARIANTS, required=True)
    sm.add_argument("--report", help="write counts as JSON here")
    add_model_args(sm)
    sm.add_argument("--data", help="optional dataset to take geometry/vocab from")

    return parser


def _model_config(args, dataset=None):
    if getattr(args, "config_json", None):
        with open(args.config_json) as fh:
            return ModelConfig.from_dict(json.load(fh))
    cfg = PRESETS[args.preset]()
    if dataset is not None:
        m = dataset.manifest
        crop_h, crop_w = m.crop_size()
        cfg = ModelConfig(**{**cfg.to_dict(), "frames": m.frames, "height": crop_h,
                             "width": crop_w, "vocab": len(m.vocab)})
    return cfg


def _cmd_gen_data(args):
    ds = gen_synthetic(args.out, args.vocab, args.clips_per_word, args.seed,
                       frames=args.frames, frame_size=args.frame_size)
    m = ds.manifest
    print(f"wrote {sum(len(v) for v in m.splits.values())} clips, "
          f"{len(m.vocab)} words to {args.out}")
    for split in sorted(m.splits):
        print(f"  {split}: {len(m.splits[split])} clips")
    return EXIT_OK


def _cmd_train(args):
    dataset = ClipDataset(args.data)
    cfg = _model_config(args, dataset)
    net = build_variant(args.variant, cfg, seed=args.seed)
    if args.init:
        report = load_partial(args.init, net)
        print(f"init from {args.init}: {report.summary()}")
        if report.fresh:
            print("  freshly initialized: " + ", ".join(report.fresh[:8])
                  + (" ..." if len(report.fresh) > 8 else ""))
    if args.freeze:
        components = {c.strip() for c in args.freeze.split(",") if c.strip()}
        unknown = components - {"frontend", "core"}
        if unknown:
            raise ConfigError(f"cannot freeze {sorted(unknown)}; choose from frontend, core")
        if components == {"frontend", "core"}:
            net.freeze_trunk(True)
        else:
            for comp in components:
                getattr(net, comp).set_requires_grad(False)
    default = BILSTM_SCHEDULE if args.variant in ("N4", "N5", "N6", "N7") else TCONV_SCHEDULE
    epochs = args.epochs or default.epochs
    initial = args.lr_initial or default.initial
    # a decaying schedule needs >= 2 epochs; single-epoch runs hold the initial rate
    schedule = LrSchedule(initial, initial if epochs < 2 else args.lr_final, epochs)
    loss_mode = "every_step" if args.loss_mode == "every" else "last_step"
    best, rows = run_training(net, dataset, schedule, args.seed, batch_size=args.batch,
                              loss_mode=loss_mode, max_epochs=epochs)
    save_checkpoint(net, args.checkpoint, meta={"stage": 0, "epoch": len(rows),
                                                "best_val_top1": best})
    if args.log:
        write_log(args.log, rows)
    print(f"trained {args.variant} for {len(rows)} epochs; best val top-1 {best:.3f}")
    print(f"checkpoint written to {args.checkpoint}")
    return EXIT_OK


def _cmd_train_staged(args):
    from dataclasses import replace

    dataset = ClipDataset(args.data)
    cfg = _model_config(args, dataset)
    plan = StagePlan(stage1_variant=args.stage1_variant, bilstm_layers=args.layers,
                     final_merge=args.merge, batch_size=args.batch,
                     stage1_schedule=replace(TCONV_SCHEDULE, epochs=args.stage1_epochs),
                     stage3_schedule=replace(BILSTM_SCHEDULE, epochs=args.stage3_epochs))
    result = staged_train(dataset, cfg, args.out_dir, plan=plan, seed=args.seed,
                          log_path=args.log)
    for stage in sorted(result.checkpoints):
        print(f"stage {stage}: {result.checkpoints[stage]} "
              f"(best val top-1 {result.val_top1[stage]:.3f})")
    return EXIT_OK


def _cmd_eval(args):
    from .evaluate import build_report, format_confusions, format_word_table, score_clips, write_report

    dataset = ClipDataset(args.data)
    net, _ = load_checkpoint(args.checkpoint)
    if len(dataset.manifest.vocab) != net.config.vocab:
        raise ConfigError(f"checkpoint was trained for {net.config.vocab} words, "
                          f"dataset has {len(dataset.manifest.vocab)}")
    ks = tuple(int(k) for k in args.topk.split(","))
    scores = score_clips(net, dataset, args.split, batch_size=args.batch)
    report = build_report(scores, dataset.manifest.vocab, ks=ks,
                          meta={"variant": net.variant, "checkpoint": str(args.checkpoint),
                                "split": args.split, "seed": args.seed})
    for k in ks:
        print(f"top-{k}: {report['top'][str(k)]:.4f}")
    print()
    print(format_confusions(report))
    print()
    print(format_word_table(report))
    if args.report:
        write_report(args.report, report)
        print(f"\nJSON report written to {args.report}")
    return EXIT_OK


def _cmd_gradcheck(args):
    seeds = range(args.seed, args.seed + args.cases)
    results = run_suite(args.layer, seeds=seeds)
    failed = []
    for name, err in sorted(results.items()):
        ok = err < TOLERANCE
        print(f"{name:<12} max relative error {err:.3e}  {'PASS' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if args.report:
        with open(args.report, "w") as fh:
            json.dump({"tolerance": TOLERANCE, "errors": results,
                       "failed": failed}, fh, indent=2)
    if failed:
        raise NumericError(f"gradient checks failed: {', '.join(failed)}")
    return EXIT_OK


def _cmd_summary(args):
    dataset = ClipDataset(args.data) if args.data else None
    cfg = _model_config(args, dataset)
    net = build_variant(args.variant, cfg, seed=0)
    counts = net.parameter_counts()
    print(f"variant {args.variant} ({'desk' if cfg.height < 112 else 'full'} geometry "
          f"{cfg.frames}x{cfg.height}x{cfg.width}, vocab {cfg.vocab})")
    for name in ("frontend", "core", "backend", "total"):
        print(f"  {name:<10} {counts[name]:>12,}")
    if args.report:
        with open(args.report, "w") as fh:
            json.dump({"variant": args.variant, "config": cfg.to_dict(),
                       "counts": counts}, fh, indent=2)
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "train-staged": _cmd_train_staged,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "summary": _cmd_summary,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit_ as exc:
        if str(exc):
            print(str(exc), file=sys.stderr)
        return exc.code
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractError, ShapeError, LipwordsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
