"""Command line entry point: ``objectnlq <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 gradient
check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DataError, GradcheckError, ObjectNLQError

log = logging.getLogger("objectnlq")


def _deep_update(base: dict, extra: dict):
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def build_config(args):
    """defaults -> profile -> config file -> --seed."""
    from .training import TrainConfig

    cfg = TrainConfig.for_profile(args.profile) if args.profile else TrainConfig()
    d = cfg.to_dict()
    if args.config:
        try:
            extra = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON at char {exc.pos}: {exc.msg}") from None
        if not isinstance(extra, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        _deep_update(d, extra)
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        return TrainConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _dataset(args, cfg, splits=None):
    from .data import load_dataset
    from .training import fit_to_dataset

    ds = load_dataset(
        args.data,
        splits=splits,
        per_frame=cfg.model.objects_per_frame,
        cap=cfg.model.max_object_tokens,
        with_objects=cfg.model.object_branch == "on",
    )
    return ds, fit_to_dataset(cfg, ds)


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg):
    from .data import synth_generate

    seed = 42 if args.seed is None else args.seed
    out = synth_generate(
        args.out, n_videos=args.videos, T=args.T, D_in=args.dim, vocab_size=args.vocab, seed=seed,
        n_train=args.train, n_eval=args.eval,
    )
    print(f"wrote synthetic dataset to {out}")


def cmd_train(args, cfg):
    from .data import write_jsonl
    from .training import save_checkpoint, train

    ds, cfg = _dataset(args, cfg)
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, total_epochs=args.epochs, warmup_epochs=min(cfg.warmup_epochs, args.epochs - 1))
    eval_samples = ds.samples([args.eval_split]) if args.eval_split else None
    if args.fold_holdout == "all":
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        folds = range(5)
    else:
        folds = [None if args.fold_holdout is None else int(args.fold_holdout)]
    for k in folds:
        audit = [] if args.audit else None
        ck = train(cfg, ds, fold_holdout=k, splits=args.splits, eval_samples=eval_samples, audit=audit)
        path = Path(args.out) / f"fold{k}.ckpt" if args.fold_holdout == "all" else Path(args.out)
        save_checkpoint(ck, path)
        if audit is not None:
            audit_path = Path(args.audit) if len(folds) == 1 else Path(args.audit).with_suffix(f".fold{k}.jsonl")
            write_jsonl(audit_path, audit)
        print(f"saved {path} (config {ck.config_hash}, final loss {ck.history[-1]['loss']:.4f})")


def cmd_predict(args, cfg):
    from .training import check_compatible, load_checkpoint, predict, write_predictions

    cks = [load_checkpoint(p) for p in args.checkpoint]
    check_compatible(cks)
    run_cfg = cks[0].train_config
    if args.config or args.profile:
        # allow post-processing overrides; model architecture stays the checkpoint's
        run_cfg = dataclasses.replace(cfg, model=cks[0].model.config)
    ds, _ = _dataset(args, run_cfg, splits=[args.split])
    samples = ds.samples([args.split])
    raw = {} if args.raw else None
    merged = predict(cks, samples, run_cfg, raw=raw)
    write_predictions(args.out, merged)
    if raw is not None:
        Path(args.raw).write_text(json.dumps(raw, sort_keys=True) + "\n")
    print(f"wrote {len(merged)} queries to {args.out}")


def _ground_truth(path):
    from .data import read_jsonl

    gts = {}
    for i, row in enumerate(read_jsonl(path)):
        try:
            s, e = map(float, row["segment"])
            gts[str(row["query_id"])] = (s, e)
        except (KeyError, TypeError, ValueError):
            raise DataError(f"{path}: record {i + 1} lacks a valid query_id/segment") from None
    return gts


def _predictions(path):
    from .data import read_jsonl

    preds = {}
    for i, row in enumerate(read_jsonl(path)):
        try:
            preds[str(row["query_id"])] = [list(map(float, p)) for p in row["predictions"]]
        except (KeyError, TypeError, ValueError):
            raise DataError(f"{path}: record {i + 1} is not a prediction record") from None
    return preds


def cmd_evaluate(args, cfg):
    from .metrics import evaluate, report_from_recalls

    if args.from_recalls:
        vals = list(args.from_recalls) + [0.0] * (4 - len(args.from_recalls))
        report = report_from_recalls(*vals)
    else:
        if not (args.predictions and args.annotations):
            raise ConfigError("evaluate needs --predictions and --annotations (or --from-recalls)")
        report = evaluate(_predictions(args.predictions), _ground_truth(args.annotations))
        if report.missing:
            print(f"{len(report.missing)} annotated queries have no predictions (counted as misses): "
                  + ", ".join(report.missing), file=sys.stderr)
        if report.unexpected:
            print(f"{len(report.unexpected)} predicted queries are not annotated: " + ", ".join(report.unexpected),
                  file=sys.stderr)
    if args.out:
        Path(args.out).write_text(report.to_json())
    table = report.table(args.label)
    if args.table:
        Path(args.table).write_text(table)
    print(table, end="")


def cmd_ablate(args, cfg):
    from .training import ablate, ablation_table

    ds, cfg = _dataset(args, dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, object_branch="on")))
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, total_epochs=args.epochs, warmup_epochs=min(cfg.warmup_epochs, args.epochs - 1))
    result = ablate(cfg, ds, train_splits=args.splits, eval_split=args.eval_split)
    table = ablation_table(result)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {
        "seed": cfg.seed,
        "rows": [
            {"label": label, "config_hash": r["config_hash"], "flags": r["flags"], "metrics": r["report"].rounded()}
            for label, r in result["rows"].items()
        ],
        "untrained": result["untrained"].rounded(),
    }
    (out / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "ablation.txt").write_text(table)
    for i, (label, r) in enumerate(result["rows"].items()):
        (out / f"report_{i}.json").write_text(r["report"].to_json())
    print(table, end="")


def cmd_gradcheck(args, cfg):
    from .gradcheck import gradcheck

    report = gradcheck(n_params=args.params, seed=cfg.seed)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    if not report["passed"]:
        raise GradcheckError(f"max relative error {report['max_rel_error']:.3g} exceeds {report['tolerance']}")


def cmd_folds(args, cfg):
    from .data import make_folds, read_jsonl

    if args.ids:
        ids = [line.strip() for line in Path(args.ids).read_text().splitlines() if line.strip()]
    elif args.data:
        manifest_path = Path(args.data) / "dataset.json"
        if not manifest_path.exists():
            raise DataError(f"{args.data}: missing dataset.json manifest")
        manifest = json.loads(manifest_path.read_text())
        ids = sorted({str(r["video_id"]) for rel in manifest["annotations"].values() for r in read_jsonl(Path(args.data) / rel)})
    else:
        raise ConfigError("folds needs --data or --ids")
    if not ids:
        raise DataError("no video ids to split")
    split = make_folds(ids, cfg.seed)
    out = {"seed": cfg.seed, "sizes": split.sizes(), "assignment": dict(sorted(split.assignment.items()))}
    print(json.dumps(out, indent=2, sort_keys=True))


# ---------------------------------------------------------------- parser


def make_parser():
    p = argparse.ArgumentParser(prog="objectnlq", description="Object-aware temporal grounding toolkit.")
    p.add_argument("--config", help="JSON file with TrainConfig fields (model fields under \"model\")")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--profile", choices=["nlq", "goalstep"], help="batch/lr/object-branch defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic object-keyed dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--videos", type=int, default=20)
    s.add_argument("--T", type=int, default=256)
    s.add_argument("--dim", type=int, default=64, help="total video feature width")
    s.add_argument("--vocab", type=int, default=32)
    s.add_argument("--train", type=int, default=200)
    s.add_argument("--eval", type=int, default=50)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one model (or all five fold models)")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path, or a directory with --fold-holdout all")
    s.add_argument("--splits", nargs="+", default=["train"])
    s.add_argument("--fold-holdout", help="fold index 0-4 to exclude, or 'all' for a five-model ensemble")
    s.add_argument("--eval-split", help="split scored after every epoch")
    s.add_argument("--audit", help="write per-step batch ids to this .jsonl")
    s.add_argument("--epochs", type=int, help="override total_epochs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="ensemble prediction with SoftNMS")
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--checkpoint", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--raw", help="also dump every model's undeduplicated candidates (JSON)")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="score predictions against annotations")
    s.add_argument("--predictions")
    s.add_argument("--annotations")
    s.add_argument("--from-recalls", nargs="+", type=float, metavar="PCT",
                   help="render a report from R@1 0.3, R@1 0.5 [, R@5 0.3, R@5 0.5] percentages")
    s.add_argument("--out", help="EvalReport JSON path")
    s.add_argument("--table", help="text table path")
    s.add_argument("--label", default="model")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="train and score the four ablation variants")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--splits", nargs="+", default=["train"])
    s.add_argument("--eval-split", default="val")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference check of all backward rules")
    s.add_argument("--params", type=int, default=240, help="sampled parameter coordinates")
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("folds", help="print the five-fold video assignment")
    s.add_argument("--data")
    s.add_argument("--ids", help="text file with one video id per line")
    s.set_defaults(func=cmd_folds)
    return p


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        args.func(args, cfg)
    except ObjectNLQError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
