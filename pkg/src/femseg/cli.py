"""Command-line entry point: ``python -m femseg.cli <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .errors import FemsegError, NumericFailure
from .experiment import (
    assign_folds,
    evaluate_subject,
    list_subjects,
    load_config,
    load_sample,
    read_folds,
    read_split,
    run_pipeline,
    save_prediction,
    select_model,
    split_subjects,
    summarize,
    train_stage,
    volumes_from_report,
    write_folds,
    write_split,
)
from .inference import Segmenter, cascade_segment
from .metrics import MetricsReport, distance_map_volume, extract_surface, surface_distance_map
from .nn.checkpoint import checkpoint_load
from .phantom import DEFAULT_JITTER, Jitter, PhantomSpec, generate_cohort, write_sample
from .regions import write_table_csv
from .volgrid import Spacing3, read_mask, read_volume, write_volume


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _floats(n):
    def parse(text):
        vals = tuple(float(v) for v in text.replace(",", " ").split())
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} numbers, got {text!r}")
        return vals
    return parse


def _config_args(p):
    p.add_argument("--config", help="INI experiment config")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable)")


def _load(args, seed_required=False):
    overrides = list(args.set)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"experiment.seed={args.seed}")
    elif seed_required:
        raise UsageError("--seed is required")
    return load_config(args.config, overrides)


# -- commands ---------------------------------------------------------------

def cmd_phantom(args):
    jitter = DEFAULT_JITTER if args.jitter else Jitter()
    base = PhantomSpec(seed=args.seed)
    samples = generate_cohort(args.n, base, jitter, args.seed, tuple(int(v) for v in args.dims), Spacing3(*args.spacing))
    out = Path(args.out)
    for i, s in enumerate(samples):
        write_sample(s, out / f"subject_{i:03d}")
    print(f"wrote {len(samples)} phantom(s) to {out}")


def cmd_split(args):
    cfg = _load(args)
    ids = list_subjects(cfg.dataset_dir)
    train, test = split_subjects(ids, cfg.split_fraction, cfg.seed)
    folds = assign_folds(train, cfg.folds, cfg.seed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_split(train, test, out / "split.txt")
    write_folds(folds, out / "folds.txt")
    print(f"train {len(train)}, test {len(test)}, fold sizes {folds.sizes()}")


def cmd_train(args):
    cfg = _load(args)
    if args.stage:
        cfg = dataclasses.replace(cfg, stage=args.stage)
    out = Path(cfg.output_dir)
    if (out / "split.txt").exists():
        train_ids, _ = read_split(out / "split.txt")
        folds = read_folds(out / "folds.txt")
    else:
        train_ids, _ = split_subjects(list_subjects(cfg.dataset_dir), cfg.split_fraction, cfg.seed)
        folds = assign_folds(train_ids, cfg.folds, cfg.seed)
    if args.fold == "all":
        fold_list = [None]
    elif args.fold == "cv":
        fold_list = list(range(folds.k))
    else:
        fold_list = [int(args.fold)]
    progress = (lambda r: print(f"epoch {r.epoch} loss {r.loss:.5f} val_dsc {r.val_dsc}", flush=True)) if args.verbose else None
    results = [train_stage(cfg, k, train_ids, folds, resume=args.resume, progress=progress) for k in fold_list]
    best = select_model(results)
    print(f"{cfg.stage}: selected fold {best.fold} (val DSC {best.val_dsc}) -> {best.checkpoint}")


def cmd_predict(args):
    cfg = _load(args)
    vol = read_volume(args.input)
    peri = Segmenter(checkpoint_load(args.periosteal), cfg.train.intensity_offset, cfg.train.intensity_scale)
    endo = Segmenter(checkpoint_load(args.endosteal), cfg.train.intensity_offset, cfg.train.intensity_scale)
    res = cascade_segment(peri, endo, vol, args.window_depth or cfg.train.patch_size[2],
                          cfg.train.mask_margin, not args.no_mask)
    save_prediction(res, args.out)
    print(f"thresholds {res.thresholds}, seconds {res.seconds}")


def cmd_evaluate(args):
    sample = load_sample(Path(args.truth).parent, Path(args.truth).name)
    pred_dir = Path(args.pred)

    class _Pred:
        periosteal = read_mask(pred_dir / "periosteal.hdr")
        endosteal = read_mask(pred_dir / "endosteal.hdr")
        thresholds = (float("nan"), float("nan"))
        seconds = {"periosteal": 0.0, "endosteal": 0.0}

    run = pred_dir / "run.txt"
    if run.exists():
        kv = dict(line.split(" = ") for line in run.read_text().splitlines() if " = " in line)
        _Pred.thresholds = (float(kv["threshold.periosteal"]), float(kv["threshold.endosteal"]))
        _Pred.seconds = {k: float(kv[f"seconds.{k}"]) for k in ("periosteal", "endosteal")}
    report, _, _ = evaluate_subject(sample, _Pred)
    text = report.to_text()
    out = Path(args.out) if args.out else pred_dir / "metrics.txt"
    out.write_text(text)
    if args.distance_maps:
        for name in ("periosteal", "endosteal"):
            ps = extract_surface(getattr(_Pred, name))
            ts = extract_surface(getattr(sample, name))
            write_volume(distance_map_volume(ps, surface_distance_map(ps, ts)), out.parent / f"{name}_distance.hdr")
    sys.stdout.write(text)


def cmd_report(args):
    reports = [MetricsReport.from_text(Path(p).read_text()) for p in args.reports]
    if not reports:
        raise UsageError("no reports given")
    truths, preds = zip(*(volumes_from_report(r) for r in reports))
    summary = summarize(reports, list(truths), list(preds))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(summary.to_text())
    write_table_csv(summary.regions, out / "regions.csv", summary.meta["partition"])
    sys.stdout.write(summary.to_text())


def cmd_pipeline(args):
    cfg = _load(args, seed_required=True)
    progress = (lambda r: print(f"epoch {r.epoch} loss {r.loss:.5f} val_dsc {r.val_dsc}", flush=True)) if args.verbose else None
    res = run_pipeline(cfg, progress=progress)
    sys.stdout.write(res.report.to_text())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="femseg", description="Two-stage proximal femur segmentation experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate synthetic phantom subjects")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dims", type=_floats(3), default=(96, 96, 48))
    s.add_argument("--spacing", type=_floats(3), default=(1.0, 1.0, 1.5))
    s.add_argument("--jitter", action="store_true", help="apply the default cohort jitter")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("split", help="write the train/test split and folds")
    _config_args(s)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train one stage")
    _config_args(s)
    s.add_argument("--seed", type=int)
    s.add_argument("--stage", choices=["periosteal", "endosteal"])
    s.add_argument("--fold", default="cv", help="fold index, 'cv' for all folds, 'all' for no validation")
    s.add_argument("--resume", help="continue from this checkpoint")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="cascade prediction on one volume")
    _config_args(s)
    s.add_argument("--periosteal", required=True, help="stage-1 checkpoint")
    s.add_argument("--endosteal", required=True, help="stage-2 checkpoint")
    s.add_argument("--input", required=True, help="intensity volume header")
    s.add_argument("--out", required=True)
    s.add_argument("--window-depth", type=int)
    s.add_argument("--no-mask", action="store_true", help="feed raw intensity to stage 2")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="metrics of a prediction against a phantom subject")
    s.add_argument("--pred", required=True, help="prediction directory")
    s.add_argument("--truth", required=True, help="subject directory")
    s.add_argument("--out", help="report path (default <pred>/metrics.txt)")
    s.add_argument("--distance-maps", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="aggregate per-subject metric reports")
    s.add_argument("reports", nargs="*")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("pipeline", help="cohort, split, cross-validated training, test evaluation")
    _config_args(s)
    s.add_argument("--seed", type=int)
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (NumericFailure, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (FemsegError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
