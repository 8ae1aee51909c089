"""Command-line entry point: ``sernas <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import audio
from .autodiff import precision, rng_stream
from .harness import (
    ConfigError,
    fold_plan,
    load_features,
    parameter_scale,
    parse_config,
    prepare_fold,
    report_json,
    run_experiment,
    write_log_csv,
)
from .search_space import architecture_document, build_supernet, parse_architecture_document
from .strategies import TrainLog, TrainingDiverged, evaluate, retrain_selected

log = logging.getLogger("sernas")


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON experiment config")
    common.add_argument("--seed", type=int, help="run this single seed instead of the config's list")
    common.add_argument("--out-dir", default=None, help="directory for run artifacts")
    common.add_argument("--fold", type=int, action="append",
                        help="restrict to this fold (repeatable)")
    common.add_argument("--precision", type=int, choices=(32, 64))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sernas", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("search", parents=[common], help="architecture search, retrain, test")
    s.add_argument("--strategy", choices=("joint", "sampling", "dropout"))
    s.add_argument("--k", type=int, help="candidates dropped per mixed layer (dropout)")
    r = sub.add_parser("retrain", parents=[common], help="retrain an architecture document")
    r.add_argument("--arch", required=True, help="architecture.txt written by a search")
    sub.add_parser("baseline", parents=[common], help="train the default architecture")
    sub.add_parser("random-search", parents=[common], help="best of N random architectures")
    rep = sub.add_parser("report", parents=[common], help="summarise a run or a parameter count")
    rep.add_argument("run_dir", nargs="?", help="directory holding report.json")
    rep.add_argument("--param-scale", metavar="FAMILY",
                     help="print the baseline parameter count of FAMILY")
    rep.add_argument("--n-freq", type=int, default=401)
    sd = sub.add_parser("synth-data", parents=[common], help="write a synthetic WAV corpus")
    sd.add_argument("--n-utts", type=int, default=600)
    sd.add_argument("--sample-rate", type=int, default=16000)
    return p


def _config(args, **overrides):
    overrides = dict(overrides)
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.precision is not None:
        overrides["precision"] = args.precision
    if args.fold is not None:
        overrides["folds"] = args.fold
    return parse_config(args.config if args.config else {}, overrides=overrides)


def _print_report(report):
    print(f"family={report['family']} strategy={report['strategy']}")
    print(f"WA {report['wa_mean']:.4f} +/- {report['wa_std']:.4f}   "
          f"UA {report['ua_mean']:.4f} +/- {report['ua_std']:.4f}   "
          f"pooled WA {report['pooled_wa']:.4f}   params {report['params']}")
    for r in report["per_fold"]:
        print(f"  fold {r['fold']} seed {r['seed']}: WA {r['test']['wa']:.4f} "
              f"UA {r['test']['ua']:.4f} params {r['params']} arch {r['architecture']}")


def _run(args, strategy, **overrides):
    cfg = _config(args, strategy=strategy, **overrides)
    report = run_experiment(cfg, args.out_dir)
    _print_report(report)
    if args.out_dir:
        print(f"wrote {Path(args.out_dir) / 'report.json'}")
    return 0


def _retrain(args):
    cfg = _config(args)
    text = Path(args.arch).read_text()
    with precision(cfg.precision):
        utts, specs = load_features(cfg, args.out_dir)
        plan = fold_plan(utts)
        folds = cfg.folds if cfg.folds is not None else range(len(plan))
        dtype = np.float64 if cfg.precision == 64 else np.float32
        results = []
        for f in folds:
            data = prepare_fold(utts, specs, plan[f], cfg.data, dtype)
            for seed in cfg.seeds:
                net = build_supernet(cfg.space(), data.train.x.shape[2], rng_stream(seed, "init"),
                                     cfg.n_classes, nominal_time=data.train.x.shape[1])
                arch = parse_architecture_document(text, net)
                lg = TrainLog()
                model, ckpt, _ = retrain_selected(net, arch, data.train, data.val_utts,
                                                  cfg.retrain_epochs, rng_stream(seed, "retrain"),
                                                  cfg.batch_size, cfg.schedule(), lg)
                test = evaluate(model, data.test_utts)
                results.append({"fold": f, "seed": seed, "params": arch.param_count,
                                "best_epoch": ckpt.epoch, "test": test})
                print(f"fold {f} seed {seed}: WA {test['wa']:.4f} UA {test['ua']:.4f}")
                if args.out_dir:
                    d = Path(args.out_dir) / f"fold{f}" / f"seed{seed}"
                    write_log_csv(lg, d / "retrain_log.csv")
                    (d / "architecture.txt").write_text(architecture_document(net, arch))
    if args.out_dir:
        (Path(args.out_dir) / "retrain.json").write_text(report_json(results))
    return 0


def _report(args):
    if args.param_scale:
        print(json.dumps(parameter_scale(args.param_scale, args.n_freq), indent=2))
        return 0
    run_dir = args.run_dir or args.out_dir
    if not run_dir:
        raise ConfigError("report: give a run directory or --param-scale FAMILY")
    path = Path(run_dir) / "report.json"
    if not path.exists():
        raise ConfigError(f"report: {path} does not exist")
    _print_report(json.loads(path.read_text()))
    return 0


def _synth(args):
    cfg = _config(args)
    if not args.out_dir:
        raise ConfigError("synth-data: --out-dir is required")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg.data.data_seed
    utts = audio.synth_dataset(args.n_utts, rng_stream(seed, "data"), sample_rate=args.sample_rate,
                               min_s=cfg.data.min_seconds, max_s=cfg.data.max_seconds,
                               noise=cfg.data.noise)
    rows = []
    for u in utts:
        audio.write_wav(out / f"{u.uid}.wav", u.samples, u.sample_rate)
        rows.append({"path": f"{u.uid}.wav", "label": audio.EMOTIONS[u.label],
                     "speaker": u.speaker, "session": u.session})
    audio.write_manifest(out / "manifest.csv", rows)
    print(f"wrote {len(rows)} utterances and {out / 'manifest.csv'}")
    return 0


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "search":
            return _run(args, args.strategy, k=args.k)
        if args.command == "baseline":
            return _run(args, "none")
        if args.command == "random-search":
            return _run(args, "random")
        if args.command == "retrain":
            return _retrain(args)
        if args.command == "report":
            return _report(args)
        return _synth(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
