"""Command-line entry point: ``loopwatch <subcommand> ...``.

Exit codes: 0 success, 2 invalid arguments, 3 data/format error, 4 training divergence.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from .cfam import CfamConfig, train_cfam
from .checkpoint import load_cfam, load_sfam, save_cfam, save_sfam
from .dataio import (WorldConfig, generate_dataset, is_pair_dir,
                     load_episode, load_nominal, load_pair, make_windows, save_dataset)
from .errors import CheckpointError, ConfigError, EpisodeFormatError, TrainingDivergedError
from .kvfile import dataclass_from_kv, read_kv, write_kv
from .monitor import (MonitorConfig, MonitorReport, calibrate_threshold, evaluate, run_monitor)
from .sfam import SfamConfig, train_sfam

log = logging.getLogger("loopwatch")

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _config(cls, path):
    if path is None:
        return cls()
    if not Path(path).is_file():
        raise ConfigError(f"no such config file {path}")
    return dataclass_from_kv(cls, read_kv(path))


def _episodes_for_training(root):
    eps = load_nominal(root)
    log.info("loaded %d nominal episodes from %s", len(eps), root)
    return eps


def cmd_datagen(args):
    world = _config(WorldConfig, args.world)
    data = generate_dataset(world, args.seed, args.count, args.late_right, args.early_left,
                            args.length, args.duration)
    save_dataset(data, args.out, world)
    print(f"wrote {len(data.nominal)} nominal and {len(data.anomalous)} anomalous episodes "
          f"to {args.out}")


def cmd_train_cfam(args):
    config = _config(CfamConfig, args.config)
    pairs = [(f, u) for ep in _episodes_for_training(args.data)
             for f, u in zip(ep.frames, ep.steering)]
    model, history = train_cfam(pairs, config, args.seed)
    save_cfam(model, args.out)
    print(f"cfam: {len(pairs)} pairs, final L_D={history.loss_d[-1]:.4f}, "
          f"L_G={history.loss_g[-1]:.4f} -> {args.out}")


def cmd_train_sfam(args):
    config = _config(SfamConfig, args.config)
    windows = [w for ep in _episodes_for_training(args.data) for w in make_windows(ep)]
    predictor, critic, history = train_sfam(windows, config, args.seed)
    stage = "stage2" if config.epochs_stage2 > 0 else "stage1"
    save_sfam(predictor, config, args.out, stage, critic)
    last = history.stage1[-1] if history.stage1 else math.nan
    print(f"sfam: {len(windows)} windows, final stage-1 loss={last:.4f}, {stage} -> {args.out}")


def _monitor_config(args) -> MonitorConfig:
    items = {}
    if getattr(args, "thresholds", None):
        kv = read_kv(args.thresholds)
        items.update({k: v for k, v in kv.items()
                      if k in ("tau_cfam", "tau_sfam", "k", "n")})
    config = dataclass_from_kv(MonitorConfig, items)
    over = {}
    for key in ("tau_cfam", "tau_sfam", "k", "n"):
        value = getattr(args, key, None)
        if value is not None:
            over[key] = value
    if getattr(args, "no_resize", False):
        over["resize"] = False
    return MonitorConfig(**{**vars(config), **over})


def _load_models(args):
    if not args.cfam and not args.sfam:
        raise ConfigError("give at least one of --cfam / --sfam")
    cfam = load_cfam(args.cfam) if args.cfam else None
    sfam = load_sfam(args.sfam)[0] if args.sfam else None
    return cfam, sfam


def cmd_calibrate(args):
    cfam, sfam = _load_models(args)
    config = _monitor_config(args)
    reports = [run_monitor(ep, config, cfam, sfam) for ep in load_nominal(args.nominal)]
    tau_c, tau_s = calibrate_threshold(reports, args.percentile,
                                       min_frames=args.min_frames)
    write_kv(args.out, {"tau_cfam": tau_c, "tau_sfam": tau_s, "k": config.k, "n": config.n,
                        "percentile": args.percentile})
    print(f"tau_cfam={tau_c:.6g} tau_sfam={tau_s:.6g} -> {args.out}")


def _load_input(path):
    return load_pair(path) if is_pair_dir(path) else load_episode(path)


def cmd_monitor(args):
    cfam, sfam = _load_models(args)
    config = _monitor_config(args)
    target = args.pair or args.episode
    report = run_monitor(_load_input(target), config, cfam, sfam)
    report.meta.update({"input": str(target), "tau_cfam": config.tau_cfam,
                        "tau_sfam": config.tau_sfam, "k": config.k, "n": config.n})
    path = report.save(args.out)
    print(f"{len(report)} frames, cfam triggers={int(report.cfam_trigger.sum())}, "
          f"sfam triggers={int(report.sfam_trigger.sum())} -> {path}")


def cmd_eval(args):
    report = MonitorReport.load(args.report)
    path = Path(args.episode)
    episode = load_pair(path)[1] if is_pair_dir(path) else load_episode(path)
    metrics = evaluate(report, episode)
    flat = metrics.flat()
    if args.out:
        write_kv(args.out, flat)
    for key, value in flat.items():
        print(f"{key} = {value}")


def cmd_plot(args):
    from .plots import plot_report

    report = MonitorReport.load(args.report)
    labels = None
    if args.episode:
        path = Path(args.episode)
        ep = load_pair(path)[1] if is_pair_dir(path) else load_episode(path)
        labels = ep.anomaly
    taus = None
    if args.thresholds:
        kv = read_kv(args.thresholds)
        taus = (float(kv["tau_cfam"]), float(kv["tau_sfam"]))
    for p in plot_report(report, args.out, labels, taus):
        print(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loopwatch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="render nominal and anomaly-injected corridor episodes")
    p.add_argument("--world", help="world config (key = value file)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=20, help="nominal episodes")
    p.add_argument("--late-right", type=int, default=0, help="late-right override episodes")
    p.add_argument("--early-left", type=int, default=0, help="early-left override episodes")
    p.add_argument("--length", type=int, default=300)
    p.add_argument("--duration", type=int, default=20, help="override span in frames")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_datagen)

    for name, func, what in (("train-cfam", cmd_train_cfam, "the energy-based controller model"),
                             ("train-sfam", cmd_train_sfam, "the action-conditioned predictor")):
        p = sub.add_parser(name, help=f"train {what} on nominal episodes")
        p.add_argument("--data", required=True, help="dataset or episode directory")
        p.add_argument("--config", help="model config (key = value file)")
        p.add_argument("--out", required=True, help="checkpoint path")
        p.add_argument("--seed", type=int)
        p.set_defaults(func=func)

    def monitor_args(p):
        p.add_argument("--cfam", help="CFAM checkpoint")
        p.add_argument("--sfam", help="SFAM checkpoint")
        p.add_argument("--k", type=int)
        p.add_argument("--n", type=int)
        p.add_argument("--no-resize", action="store_true",
                       help="reject frames whose size differs from the checkpoint")

    p = sub.add_parser("calibrate", help="thresholds from nominal deviations")
    p.add_argument("--nominal", required=True)
    p.add_argument("--percentile", type=float, default=99.0)
    p.add_argument("--min-frames", type=int, default=100)
    p.add_argument("--out", required=True, help="thresholds file")
    monitor_args(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("monitor", help="score an episode or linked pair")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--episode")
    src.add_argument("--pair", help="directory with cfam/ and sfam/ episodes")
    p.add_argument("--thresholds", help="file written by calibrate")
    p.add_argument("--tau-cfam", type=float)
    p.add_argument("--tau-sfam", type=float)
    p.add_argument("--out", required=True, help="report directory or .csv path")
    monitor_args(p)
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("eval", help="metrics of a report against labels")
    p.add_argument("--report", required=True)
    p.add_argument("--episode", required=True, help="labeled episode or linked pair")
    p.add_argument("--out", help="metrics file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="deviation/flag/trigger plots of a report")
    p.add_argument("--report", required=True)
    p.add_argument("--episode", help="labeled episode or pair, to shade anomaly spans")
    p.add_argument("--thresholds")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (EpisodeFormatError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    return EXIT_OK


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
