"""Walk through the whole monitoring loop on a small synthetic corridor dataset.

    python demos/quickstart.py [--out runs/quickstart] [--preset small|medium]

Generates nominal and override-injected episodes, trains both monitors briefly,
calibrates thresholds on held-out nominal runs, then scores each injected run and
writes reports and plots.  The small preset finishes in a few minutes on a
laptop; detection quality needs the medium preset or more training.
"""
import argparse
import logging
from pathlib import Path

from loopwatch.cfam import CfamConfig, train_cfam
from loopwatch.checkpoint import save_cfam, save_sfam
from loopwatch.dataio import WorldConfig, generate_dataset, make_windows, save_dataset
from loopwatch.monitor import (MonitorConfig, calibrate_threshold, evaluate, run_monitor,
                               with_thresholds)
from loopwatch.plots import plot_report
from loopwatch.sfam import SfamConfig, train_sfam

PRESETS = {
    "small": dict(n_nominal=6, cfam_epochs=3, sfam_epochs=2, windows=300),
    "medium": dict(n_nominal=12, cfam_epochs=8, sfam_epochs=8, windows=1000),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/quickstart")
    ap.add_argument("--preset", choices=sorted(PRESETS), default="small")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    preset = PRESETS[args.preset]
    out = Path(args.out)

    # 1. data: nominal runs plus one late-right and one early-left override
    world = WorldConfig()
    data = generate_dataset(world, args.seed, preset["n_nominal"], 1, 1, length=200)
    save_dataset(data, out / "data", world)
    train, calib = data.nominal[:-2], data.nominal[-2:]
    print(f"{len(train)} training runs, {len(calib)} calibration runs, "
          f"{len(data.anomalous)} injected runs")

    # 2. controller-focused monitor: energy of (frame, command) pairs
    pairs = [(f, u) for ep in train for f, u in zip(ep.frames, ep.steering)]
    cfam, _ = train_cfam(pairs, CfamConfig(epochs=preset["cfam_epochs"]), seed=args.seed)
    save_cfam(cfam, out / "cfam.pt")

    # 3. system-focused monitor: action-conditioned next-frame prediction
    sfam_cfg = SfamConfig(epochs_stage1=preset["sfam_epochs"], epochs_stage2=0,
                          windows_per_epoch=preset["windows"])
    windows = [w for ep in train for w in make_windows(ep)]
    sfam, critic, _ = train_sfam(windows, sfam_cfg, seed=args.seed)
    save_sfam(sfam, sfam_cfg, out / "sfam.pt", "stage1", critic)

    # 4. thresholds: 99th percentile of deviations on nominal runs the models never saw
    config = MonitorConfig()
    reports = [run_monitor(ep, config, cfam, sfam) for ep in calib]
    tau_c, tau_s = calibrate_threshold(reports, 99.0)
    config = with_thresholds(config, tau_c, tau_s)
    print(f"thresholds: cfam {tau_c:.3f}, sfam {tau_s:.3f}")

    # 5. score each injected run: CFAM sees nominal frames with overridden commands,
    #    SFAM sees overridden frames with the controller's own commands
    for case in data.anomalous:
        name = f"{case.scenario.kind}_{case.seed}"
        report = run_monitor(case.pair, config, cfam, sfam)
        report.save(out / "reports" / name)
        plot_report(report, out / "plots" / name, case.sfam.anomaly, (tau_c, tau_s))
        m = evaluate(report, case.sfam)
        for which in ("cfam", "sfam"):
            mm = getattr(m, which)
            hit = "detected" if mm.detected_spans else "missed"
            print(f"{name} {which}: {hit}, latency {mm.latency}, "
                  f"false flag rate {mm.false_flag_rate:.3f}")


if __name__ == "__main__":
    main()
