"""Show what each monitor looks at: the command sweep behind one deviation value.

    python demos/profiles.py --cfam runs/quickstart/cfam.pt --sfam runs/quickstart/sfam.pt

For a frame inside an injected override span this plots the CFAM energy over the
action grid and the SFAM dissimilarity of each command-conditioned prediction,
with the executed command marked.  A deviation is the distance from that mark
to the curve's minimum.
"""
import argparse
from pathlib import Path

import torch

from loopwatch.cfam import energy_sweeps, resize_frames
from loopwatch.checkpoint import load_cfam, load_sfam
from loopwatch.dataio import WorldConfig, inject_anomaly, linked_pair, pick_scenario, \
    simulate_episode
from loopwatch.monitor import MonitorConfig, sfam_profiles
from loopwatch.plots import plot_profile


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cfam", required=True)
    ap.add_argument("--sfam", required=True)
    ap.add_argument("--kind", choices=["late-right", "early-left"], default="late-right")
    ap.add_argument("--seed", type=int, default=40)
    ap.add_argument("--out", default="runs/profiles")
    args = ap.parse_args()
    out = Path(args.out)
    grid = MonitorConfig().grid

    world = WorldConfig()
    base = simulate_episode(world, args.seed, 300)
    scenario = pick_scenario(base, args.kind)
    cfam_ep, sfam_ep = linked_pair(base, inject_anomaly(base, scenario, world, args.seed))
    t = (scenario.start_t + scenario.end_t) // 2
    print(f"{args.kind} override over frames {scenario.start_t}..{scenario.end_t - 1}; "
          f"showing frame {t}")

    cfam = load_cfam(args.cfam)
    s = cfam.config.image_size
    frame = resize_frames(torch.from_numpy(cfam_ep.frames[t:t + 1]), (s, s))
    energies = energy_sweeps(frame, grid, cfam)[0].energies
    plot_profile(grid, energies, out / "cfam_energy.png", cfam_ep.steering[t],
                 "energy", f"CFAM energy, frame {t}")

    sfam = load_sfam(args.sfam)[0]
    window = sfam_ep.replace(pixels=sfam_ep.pixels[t - 4:t + 1],
                             steering=sfam_ep.steering[t - 4:t + 1],
                             timestamps=sfam_ep.timestamps[t - 4:t + 1], t=None,
                             anomaly=None, commanded=None, trajectory=None, image_names=None)
    dssims = sfam_profiles(window, sfam, grid)[-1]
    plot_profile(grid, dssims, out / "sfam_dissimilarity.png", sfam_ep.steering[t],
                 "DSSIM", f"SFAM dissimilarity, frame {t}")
    print(f"wrote plots to {out}")


if __name__ == "__main__":
    main()
