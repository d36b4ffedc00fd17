"""Directory layout for generated datasets: nominal episodes plus linked anomalous pairs.

::

    root/
      world.txt
      nominal/ep_0000/...              one episode directory each
      anomalous/late-right_0020/
        scenario.txt                   kind, start_t, end_t, seed
        cfam/  sfam/  executed/        linked test streams and the overridden run
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from ..errors import EpisodeFormatError
from ..kvfile import read_kv, write_kv
from .episode import MANIFEST, Episode, load_episode, save_episode
from .simulate import AnomalyScenario, inject_anomaly, linked_pair, pick_scenario, simulate_episode
from .world import WorldConfig


@dataclass
class AnomalousCase:
    scenario: AnomalyScenario
    seed: int
    cfam: Episode
    sfam: Episode
    executed: Episode | None = None

    @property
    def pair(self) -> tuple[Episode, Episode]:
        return self.cfam, self.sfam


@dataclass
class Dataset:
    nominal: list[Episode]
    anomalous: list[AnomalousCase]
    nominal_seeds: list[int]


def generate_dataset(config: WorldConfig, seed: int = 0, n_nominal: int = 20,
                     n_late_right: int = 5, n_early_left: int = 5, length: int = 300,
                     duration: int = 20, max_tries: int = 50) -> Dataset:
    """Nominal runs use seeds ``seed .. seed+n_nominal-1``; anomalous runs take the
    following seeds, skipping any world with no room for the requested override."""
    nominal = [simulate_episode(config, seed + i, length) for i in range(n_nominal)]
    cases = []
    next_seed = seed + n_nominal
    for kind, count in (("late-right", n_late_right), ("early-left", n_early_left)):
        made = 0
        tries = 0
        while made < count:
            if tries >= max_tries:
                raise ValueError(f"could not place {count} {kind} overrides in {max_tries} worlds")
            s = next_seed
            next_seed += 1
            tries += 1
            base = simulate_episode(config, s, length)
            try:
                scenario = pick_scenario(base, kind, duration)
            except ValueError:
                continue
            injected = inject_anomaly(base, scenario, config, s)
            cfam_ep, sfam_ep = linked_pair(base, injected)
            cases.append(AnomalousCase(scenario, s, cfam_ep, sfam_ep, injected))
            made += 1
    return Dataset(nominal, cases, [seed + i for i in range(n_nominal)])


def save_dataset(dataset: Dataset, root, config: WorldConfig | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if config is not None:
        config.save(root / "world.txt")
    for s, ep in zip(dataset.nominal_seeds, dataset.nominal):
        save_episode(ep, root / "nominal" / f"ep_{s:04d}")
    for case in dataset.anomalous:
        d = root / "anomalous" / f"{case.scenario.kind}_{case.seed:04d}"
        save_episode(case.cfam, d / "cfam")
        save_episode(case.sfam, d / "sfam")
        if case.executed is not None:
            save_episode(case.executed, d / "executed")
        write_kv(d / "scenario.txt", {"kind": case.scenario.kind,
                                      "start_t": case.scenario.start_t,
                                      "end_t": case.scenario.end_t, "seed": case.seed})
    return root


def is_pair_dir(path) -> bool:
    path = Path(path)
    return (path / "cfam" / MANIFEST).is_file() and (path / "sfam" / MANIFEST).is_file()


def load_pair(path) -> tuple[Episode, Episode]:
    path = Path(path)
    if not is_pair_dir(path):
        raise EpisodeFormatError(f"{path} is not a linked pair (needs cfam/ and sfam/ episodes)")
    return load_episode(path / "cfam"), load_episode(path / "sfam")


def find_episode_dirs(root) -> list[Path]:
    """Episode directories under ``root`` (sorted), or ``root`` itself if it is one."""
    root = Path(root)
    if not root.exists():
        raise EpisodeFormatError(f"no such directory {root}")
    if (root / MANIFEST).is_file():
        return [root]
    return sorted(p.parent for p in root.rglob(MANIFEST))


def load_nominal(root) -> list[Episode]:
    """Every episode under ``root`` without an anomaly label set."""
    eps = [load_episode(d) for d in find_episode_dirs(root)]
    eps = [e for e in eps if e.anomaly is None or not e.anomaly.any()]
    if not eps:
        raise EpisodeFormatError(f"no nominal episodes under {root}")
    return eps


def load_dataset(root) -> Dataset:
    root = Path(root)
    nominal_dirs = find_episode_dirs(root / "nominal") if (root / "nominal").exists() else []
    nominal = [load_episode(d) for d in nominal_dirs]
    seeds = [int(d.name.rsplit("_", 1)[-1]) for d in nominal_dirs]
    cases = []
    anomalous = root / "anomalous"
    if anomalous.exists():
        for d in sorted(p for p in anomalous.iterdir() if is_pair_dir(p)):
            meta = read_kv(d / "scenario.txt")
            scenario = AnomalyScenario(meta["kind"], int(meta["start_t"]), int(meta["end_t"]))
            cfam_ep, sfam_ep = load_pair(d)
            executed = load_episode(d / "executed") if (d / "executed" / MANIFEST).is_file() \
                else None
            cases.append(AnomalousCase(scenario, int(meta["seed"]), cfam_ep, sfam_ep, executed))
    cases.sort(key=lambda c: c.seed)   # generation order
    return Dataset(nominal, cases, seeds)
