"""Closed-loop episode generation and override-based anomaly injection.

Record ``t`` holds the command executed over the interval that ends at frame
``t``, followed by the frame rendered after it.  The controller decides that
command from the state at ``t - 1``, so frame ``t + 1`` is the response to
command ``t + 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .episode import Episode
from .world import PurePursuit, World, WorldConfig

KINDS = ("late-right", "early-left")
EARLY_LEFT_COMMAND = -0.2


@dataclass(frozen=True)
class AnomalyScenario:
    """A human override of the controller during ``[start_t, end_t)``."""

    kind: str
    start_t: int
    end_t: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}; expected one of {KINDS}")
        if not 0 <= self.start_t < self.end_t:
            raise ValueError(f"need 0 <= start_t < end_t, got [{self.start_t}, {self.end_t})")

    def active(self, t: int) -> bool:
        return self.start_t <= t < self.end_t

    def override(self, t: int) -> float:
        # late-right keeps going straight through a right turn
        return 0.0 if self.kind == "late-right" else EARLY_LEFT_COMMAND


def _run(world: World, length: int, scenario: AnomalyScenario | None = None):
    cfg = world.config
    controller = PurePursuit(cfg, world.corridor)
    noise = world.noise(length)
    state = world.initial_state()
    pixels = np.empty((length, 3, cfg.image_height, cfg.image_width), dtype=np.uint8)
    executed = np.empty(length)
    desired = np.empty(length)
    traj = np.empty((length, 3))
    for t in range(length):
        wanted = float(np.clip(controller.command(state) + noise[t], cfg.u_min, cfg.u_max))
        u = scenario.override(t) if scenario is not None and scenario.active(t) else wanted
        state = world.advance(state, u)
        pixels[t] = world.renderer.render(state)
        executed[t], desired[t] = u, wanted
        traj[t] = (*state.position, state.heading)
    return pixels, executed, desired, traj


def simulate_episode(config: WorldConfig, seed: int, length: int) -> Episode:
    """Render ``length`` frames of the pure-pursuit controller driving the corridor."""
    if length < 5:
        raise ValueError(f"episode length must be at least 5, got {length}")
    world = World(config, seed)
    pixels, executed, _, traj = _run(world, length)
    return Episode(pixels, executed, np.arange(length) * config.dt,
                   anomaly=np.zeros(length, dtype=bool), source="synthetic",
                   steering_range=(config.u_min, config.u_max), trajectory=traj)


def inject_anomaly(episode: Episode, scenario: AnomalyScenario, config: WorldConfig,
                   seed: int) -> Episode:
    """Re-simulate ``episode`` with the controller overridden during the scenario.

    The result stores the executed commands and the frames they produced, with
    anomaly labels on the override span; ``commanded`` keeps what the
    controller asked for at every step.
    """
    n = len(episode)
    if scenario.end_t > n:
        raise ValueError(f"scenario window [{scenario.start_t}, {scenario.end_t}) "
                         f"outside episode of length {n}")
    world = World(config, seed)
    pixels, executed, desired, traj = _run(world, n, scenario)
    if not np.array_equal(executed[:scenario.start_t], episode.steering[:scenario.start_t]):
        raise ValueError("episode was not generated from this world config and seed")
    labels = np.zeros(n, dtype=bool)
    labels[scenario.start_t:scenario.end_t] = True
    return Episode(pixels, executed, episode.timestamps.copy(), anomaly=labels,
                   source=episode.source, steering_range=episode.steering_range,
                   commanded=desired, trajectory=traj)


def _runs(mask: np.ndarray):
    """(start, stop) of each run of True values."""
    edges = np.diff(np.concatenate([[0], mask.astype(int), [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def pick_scenario(episode: Episode, kind: str, duration: int = 20,
                  earliest: int = 8) -> AnomalyScenario:
    """Place an override where it is meaningful in a nominal episode.

    late-right starts two frames before the controller begins a right turn;
    early-left starts inside a straight stretch.  Both read a 7-frame moving
    average of the command so controller noise does not split the stretches.
    """
    u = np.convolve(episode.steering, np.ones(7) / 7, mode="same")
    n = len(u)
    if kind == "late-right":
        for a, b in _runs(u > 0.1):
            start = a - 2
            if b - a >= 5 and start >= earliest and start + duration <= n:
                return AnomalyScenario(kind, int(start), int(start + duration))
    elif kind == "early-left":
        for a, b in _runs(np.abs(u) < 0.03):
            start = max(a + 5, earliest)
            if b - start >= duration + 5 and start + duration <= n:
                return AnomalyScenario(kind, int(start), int(start + duration))
    else:
        raise ValueError(f"unknown scenario kind {kind!r}")
    raise ValueError(f"no place for a {kind} scenario of {duration} frames in this episode")


def linked_pair(nominal: Episode, injected: Episode) -> tuple[Episode, Episode]:
    """Split an injected run into the two monitor test streams.

    Returns ``(cfam_episode, sfam_episode)``: the nominal frames paired with the
    override commands, and the overridden frames paired with the commands the
    controller actually wanted.
    """
    if len(nominal) != len(injected) or injected.anomaly is None:
        raise ValueError("need a nominal episode and its labeled injected counterpart")
    span = injected.anomaly
    cfam_u = np.where(span, injected.steering, nominal.steering)
    commanded = injected.commanded if injected.commanded is not None else injected.steering
    cfam = nominal.replace(steering=cfam_u, anomaly=span.copy(), commanded=None)
    sfam = injected.replace(steering=commanded.copy(), anomaly=span.copy(), commanded=None)
    return cfam, sfam
