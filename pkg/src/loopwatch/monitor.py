"""Runtime pipeline: score an episode with both monitors, threshold, trigger, evaluate.

Report rows are indexed by frame.  The CFAM entry of row ``t`` scores the pair
(x[t], u[t]).  The SFAM entry of row ``t`` scores the transition into frame
``t``: predictions from x[t-4..t-1] and u[t-3..t-1] conditioned on each grid
command, compared with the observed x[t] and the command u[t].  Rows 0..3
therefore carry no SFAM entry.
"""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .cfam import Cebgan, energy_sweeps, resize_frames
from .dataio.episode import Episode, EpisodeFormatError
from .kvfile import write_kv
from .metrics import ActionGrid, argmin_lowest, batch_ssim, make_action_grid
from .sfam.prednet import PredNet
from .sfam.scoring import conditioned_predictions_batch

REPORT_HEADER = ["t", "cfam_dev", "sfam_dev", "cfam_flag", "sfam_flag", "cfam_trigger",
                 "sfam_trigger"]
SFAM_CONTEXT = 4


@dataclass
class MonitorConfig:
    grid_lo: float = -0.24
    grid_hi: float = 0.28
    grid_n: int = 15
    tau_cfam: float = math.inf
    tau_sfam: float = math.inf
    k: int = 3
    n: int = 5
    resize: bool = True
    batch_size: int = 16
    cfam_checkpoint: str = ""
    sfam_checkpoint: str = ""

    def __post_init__(self):
        if not 1 <= self.k <= self.n:
            raise ValueError(f"window needs 1 <= k <= n, got k={self.k}, n={self.n}")
        if self.tau_cfam < 0 or self.tau_sfam < 0:
            raise ValueError("thresholds must be non-negative")

    @property
    def grid(self) -> ActionGrid:
        return make_action_grid(self.grid_lo, self.grid_hi, self.grid_n)


class WindowTrigger:
    """Streaming k-of-n rule over the most recent instantaneous flags."""

    def __init__(self, k: int, n: int):
        if not 1 <= k <= n:
            raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
        self.k = k
        self.bits = deque(maxlen=n)

    def update(self, flag: bool) -> bool:
        self.bits.append(bool(flag))
        return sum(self.bits) >= self.k


def window_trigger(flags, k: int, n: int) -> np.ndarray:
    rule = WindowTrigger(k, n)
    return np.array([rule.update(f) for f in flags], dtype=bool)


@dataclass
class MonitorReport:
    """Per-frame deviations, flags and triggers (NaN deviation = not scored)."""

    t: np.ndarray
    cfam_dev: np.ndarray
    sfam_dev: np.ndarray
    cfam_flag: np.ndarray
    sfam_flag: np.ndarray
    cfam_trigger: np.ndarray
    sfam_trigger: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    def equals(self, other: "MonitorReport") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k), equal_nan=k.endswith("dev"))
                   for k in REPORT_HEADER)

    def save(self, path) -> Path:
        path = Path(path)
        if path.suffix != ".csv":
            path.mkdir(parents=True, exist_ok=True)
            path = path / "report.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for i in range(len(self)):
                w.writerow([int(self.t[i]), _fmt(self.cfam_dev[i]), _fmt(self.sfam_dev[i]),
                            int(self.cfam_flag[i]), int(self.sfam_flag[i]),
                            int(self.cfam_trigger[i]), int(self.sfam_trigger[i])])
        if self.meta:
            write_kv(path.with_name(path.stem + "_meta.txt"), self.meta)
        return path

    @classmethod
    def load(cls, path) -> "MonitorReport":
        path = Path(path)
        if path.is_dir():
            path = path / "report.csv"
        if not path.is_file():
            raise EpisodeFormatError(f"missing report {path}")
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != REPORT_HEADER:
            raise EpisodeFormatError(f"{path}: header must be {','.join(REPORT_HEADER)}")
        try:
            cols = list(zip(*rows[1:])) if len(rows) > 1 else [()] * len(REPORT_HEADER)
            t = np.array(cols[0], dtype=np.int64)
            devs = [np.array([float(v) if v else np.nan for v in c]) for c in cols[1:3]]
            bits = [np.array([int(v) for v in c], dtype=bool) for c in cols[3:]]
        except ValueError as exc:
            raise EpisodeFormatError(f"{path}: {exc}") from None
        return cls(t, *devs, *bits)


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


def apply_thresholds(t, cfam_dev, sfam_dev, config: MonitorConfig, meta=None) -> MonitorReport:
    cfam_dev = np.asarray(cfam_dev, dtype=np.float64)
    sfam_dev = np.asarray(sfam_dev, dtype=np.float64)
    # NaN (unscored) compares False, so it never flags
    cfam_flag = cfam_dev > config.tau_cfam
    sfam_flag = sfam_dev > config.tau_sfam
    return MonitorReport(np.asarray(t), cfam_dev, sfam_dev, cfam_flag, sfam_flag,
                         window_trigger(cfam_flag, config.k, config.n),
                         window_trigger(sfam_flag, config.k, config.n), dict(meta or {}))


def rethreshold(report: MonitorReport, config: MonitorConfig) -> MonitorReport:
    return apply_thresholds(report.t, report.cfam_dev, report.sfam_dev, config, report.meta)


# -- scoring -----------------------------------------------------------------

def _frames_for(frames: np.ndarray, size, resize: bool, who: str) -> torch.Tensor:
    x = torch.from_numpy(frames)
    if tuple(x.shape[-2:]) != tuple(size):
        if not resize:
            raise ValueError(f"{who} expects {size[0]}x{size[1]} frames, episode has "
                             f"{x.shape[-2]}x{x.shape[-1]} (enable resize)")
        x = resize_frames(x, size)
    return x


def cfam_deviations(episode: Episode, model: Cebgan, grid: ActionGrid, resize: bool = True,
                    batch_size: int = 64) -> np.ndarray:
    s = model.config.image_size
    x = _frames_for(episode.frames, (s, s), resize, "CFAM")
    values = grid.values
    out = np.empty(len(episode))
    for start in range(0, len(episode), batch_size):
        profiles = energy_sweeps(x[start:start + batch_size], grid, model)
        for j, p in enumerate(profiles):
            out[start + j] = abs(episode.steering[start + j] - values[argmin_lowest(p.energies)])
    return out


def sfam_profiles(episode: Episode, model: PredNet, grid: ActionGrid, resize: bool = True,
                  batch_size: int = 16, kernel: int = 5) -> np.ndarray:
    """DSSIM profiles (T, N); rows 0..3 are NaN."""
    x = _frames_for(episode.frames, (model.height, model.width), resize, "SFAM")
    u = torch.tensor(episode.steering, dtype=x.dtype)
    n_frames = len(episode)
    out = np.full((n_frames, grid.n), np.nan)
    rows = list(range(SFAM_CONTEXT, n_frames))
    for start in range(0, len(rows), batch_size):
        chunk = rows[start:start + batch_size]
        frames = torch.stack([x[r - 4:r] for r in chunk])
        commands = torch.stack([u[r - 3:r] for r in chunk])
        preds = conditioned_predictions_batch(frames, commands, grid, model)
        b, n = preds.shape[:2]
        actual = torch.stack([x[r] for r in chunk])
        with torch.no_grad():
            s = batch_ssim(preds.flatten(0, 1), actual.repeat_interleave(n, dim=0), kernel)
        out[chunk] = ((1.0 - s) / 2.0).reshape(b, n).double().numpy()
    return out


def sfam_deviations(episode: Episode, model: PredNet, grid: ActionGrid, resize: bool = True,
                    batch_size: int = 16) -> np.ndarray:
    profiles = sfam_profiles(episode, model, grid, resize, batch_size)
    values = grid.values
    out = np.full(len(episode), np.nan)
    for r in range(SFAM_CONTEXT, len(episode)):
        out[r] = abs(episode.steering[r] - values[argmin_lowest(profiles[r])])
    return out


def run_monitor(episodes, config: MonitorConfig, cfam: Cebgan | None = None,
                sfam: PredNet | None = None) -> MonitorReport:
    """Score an episode, or a linked ``(cfam_episode, sfam_episode)`` pair.

    A missing model leaves its deviations unscored (NaN, never flagged).
    """
    if isinstance(episodes, Episode):
        cfam_ep = sfam_ep = episodes
    else:
        cfam_ep, sfam_ep = episodes
        if len(cfam_ep) != len(sfam_ep):
            raise ValueError("linked episodes must have the same length")
    grid = config.grid
    n = len(cfam_ep)
    cfam_dev = (cfam_deviations(cfam_ep, cfam, grid, config.resize)
                if cfam is not None else np.full(n, np.nan))
    sfam_dev = (sfam_deviations(sfam_ep, sfam, grid, config.resize, config.batch_size)
                if sfam is not None else np.full(n, np.nan))
    return apply_thresholds(cfam_ep.t, cfam_dev, sfam_dev, config,
                            {"frames": n, "source": cfam_ep.source})


class StreamingMonitor:
    """Frame-by-frame monitor holding only the last four frames and the flag windows."""

    def __init__(self, config: MonitorConfig, cfam: Cebgan | None = None,
                 sfam: PredNet | None = None):
        self.config = config
        self.grid = config.grid
        self.cfam, self.sfam = cfam, sfam
        self.frames = deque(maxlen=SFAM_CONTEXT)
        self.commands = deque(maxlen=SFAM_CONTEXT)
        self.cfam_rule = WindowTrigger(config.k, config.n)
        self.sfam_rule = WindowTrigger(config.k, config.n)

    def push(self, frame: np.ndarray, u: float) -> dict:
        cfg = self.config
        one = Episode((np.clip(np.rint(frame * 255), 0, 255)).astype(np.uint8)[None],
                      [u], [0.0])
        cfam_dev = sfam_dev = math.nan
        if self.cfam is not None:
            cfam_dev = float(cfam_deviations(one, self.cfam, self.grid, cfg.resize)[0])
        if self.sfam is not None and len(self.frames) == SFAM_CONTEXT:
            hist = Episode(np.stack(list(self.frames) + [one.pixels[0]]),
                           list(self.commands) + [u], np.zeros(SFAM_CONTEXT + 1))
            sfam_dev = float(sfam_deviations(hist, self.sfam, self.grid, cfg.resize)[-1])
        self.frames.append(one.pixels[0])
        self.commands.append(float(u))
        cfam_flag = cfam_dev > cfg.tau_cfam
        sfam_flag = sfam_dev > cfg.tau_sfam
        return dict(cfam_dev=cfam_dev, sfam_dev=sfam_dev, cfam_flag=cfam_flag,
                    sfam_flag=sfam_flag, cfam_trigger=self.cfam_rule.update(cfam_flag),
                    sfam_trigger=self.sfam_rule.update(sfam_flag))


# -- calibration and evaluation ------------------------------------------------

def nearest_rank(values, percentile: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    if len(v) == 0:
        raise ValueError("no values to take a percentile of")
    if not 0 < percentile <= 100:
        raise ValueError(f"percentile must lie in (0, 100], got {percentile}")
    rank = max(1, math.ceil(percentile / 100.0 * len(v)))
    return float(v[rank - 1])


def calibrate_threshold(nominal_reports, percentile: float = 99.0,
                        min_frames: int = 100) -> tuple[float, float]:
    """Per-monitor thresholds at a nearest-rank percentile of pooled nominal deviations."""
    taus = []
    for key in ("cfam_dev", "sfam_dev"):
        pool = np.concatenate([getattr(r, key) for r in nominal_reports]) if nominal_reports \
            else np.array([])
        pool = pool[~np.isnan(pool)]
        if len(pool) == 0:
            raise ValueError(f"no scored {key} values to calibrate on")
        if len(pool) < min_frames:
            raise ValueError(f"need at least {min_frames} scored frames, got {len(pool)} ({key})")
        taus.append(nearest_rank(pool, percentile))
    return taus[0], taus[1]


def _spans(labels: np.ndarray):
    edges = np.diff(np.concatenate([[0], labels.astype(int), [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


@dataclass
class MonitorMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    spans: int
    detected_spans: int
    latency: float            # mean frames from span onset to first trigger (detected spans)
    latencies: list
    false_flag_rate: float    # flags on nominal frames / nominal frames
    false_trigger_rate: float

    @property
    def span_detection_rate(self) -> float:
        return self.detected_spans / self.spans if self.spans else math.nan


def _monitor_metrics(dev, flags, triggers, labels) -> MonitorMetrics:
    scored = ~np.isnan(dev)
    f, tr, lab = flags[scored], triggers[scored], labels[scored]
    tp = int(np.sum(f & lab))
    fp = int(np.sum(f & ~lab))
    fn = int(np.sum(~f & lab))
    tn = int(np.sum(~f & ~lab))
    precision = tp / (tp + fp) if tp + fp else math.nan
    recall = tp / (tp + fn) if tp + fn else math.nan
    latencies = []
    spans = _spans(labels)
    for a, b in spans:
        hits = np.flatnonzero(triggers[a:b])
        if len(hits):
            latencies.append(int(hits[0]))
    nominal = ~lab
    return MonitorMetrics(
        tp, fp, fn, tn, precision, recall, len(spans), len(latencies),
        float(np.mean(latencies)) if latencies else math.nan, latencies,
        float(np.mean(f[nominal])) if nominal.any() else math.nan,
        float(np.mean(tr[nominal])) if nominal.any() else math.nan)


@dataclass
class Metrics:
    cfam: MonitorMetrics
    sfam: MonitorMetrics

    def flat(self) -> dict:
        out = {}
        for name in ("cfam", "sfam"):
            m = getattr(self, name)
            for key, value in vars(m).items():
                if key == "latencies":
                    continue
                out[f"{name}_{key}"] = value
            out[f"{name}_span_detection_rate"] = m.span_detection_rate
        return out

    def save(self, path) -> None:
        write_kv(path, self.flat())


def evaluate(report: MonitorReport, episode: Episode) -> Metrics:
    """Frame-level confusion counts, span detection and latency per monitor.

    A span counts as detected when the monitor's trigger fires inside it; the
    latency is the offset of that first trigger from the span start.
    """
    if episode.anomaly is None:
        raise ValueError("episode carries no anomaly labels")
    if len(episode) != len(report):
        raise ValueError(f"report has {len(report)} rows for {len(episode)} frames")
    labels = episode.anomaly
    return Metrics(
        _monitor_metrics(report.cfam_dev, report.cfam_flag, report.cfam_trigger, labels),
        _monitor_metrics(report.sfam_dev, report.sfam_flag, report.sfam_trigger, labels))


def with_thresholds(config: MonitorConfig, tau_cfam: float, tau_sfam: float) -> MonitorConfig:
    return replace(config, tau_cfam=tau_cfam, tau_sfam=tau_sfam)
