"""Episodes, their on-disk directory format, and training windows.

An episode directory holds ``episode.csv`` with the header
``t,timestamp,image,steering,anomaly`` and one 8-bit PNG per record.  An
optional ``meta.txt`` (key = value) carries the source tag and steering range.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..errors import EpisodeFormatError
from ..kvfile import read_kv, write_kv

MANIFEST = "episode.csv"
META = "meta.txt"
HEADER = ["t", "timestamp", "image", "steering", "anomaly"]
SOURCES = ("synthetic", "indoor-format", "udacity-format")


@dataclass(frozen=True)
class EpisodeRecord:
    t: int
    timestamp: float
    frame_path: str
    u: float
    anomaly: bool | None


@dataclass(eq=False)
class Episode:
    """Time-ordered camera frames with steering commands.

    ``pixels`` is uint8 of shape (T, 3, H, W); :attr:`frames` gives the float
    view in [0, 1].  ``commanded`` (optional, not persisted) holds what the
    controller asked for when it differs from the executed ``steering``.
    """

    pixels: np.ndarray
    steering: np.ndarray
    timestamps: np.ndarray
    t: np.ndarray | None = None
    anomaly: np.ndarray | None = None
    source: str = "synthetic"
    steering_range: tuple[float, float] = (-0.24, 0.28)
    image_names: list[str] | None = None
    commanded: np.ndarray | None = None
    trajectory: np.ndarray | None = None   # (T, 3): x, y, heading for synthetic runs

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        n = len(self.pixels)
        if self.pixels.ndim != 4 or self.pixels.shape[1] != 3:
            raise ValueError(f"pixels must be (T, 3, H, W), got {self.pixels.shape}")
        self.steering = np.asarray(self.steering, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.t = np.arange(n) if self.t is None else np.asarray(self.t, dtype=np.int64)
        if self.anomaly is not None:
            self.anomaly = np.asarray(self.anomaly, dtype=bool)
        for name in ("steering", "timestamps", "t", "anomaly", "commanded"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ValueError(f"{name} has {len(arr)} entries for {n} frames")
        if not np.all(np.isfinite(self.steering)):
            raise ValueError("steering commands must be finite")
        if n > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("frame indices must be strictly increasing")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source tag {self.source!r}")
        if self.image_names is None:
            self.image_names = [f"{int(i):06d}.png" for i in self.t]

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(self.pixels.shape[2:])

    @property
    def frames(self) -> np.ndarray:
        return self.pixels.astype(np.float32) / np.float32(255.0)

    def frame(self, i: int) -> np.ndarray:
        return self.pixels[i].astype(np.float32) / np.float32(255.0)

    @property
    def labeled(self) -> bool:
        return self.anomaly is not None

    @property
    def records(self) -> list[EpisodeRecord]:
        anomaly = self.anomaly if self.anomaly is not None else [None] * len(self)
        return [EpisodeRecord(int(t), float(ts), name, float(u),
                              None if a is None else bool(a))
                for t, ts, name, u, a in zip(self.t, self.timestamps, self.image_names,
                                             self.steering, anomaly)]

    def replace(self, **changes) -> "Episode":
        fields = dict(pixels=self.pixels, steering=self.steering, timestamps=self.timestamps,
                      t=self.t, anomaly=self.anomaly, source=self.source,
                      steering_range=self.steering_range, image_names=self.image_names,
                      commanded=self.commanded, trajectory=self.trajectory)
        fields.update(changes)
        return Episode(**fields)

    def equals(self, other: "Episode") -> bool:
        """Record-level equality (frames, commands, labels, timestamps)."""
        same_labels = (self.anomaly is None and other.anomaly is None) or (
            self.anomaly is not None and other.anomaly is not None
            and np.array_equal(self.anomaly, other.anomaly))
        return (self.pixels.shape == other.pixels.shape
                and np.array_equal(self.pixels, other.pixels)
                and np.array_equal(self.steering, other.steering)
                and np.array_equal(self.timestamps, other.timestamps)
                and np.array_equal(self.t, other.t)
                and same_labels and self.source == other.source)


def save_episode(episode: Episode, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / MANIFEST, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for i in range(len(episode)):
            name = episode.image_names[i]
            Image.fromarray(episode.pixels[i].transpose(1, 2, 0)).save(d / name, format="PNG")
            label = "" if episode.anomaly is None else str(int(episode.anomaly[i]))
            w.writerow([int(episode.t[i]), repr(float(episode.timestamps[i])), name,
                        repr(float(episode.steering[i])), label])
    lo, hi = episode.steering_range
    write_kv(d / META, {"source": episode.source, "steering_lo": float(lo),
                        "steering_hi": float(hi)})
    return d


def _read_image(path: Path, index: int, size=None) -> np.ndarray:
    if not path.is_file():
        raise EpisodeFormatError(f"record {index}: image file {path.name!r} is missing")
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise EpisodeFormatError(f"record {index}: cannot decode {path.name!r} ({exc})") from None
    return arr.transpose(2, 0, 1)


def load_episode(directory) -> Episode:
    d = Path(directory)
    manifest = d / MANIFEST
    if not manifest.is_file():
        raise EpisodeFormatError(f"{d}: missing manifest {MANIFEST}")
    with open(manifest, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != HEADER:
        raise EpisodeFormatError(f"{manifest}: header must be {','.join(HEADER)}")
    rows = rows[1:]
    if not rows:
        raise EpisodeFormatError(f"{manifest}: no records")
    meta = read_kv(d / META) if (d / META).is_file() else {}
    t, ts, names, steer, labels, pixels = [], [], [], [], [], []
    for i, row in enumerate(rows):
        if len(row) != len(HEADER):
            raise EpisodeFormatError(f"record {i}: expected {len(HEADER)} fields, got {len(row)}")
        try:
            t.append(int(row[0]))
            ts.append(float(row[1]))
            steer.append(float(row[3]))
        except ValueError as exc:
            raise EpisodeFormatError(f"record {i}: {exc}") from None
        if not math.isfinite(steer[-1]):
            raise EpisodeFormatError(f"record {i}: steering is not finite")
        if i and t[-1] <= t[-2]:
            raise EpisodeFormatError(f"record {i}: frame index {t[-1]} not increasing")
        labels.append(row[4].strip())
        names.append(row[2])
        img = _read_image(d / row[2], i)
        if pixels and img.shape != pixels[0].shape:
            raise EpisodeFormatError(
                f"record {i}: image size {img.shape[1:]} differs from {pixels[0].shape[1:]}")
        pixels.append(img)
    if all(s == "" for s in labels):
        anomaly = None
    elif any(s == "" for s in labels):
        raise EpisodeFormatError(f"{manifest}: anomaly column partially filled")
    else:
        try:
            anomaly = np.array([bool(int(s)) for s in labels])
        except ValueError:
            raise EpisodeFormatError(f"{manifest}: anomaly labels must be 0 or 1") from None
    source = meta.get("source", "indoor-format")
    rng = (float(meta.get("steering_lo", -0.24)), float(meta.get("steering_hi", 0.28)))
    try:
        return Episode(np.stack(pixels), steer, ts, t=t, anomaly=anomaly, source=source,
                       steering_range=rng, image_names=names)
    except ValueError as exc:
        raise EpisodeFormatError(f"{d}: {exc}") from None


_UDACITY_IMAGE = ("filename", "image", "center", "frame_path")
_UDACITY_ANGLE = ("angle", "steering", "steering_angle")


def load_udacity(table, image_root=None, size=None, camera: str = "center_camera",
                 steering_range=(-0.52, 0.56)) -> Episode:
    """Read a Udacity-style driving log (timestamp, image path, steering angle).

    Column names are matched case-insensitively; when a ``frame_id`` column is
    present only rows of ``camera`` are kept.  Nanosecond timestamps are
    converted to seconds.  ``size`` = (H, W) resizes frames on ingest.
    """
    table = Path(table)
    root = Path(image_root) if image_root is not None else table.parent
    with open(table, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise EpisodeFormatError(f"{table}: empty table")
        cols = {c.strip().lower(): c for c in reader.fieldnames}
        rows = list(reader)

    def pick(options):
        for o in options:
            if o in cols:
                return cols[o]
        raise EpisodeFormatError(f"{table}: none of the columns {options} present")

    c_ts, c_img, c_ang = pick(("timestamp",)), pick(_UDACITY_IMAGE), pick(_UDACITY_ANGLE)
    c_frame = cols.get("frame_id")
    if c_frame is not None:
        rows = [r for r in rows if r[c_frame].strip() == camera]
    if not rows:
        raise EpisodeFormatError(f"{table}: no records")
    ts, steer, pixels, names = [], [], [], []
    for i, r in enumerate(rows):
        try:
            stamp = float(r[c_ts])
            steer.append(float(r[c_ang]))
        except ValueError as exc:
            raise EpisodeFormatError(f"record {i}: {exc}") from None
        ts.append(stamp * 1e-9 if stamp > 1e12 else stamp)
        name = r[c_img].strip()
        img = _read_image(root / name, i, size)
        if pixels and img.shape != pixels[0].shape:
            raise EpisodeFormatError(f"record {i}: image size differs; pass size= to resize")
        pixels.append(img)
        names.append(Path(name).with_suffix(".png").name)
    order = np.argsort(ts, kind="stable")
    return Episode(np.stack(pixels)[order], np.array(steer)[order], np.array(ts)[order],
                   source="udacity-format", steering_range=tuple(steering_range),
                   image_names=[names[i] for i in order])


@dataclass
class TrainingWindow:
    """Frames x[t-3..t], commands u[t-2..t+1] and the target frame x[t+1]."""

    t: int
    frames: np.ndarray      # (4, 3, H, W)
    commands: np.ndarray    # (4,)
    target: np.ndarray      # (3, H, W)


def make_windows(episode: Episode, frames: np.ndarray | None = None) -> list[TrainingWindow]:
    """One window per t in [3, len - 2], in order.

    ``frames`` may pass a precomputed float array to share memory across windows.
    """
    n = len(episode)
    if n < 5:
        raise ValueError(f"episode needs at least 5 records for windows, got {n}")
    f = episode.frames if frames is None else frames
    u = episode.steering
    return [TrainingWindow(t, f[t - 3:t + 1], u[t - 2:t + 2], f[t + 1])
            for t in range(3, n - 1)]
