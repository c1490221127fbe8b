"""Event data model, recording container, file I/O, and timestamp noise.

An event is one sensor spike (x, y, t, polarity) with t in integer
microseconds.  Recordings hold column arrays rather than per-event objects
so that downstream numeric code can stay vectorized.

File formats
------------
Event file: UTF-8 CSV, header ``t_us,x,y,p``, one event per line, with
``p`` in {0, 1} encoding polarity {-1, +1}.

Manifest file: JSON with keys ``sensor_width``, ``sensor_height``,
``categories`` and ``recordings`` (list of {path, label, subject, split});
recording paths are relative to the manifest's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import GeometryError, ParseError

CSV_HEADER = "t_us,x,y,p"


class Event(NamedTuple):
    x: int
    y: int
    t: int
    polarity: int


@dataclass(frozen=True)
class EventRecording:
    """A time-sorted stream of events plus sensor geometry and labels.

    Arrays are one entry per event and share ordering.  Construction
    validates geometry, coerces dtypes, and sorts by timestamp (stable),
    so instances are always in canonical form.
    """

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    sensor_width: int
    sensor_height: int
    label: str | None = None
    subject_id: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.int64).ravel()
        y = np.asarray(self.y, dtype=np.int64).ravel()
        t = np.asarray(self.t, dtype=np.int64).ravel()
        p = np.asarray(self.p, dtype=np.int64).ravel()
        n = len(t)
        if not (len(x) == len(y) == len(p) == n):
            raise ValueError("event column arrays must have equal length")
        bad = (x < 0) | (x >= self.sensor_width) | (y < 0) | (y >= self.sensor_height) | (t < 0)
        if bad.any():
            i = int(np.argmax(bad))
            raise GeometryError(
                f"event {i} out of bounds for {self.sensor_width}x{self.sensor_height} "
                f"sensor: {self.event(i, _raw=(x, y, t, p))}"
            )
        if n and not np.all(np.isin(p, (-1, 1))):
            i = int(np.argmax(~np.isin(p, (-1, 1))))
            raise ValueError(f"event {i} has polarity {p[i]}, expected -1 or +1")
        if n > 1 and np.any(np.diff(t) < 0):
            order = np.argsort(t, kind="stable")
            x, y, t, p = x[order], y[order], t[order], p[order]
        for name, arr in (("x", x), ("y", y), ("t", t), ("p", p)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.t)

    def event(self, i: int, _raw=None) -> Event:
        x, y, t, p = _raw if _raw is not None else (self.x, self.y, self.t, self.p)
        return Event(int(x[i]), int(y[i]), int(t[i]), int(p[i]))

    @property
    def duration(self) -> int:
        """Span from first to last event in microseconds (0 if < 2 events)."""
        return int(self.t[-1] - self.t[0]) if len(self) > 1 else 0


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    subject: str
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    """Index of recording files with labels and a subject-disjoint split."""

    sensor_width: int
    sensor_height: int
    categories: tuple
    recordings: tuple
    root: Path | None = None

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "recordings", tuple(self.recordings))
        splits_by_subject: dict[str, set] = {}
        for rec in self.recordings:
            if rec.split not in ("train", "test"):
                raise ValueError(f"unknown split {rec.split!r} for {rec.path}")
            if rec.label not in self.categories:
                raise ValueError(f"label {rec.label!r} of {rec.path} not in categories")
            splits_by_subject.setdefault(rec.subject, set()).add(rec.split)
        for subject, splits in splits_by_subject.items():
            if len(splits) > 1:
                raise ValueError(f"subject {subject!r} appears in both splits")

    def split(self, which: str) -> list:
        return [r for r in self.recordings if r.split == which]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() or self.root is None else self.root / p


def load_recording(
    path,
    sensor_width: int,
    sensor_height: int,
    label: str | None = None,
    subject_id: str = "",
) -> EventRecording:
    """Read an event CSV file into a recording.

    Events are sorted by timestamp if the file is unsorted.  Raises
    ParseError for malformed content and GeometryError for events outside
    the sensor array.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ParseError(f"{path}: line 1: expected header {CSV_HEADER!r}, got {header!r}")
        try:
            data = np.loadtxt(fh, dtype=np.int64, delimiter=",", ndmin=2)
        except ValueError as err:
            raise ParseError(f"{path}: {err}") from err
    if data.size == 0:
        data = data.reshape(0, 4)
    if data.shape[1] != 4:
        raise ParseError(f"{path}: expected 4 columns ({CSV_HEADER}), got {data.shape[1]}")
    if len(data) and not np.all((data[:, 3] == 0) | (data[:, 3] == 1)):
        bad = int(np.argmax((data[:, 3] != 0) & (data[:, 3] != 1)))
        raise ParseError(f"{path}: line {bad + 2}: polarity column must be 0 or 1")
    return EventRecording(
        x=data[:, 1],
        y=data[:, 2],
        t=data[:, 0],
        p=data[:, 3] * 2 - 1,
        sensor_width=sensor_width,
        sensor_height=sensor_height,
        label=label,
        subject_id=subject_id,
    )


def save_recording(rec: EventRecording, path) -> None:
    """Write a recording as an event CSV; load_recording inverts it exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = np.column_stack([rec.t, rec.x, rec.y, (rec.p + 1) // 2])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        np.savetxt(fh, cols, fmt="%d", delimiter=",")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as err:
        raise ParseError(f"{path}: {err}") from err
    try:
        recordings = tuple(
            ManifestEntry(r["path"], r["label"], r["subject"], r["split"])
            for r in doc["recordings"]
        )
        manifest = DatasetManifest(
            sensor_width=int(doc["sensor_width"]),
            sensor_height=int(doc["sensor_height"]),
            categories=tuple(doc["categories"]),
            recordings=recordings,
            root=path.parent,
        )
    except (KeyError, TypeError) as err:
        raise ParseError(f"{path}: missing or malformed field: {err}") from err
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "sensor_width": manifest.sensor_width,
        "sensor_height": manifest.sensor_height,
        "categories": list(manifest.categories),
        "recordings": [
            {"path": r.path, "label": r.label, "subject": r.subject, "split": r.split}
            for r in manifest.recordings
        ],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_entry(manifest: DatasetManifest, entry: ManifestEntry) -> EventRecording:
    return load_recording(
        manifest.resolve(entry),
        manifest.sensor_width,
        manifest.sensor_height,
        label=entry.label,
        subject_id=entry.subject,
    )


def add_timestamp_noise(rec: EventRecording, t_delta: int, seed: int) -> EventRecording:
    """Degrade spike-time precision by a uniform shift of each timestamp.

    Each t moves by an independent integer draw from [-t_delta, +t_delta]
    (inclusive); results clamp at 0 and the recording is re-sorted.  The
    (x, y, polarity) of every event is untouched.  Deterministic per seed.
    """
    if t_delta < 0:
        raise ValueError("t_delta must be >= 0")
    rng = np.random.default_rng(seed)
    shift = rng.integers(-t_delta, t_delta, size=len(rec), endpoint=True)
    return replace(rec, t=np.maximum(rec.t + shift, 0))
