"""Voxel grids: event streams binned into dense 3D spike-count arrays.

The grid axes are (y, x, time-bin) with a bin width of t_vox microseconds.
Training patches (ROI samples) are cut from the grid and keep their
contributing events so they can be perturbed later.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError
from .events import EventRecording


@dataclass(frozen=True)
class VoxelGrid:
    """Dense (height, width, n_bins) spike-count array."""

    counts: np.ndarray
    t_vox: int
    t_origin: int

    @property
    def n_bins(self) -> int:
        return self.counts.shape[2]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class RoiSample:
    """Flattened a*a*k patch of a voxel grid plus its contributing events.

    ``values`` flattens the (a, a, k) patch in C order with axes
    (y, x, bin).  ``events`` holds (x, y, t) rows relative to the patch
    corner: x, y in [0, a) and t in [0, k*t_vox) microseconds.
    """

    values: np.ndarray
    origin: tuple
    events: np.ndarray
    a: int
    k: int

    def __len__(self) -> int:
        return len(self.events)


def count_events(events: np.ndarray, a: int, k: int, t_vox: int) -> np.ndarray:
    """Count ROI-relative (x, y, t) events into a flat (a*a*k,) vector."""
    if len(events) == 0:
        return np.zeros(a * a * k, dtype=np.int64)
    x, y, t = events[:, 0], events[:, 1], events[:, 2]
    idx = (y * a + x) * k + t // t_vox
    return np.bincount(idx, minlength=a * a * k).astype(np.int64)


def voxelize(rec: EventRecording, t_vox: int, t_origin: int | None = None) -> VoxelGrid:
    """Bin a recording into a dense spike-count grid.

    Each event with t >= t_origin increments the voxel at
    (y, x, (t - t_origin) // t_vox); earlier events are ignored.  The bin
    count covers the last kept event; an empty selection yields 0 bins.
    """
    if t_vox <= 0:
        raise ValueError("t_vox must be positive")
    h, w = rec.sensor_height, rec.sensor_width
    if t_origin is None:
        t_origin = int(rec.t[0]) if len(rec) else 0
    keep = rec.t >= t_origin
    t = rec.t[keep]
    if len(t) == 0:
        return VoxelGrid(np.zeros((h, w, 0), dtype=np.int64), t_vox, t_origin)
    n_bins = int((t[-1] - t_origin) // t_vox) + 1
    bins = (t - t_origin) // t_vox
    flat = (rec.y[keep] * w + rec.x[keep]) * n_bins + bins
    counts = np.bincount(flat, minlength=h * w * n_bins).reshape(h, w, n_bins)
    return VoxelGrid(counts.astype(np.int64), t_vox, t_origin)


def partition_slabs(grid: VoxelGrid, k: int) -> list:
    """Split a grid into consecutive k-bin slabs; trailing remainder drops."""
    if k < 1:
        raise ValueError("k must be >= 1")
    n_slabs = grid.n_bins // k
    return [
        VoxelGrid(grid.counts[:, :, i * k : (i + 1) * k], grid.t_vox, grid.t_origin + i * k * grid.t_vox)
        for i in range(n_slabs)
    ]


def sample_rois(
    rec: EventRecording,
    a: int,
    k: int,
    t_vox: int,
    m: int,
    seed: int,
) -> list:
    """Draw m patches of shape (a, a, k) at uniform random in-bounds origins.

    Patches containing zero events are rejected and redrawn, up to a cap of
    100*m draws; exhausting the cap (or a recording too small to host any
    patch) raises InsufficientDataError.  Deterministic per seed.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if a > min(rec.sensor_width, rec.sensor_height):
        raise ValueError("patch side a exceeds sensor dimensions")
    grid = voxelize(rec, t_vox)
    h, w, nb = grid.counts.shape
    if len(rec) == 0 or nb < k:
        raise InsufficientDataError(
            f"recording has {len(rec)} events in {nb} bins; cannot host an {a}x{a}x{k} patch"
        )
    rng = np.random.default_rng(seed)
    t0 = grid.t_origin
    out: list[RoiSample] = []
    draws = 0
    cap = 100 * m
    while len(out) < m and draws < cap:
        draws += 1
        x0 = int(rng.integers(0, w - a + 1))
        y0 = int(rng.integers(0, h - a + 1))
        b0 = int(rng.integers(0, nb - k + 1))
        t_lo = t0 + b0 * t_vox
        i0, i1 = np.searchsorted(rec.t, [t_lo, t_lo + k * t_vox], side="left")
        if i0 == i1:
            continue
        x = rec.x[i0:i1]
        y = rec.y[i0:i1]
        inside = (x >= x0) & (x < x0 + a) & (y >= y0) & (y < y0 + a)
        if not inside.any():
            continue
        ev = np.column_stack([x[inside] - x0, y[inside] - y0, rec.t[i0:i1][inside] - t_lo])
        out.append(
            RoiSample(
                values=count_events(ev, a, k, t_vox),
                origin=(x0, y0, b0),
                events=ev,
                a=a,
                k=k,
            )
        )
    if len(out) < m:
        raise InsufficientDataError(
            f"drew {draws} patches but only {len(out)}/{m} contained events"
        )
    return out
