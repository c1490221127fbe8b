"""Event-removal perturbation of an ROI sample.

Every event in the patch is replaced by its nearest spatiotemporal
neighbor (itself excluded), the resulting multiset is collapsed to a set,
and the survivors are re-counted into the patch.  The map never invents
events and never increases the event count; filters that barely notice it
are robust to stochastic event dropout.

Distance is Euclidean in (pixel, pixel, t / time_scale) space, so one
voxel edge is one unit along every axis; time_scale defaults to the voxel
duration and is exposed because the metric choice is load-bearing.
"""

from __future__ import annotations

import numpy as np

from . import accel
from .voxel import RoiSample, count_events


def _columns(events) -> tuple:
    ev = np.asarray(events, dtype=np.int64)
    if ev.ndim != 2 or ev.shape[1] < 3:
        raise ValueError("events must be an (n, 3) array of (x, y, t) rows")
    return (
        ev[:, 0].astype(np.float64),
        ev[:, 1].astype(np.float64),
        ev[:, 2].astype(np.float64),
    )


def nearest_neighbor(events, i: int, t_vox: float) -> int:
    """Index of the event nearest to events[i], ties to the smallest index.

    Distance is (dx^2 + dy^2 + (dt / t_vox)^2); needs at least two events.
    """
    xs, ys, ts = _columns(events)
    n = len(xs)
    if n < 2:
        raise ValueError("nearest_neighbor needs at least 2 events")
    dx = xs - xs[i]
    dy = ys - ys[i]
    dt = (ts - ts[i]) / t_vox
    d2 = dx * dx + dy * dy + dt * dt
    d2[i] = np.inf
    return int(np.argmin(d2))


def nn_map(events, t_vox: float) -> np.ndarray:
    """Nearest-neighbor index for every event at once."""
    xs, ys, ts = _columns(events)
    if len(xs) < 2:
        raise ValueError("nn_map needs at least 2 events")
    return accel.nn_indices(xs, ys, ts, float(t_vox))


def phi(sample: RoiSample, t_vox: int, time_scale: float | None = None) -> RoiSample:
    """Apply the removal perturbation to a patch.

    Each event is replaced by its nearest neighbor under the scaled metric;
    duplicate survivors collapse, so the output count never exceeds the
    input count.  A singleton patch maps to itself.  Deterministic.
    """
    n = len(sample.events)
    if n <= 1:
        return sample
    scale = float(t_vox if time_scale is None else time_scale)
    idx = nn_map(sample.events, scale)
    survivors = np.unique(sample.events[idx], axis=0)
    return RoiSample(
        values=count_events(survivors, sample.a, sample.k, t_vox),
        origin=sample.origin,
        events=survivors,
        a=sample.a,
        k=sample.k,
    )
