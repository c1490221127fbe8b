"""Deterministic synthetic event scenes for training and verification.

Each pattern emits events on an analytically moving edge set via a Poisson
process, plus optional uniform background noise, so labeled multi-class
datasets of any size can be produced on a desk without recorded sensor
data.  Everything is driven by explicit seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .events import DatasetManifest, EventRecording, ManifestEntry, save_manifest, save_recording

PATTERNS = (
    "moving_bar",
    "oscillating_bar",
    "rotating_edge",
    "expanding_ring",
    "clap",
    "flicker",
    "grating_h",
    "grating_v",
)

GRATING_PERIOD = 4  # stripe spacing in pixels


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one synthetic recording class.

    Edge events arrive in short per-pixel bursts (an edge crossing a pixel
    fires several spikes within burst_spread microseconds), matching how
    event sensors respond to a moving contrast edge; burst_size is the
    mean number of spikes per crossing and the total signal rate stays at
    event_rate regardless of burst_size.
    """

    class_id: str
    pattern: str
    velocity: float
    duration: int
    event_rate: float
    background_noise_rate: float
    seed: int
    phase: float = 0.0
    burst_size: float = 2.5
    burst_spread: int = 1000
    flash_rate: float = 0.0
    flash_spread: int = 5000

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}; choose from {PATTERNS}")
        if self.duration <= 0:
            raise ValueError("duration must be positive microseconds")
        if self.event_rate <= 0:
            raise ValueError("event_rate must be positive")
        if self.background_noise_rate < 0:
            raise ValueError("background_noise_rate must be >= 0")
        if self.burst_size < 1 or self.burst_spread < 1:
            raise ValueError("burst_size must be >= 1 and burst_spread >= 1")
        if self.flash_rate < 0 or self.flash_spread < 1:
            raise ValueError("flash_rate must be >= 0 and flash_spread >= 1")


def _pattern_pixels(spec: SceneSpec, t_us: np.ndarray, width: int, height: int, rng) -> tuple:
    """Pixel per event on the pattern's active edge set at each event time."""
    t = t_us / 1e6
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    v = spec.velocity
    if spec.pattern == "moving_bar":
        x = np.floor(spec.phase + v * t) % width
        y = rng.integers(0, height, len(t))
    elif spec.pattern == "oscillating_bar":
        amp = width / 8.0
        omega = v / amp  # peak horizontal speed = velocity
        x = np.floor(cx + amp * np.sin(omega * t + spec.phase))
        y = rng.integers(0, height, len(t))
    elif spec.pattern == "rotating_edge":
        radius = min(width, height) / 2.0 - 1.0
        omega = v / radius  # tip speed = velocity
        theta = omega * t + spec.phase
        r = rng.uniform(0.0, radius, len(t))
        x = np.floor(cx + r * np.cos(theta) + 0.5)
        y = np.floor(cy + r * np.sin(theta) + 0.5)
    elif spec.pattern == "expanding_ring":
        r_max = min(width, height) / 2.0 - 1.0
        rho = (spec.phase + v * t) % r_max
        psi = rng.uniform(0.0, 2.0 * math.pi, len(t))
        x = np.floor(cx + rho * np.cos(psi) + 0.5)
        y = np.floor(cy + rho * np.sin(psi) + 0.5)
    elif spec.pattern == "clap":
        d_max = width / 2.0 - 2.0
        d = np.abs((spec.phase + v * t) % (2.0 * d_max) - d_max)
        side = rng.integers(0, 2, len(t)) * 2 - 1
        x = np.floor(cx + side * d + 0.5)
        y = rng.integers(0, height, len(t))
    elif spec.pattern == "grating_h":
        # vertical stripes every GRATING_PERIOD px drifting horizontally
        offset = np.floor(spec.phase + v * t) % GRATING_PERIOD
        stripe = rng.integers(0, width // GRATING_PERIOD + 1, len(t))
        x = (offset + stripe * GRATING_PERIOD) % width
        y = rng.integers(0, height, len(t))
    elif spec.pattern == "grating_v":
        # horizontal stripes drifting vertically
        offset = np.floor(spec.phase + v * t) % GRATING_PERIOD
        stripe = rng.integers(0, height // GRATING_PERIOD + 1, len(t))
        y = (offset + stripe * GRATING_PERIOD) % height
        x = rng.integers(0, width, len(t))
    else:  # flicker: static square outline
        half = min(width, height) // 4
        xs = np.arange(-half, half + 1)
        top = np.stack([xs, np.full_like(xs, -half)], axis=1)
        bottom = np.stack([xs, np.full_like(xs, half)], axis=1)
        ys = np.arange(-half + 1, half)
        left = np.stack([np.full_like(ys, -half), ys], axis=1)
        right = np.stack([np.full_like(ys, half), ys], axis=1)
        outline = np.concatenate([top, bottom, left, right])
        pick = outline[rng.integers(0, len(outline), len(t))]
        x = np.floor(cx + spec.phase) + pick[:, 0]
        y = np.floor(cy) + pick[:, 1]
    x = np.clip(x, 0, width - 1).astype(np.int64)
    y = np.clip(np.asarray(y), 0, height - 1).astype(np.int64)
    return x, y


def generate(spec: SceneSpec, geometry: tuple) -> EventRecording:
    """Render one labeled recording of the pattern on the given sensor size.

    Signal events follow a Poisson process at spec.event_rate along the
    moving edge; background events arrive uniformly at
    spec.background_noise_rate per pixel.  Deterministic per spec.seed.
    """
    width, height = geometry
    rng = np.random.default_rng(spec.seed)
    dur_s = spec.duration / 1e6

    n_bursts = rng.poisson(spec.event_rate * dur_s / spec.burst_size)
    # geometric sizes: mean burst_size with a heavy tail, like the wide
    # spread of spikes-per-crossing real sensors show across contrasts
    sizes = rng.geometric(1.0 / spec.burst_size, n_bursts)
    t_burst = rng.integers(0, spec.duration, n_bursts)
    x_burst, y_burst = _pattern_pixels(spec, t_burst, width, height, rng)
    t_sig = np.minimum(
        np.repeat(t_burst, sizes) + rng.integers(0, spec.burst_spread, int(sizes.sum())),
        spec.duration - 1,
    )
    x_sig = np.repeat(x_burst, sizes)
    y_sig = np.repeat(y_burst, sizes)
    n_sig = len(t_sig)

    # background noise arrives in the same per-pixel bursts as signal
    # (hot pixels fire several spikes per excursion, not lone events)
    n_bg_bursts = rng.poisson(spec.background_noise_rate * width * height * dur_s / spec.burst_size)
    bg_sizes = rng.geometric(1.0 / spec.burst_size, n_bg_bursts)
    t_bg = np.minimum(
        np.repeat(rng.integers(0, spec.duration, n_bg_bursts), bg_sizes)
        + rng.integers(0, spec.burst_spread, int(bg_sizes.sum())),
        spec.duration - 1,
    )
    x_bg = np.repeat(rng.integers(0, width, n_bg_bursts), bg_sizes)
    y_bg = np.repeat(rng.integers(0, height, n_bg_bursts), bg_sizes)
    n_bg = len(t_bg)

    # illumination flashes: every pixel fires a burst inside flash_spread
    n_flash = rng.poisson(spec.flash_rate * dur_s)
    fx, fy, ft = [], [], []
    grid_x, grid_y = np.meshgrid(np.arange(width), np.arange(height))
    for t_f in rng.integers(0, spec.duration, n_flash):
        per_pixel = rng.geometric(1.0 / spec.burst_size, width * height)
        fx.append(np.repeat(grid_x.ravel(), per_pixel))
        fy.append(np.repeat(grid_y.ravel(), per_pixel))
        ft.append(
            np.minimum(
                t_f + rng.integers(0, spec.flash_spread, int(per_pixel.sum())),
                spec.duration - 1,
            )
        )
    x_fl = np.concatenate(fx) if fx else np.zeros(0, dtype=np.int64)
    y_fl = np.concatenate(fy) if fy else np.zeros(0, dtype=np.int64)
    t_fl = np.concatenate(ft) if ft else np.zeros(0, dtype=np.int64)

    pol = rng.integers(0, 2, n_sig + n_bg + len(t_fl)) * 2 - 1
    return EventRecording(
        x=np.concatenate([x_sig, x_bg, x_fl]),
        y=np.concatenate([y_sig, y_bg, y_fl]),
        t=np.concatenate([t_sig, t_bg, t_fl]),
        p=pol,
        sensor_width=width,
        sensor_height=height,
        label=spec.class_id,
        metadata={"pattern": spec.pattern, "seed": spec.seed},
    )


def default_scene_specs(
    velocity: float = 40.0,
    duration: int = 1_400_000,
    event_rate: float = 12_000.0,
    background_noise_rate: float = 2.0,
    base_seed: int = 0,
    patterns: tuple = ("moving_bar", "oscillating_bar", "rotating_edge", "expanding_ring"),
) -> list:
    """A standard multi-class spec set, one class per pattern."""
    return [
        SceneSpec(
            class_id=pattern,
            pattern=pattern,
            velocity=velocity,
            duration=duration,
            event_rate=event_rate,
            background_noise_rate=background_noise_rate,
            seed=base_seed + 1000 * i,
        )
        for i, pattern in enumerate(patterns)
    ]


def build_dataset(
    specs,
    n_subjects_train: int,
    n_subjects_test: int,
    out_dir,
    recordings_per_subject: int = 5,
    geometry: tuple = (32, 32),
    rate_jitter: float = 0.0,
    burst_jitter: float = 0.0,
    velocity_jitter: float = 0.2,
    phase_jitter: float = 1.0,
) -> DatasetManifest:
    """Write a labeled dataset with a subject-disjoint train/test split.

    Every subject records every class recordings_per_subject times.
    Subjects vary: velocity scales by +-velocity_jitter and trajectory
    phase shifts by +-phase_jitter pixels.  Per recording, event rate
    scales by +-rate_jitter and the spikes-per-crossing burst size by
    +-burst_jitter (emulating illumination and edge-sharpness variation,
    which changes spike multiplicity but not scene structure).  The same
    specs and seeds always produce a byte-identical dataset.
    """
    specs = list(specs)
    if len({s.class_id for s in specs}) < 2:
        raise ValueError("need at least 2 distinct classes")
    if n_subjects_train < 1 or n_subjects_test < 1:
        raise ValueError("both splits need at least one subject")
    if len({s.seed for s in specs}) != len(specs):
        raise ValueError("per-class seeds must be distinct")
    out_dir = Path(out_dir)
    (out_dir / "recordings").mkdir(parents=True, exist_ok=True)
    n_subjects = n_subjects_train + n_subjects_test
    width, height = geometry
    entries = []
    for subj in range(n_subjects):
        subject_id = f"s{subj:02d}"
        split = "train" if subj < n_subjects_train else "test"
        for spec in specs:
            subj_rng = np.random.default_rng([spec.seed, 1000 + subj])
            vel = spec.velocity * subj_rng.uniform(1.0 - velocity_jitter, 1.0 + velocity_jitter)
            phase = spec.phase + subj_rng.uniform(-phase_jitter, phase_jitter)
            for rec_i in range(recordings_per_subject):
                rec_rng = np.random.default_rng([spec.seed, subj, rec_i])
                rate = spec.event_rate
                if rate_jitter > 0:
                    rate *= rec_rng.uniform(1.0 - rate_jitter, 1.0 + rate_jitter)
                burst = spec.burst_size
                if burst_jitter > 0:
                    burst = max(1.0, burst * rec_rng.uniform(1.0 - burst_jitter, 1.0 + burst_jitter))
                rec_seed = int(np.random.SeedSequence([spec.seed, subj, rec_i]).generate_state(1)[0])
                rec_spec = replace(
                    spec, velocity=vel, phase=phase, event_rate=rate, burst_size=burst, seed=rec_seed
                )
                rec = replace(generate(rec_spec, geometry), subject_id=subject_id)
                rel = f"recordings/{spec.class_id}_{subject_id}_r{rec_i:02d}.csv"
                save_recording(rec, out_dir / rel)
                entries.append(ManifestEntry(rel, spec.class_id, subject_id, split))
    manifest = DatasetManifest(
        sensor_width=width,
        sensor_height=height,
        categories=tuple(sorted({s.class_id for s in specs})),
        recordings=tuple(entries),
        root=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
