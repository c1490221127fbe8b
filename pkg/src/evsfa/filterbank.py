"""Apply a filter bank to voxel slabs: correlate, normalize, squash, pool.

A slab's time depth must equal the filters' time depth, so each filter
yields exactly one response image per slab.  Raw responses are normalized
with statistics fitted on training slabs, passed through tanh(alpha * z),
then max-pooled (kernel = stride = pool size) over a zero-padded image.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import accel
from .errors import DimensionMismatchError, UnfittedBankError
from .filterlearn import FilterBank
from .voxel import VoxelGrid

DEFAULT_POOL = 4
STD_FLOOR = 1e-12


@dataclass(frozen=True)
class ResponseStack:
    """Per-filter response images for one slab, before and after pooling."""

    images: np.ndarray
    pooled: np.ndarray
    slab_index: int = 0


def convolve_slab(slab: VoxelGrid, bank: FilterBank) -> np.ndarray:
    """Valid 3D cross-correlation of every filter with one slab.

    Returns raw response images of shape (n_filters, H-a+1, W-a+1).
    """
    h, w, nb = slab.counts.shape
    if nb != bank.k:
        raise DimensionMismatchError(f"slab has {nb} bins, filters expect {bank.k}")
    if h < bank.a or w < bank.a:
        raise DimensionMismatchError(f"slab {h}x{w} smaller than {bank.a}x{bank.a} filters")
    return accel.correlate_slab(
        np.ascontiguousarray(slab.counts, dtype=np.float64),
        np.ascontiguousarray(bank.filters_3d()),
    )


def max_pool(images: np.ndarray, pool: int) -> np.ndarray:
    """Max-pool with kernel = stride = pool, zero-padding to a multiple."""
    n, h, w = images.shape
    ph = -(-h // pool) * pool
    pw = -(-w // pool) * pool
    padded = np.zeros((n, ph, pw), dtype=images.dtype)
    padded[:, :h, :w] = images
    return padded.reshape(n, ph // pool, pool, pw // pool, pool).max(axis=(2, 4))


def fit_normalization(bank: FilterBank, slabs) -> FilterBank:
    """Fit per-filter response mean/std over all pixels of training slabs.

    Accumulates streaming moments so disjoint slab sets combine exactly;
    std is floored at 1e-12 to keep constant-response filters usable.
    """
    slabs = list(slabs)
    if not slabs:
        raise ValueError("need at least one slab to fit normalization")
    count = 0
    total = np.zeros(bank.n_filters)
    total_sq = np.zeros(bank.n_filters)
    for slab in slabs:
        raw = convolve_slab(slab, bank)
        count += raw.shape[1] * raw.shape[2]
        total += raw.sum(axis=(1, 2))
        total_sq += (raw * raw).sum(axis=(1, 2))
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    return replace(bank, norm_mean=mean, norm_std=np.maximum(np.sqrt(var), STD_FLOOR))


def respond(
    slab: VoxelGrid,
    bank: FilterBank,
    pool: int = DEFAULT_POOL,
    slab_index: int = 0,
) -> ResponseStack:
    """Full response path for one slab: correlate, normalize, tanh, pool."""
    if not bank.fitted:
        raise UnfittedBankError("fit_normalization must run before respond")
    raw = convolve_slab(slab, bank)
    z = (raw - bank.norm_mean[:, None, None]) / bank.norm_std[:, None, None]
    images = np.tanh(bank.alpha * z)
    return ResponseStack(images=images, pooled=max_pool(images, pool), slab_index=slab_index)


def dump_response(stack: ResponseStack, path) -> None:
    """Write the response images as a little-endian float32 tensor file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, h, w = stack.images.shape
    header = json.dumps(
        {"n_filters": n, "h": h, "w": w, "slab_index": stack.slab_index},
        sort_keys=True,
    ).encode("utf-8")
    blob = stack.images.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(blob)


def load_response(path) -> tuple:
    """Read a response dump; returns (images float32 array, header dict)."""
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    images = np.frombuffer(raw[8 + hlen :], dtype="<f4").reshape(
        header["n_filters"], header["h"], header["w"]
    )
    return images, header
