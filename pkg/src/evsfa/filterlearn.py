"""Learning spatiotemporal filters from voxel patches.

The main route minimizes response change under the event-removal
perturbation subject to unit response variance: with patch vectors X_i,
difference vectors d_i = X_i - phi(X_i), second-moment matrix
A = mean(d_i d_i^T) and regularized covariance B, the filters are the
eigenvectors of the pencil A w = lambda B w with the smallest lambda,
scaled so w^T B w = 1.  Solved by whitening with B (dropping modes below
the ridge floor) and eigendecomposing the whitened A.

PCA and seeded random projections are provided as baselines that plug into
the identical downstream response path.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import DimensionMismatchError, RankDeficiencyError, ZeroVarianceError
from .perturb import phi

DEFAULT_ALPHA = 0.2
DEFAULT_RIDGE = 1e-6


@dataclass(frozen=True)
class FilterBank:
    """Learned filters plus the statistics needed to apply them.

    ``filters`` is (n, a*a*k); each row reshapes to (a, a, k) with axes
    (y, x, bin).  ``slowness`` orders the rows: perturbation objective
    values ascending for method "sfa", explained variance descending for
    "pca", zeros for "random" -- in every case the best filters come
    first, so truncation is a prefix.  ``norm_mean``/``norm_std`` are the
    per-filter response statistics fitted on training slabs (None until
    fitted) and ``alpha`` scales the tanh nonlinearity.
    """

    filters: np.ndarray
    slowness: np.ndarray
    a: int
    k: int
    t_vox: int
    method: str
    alpha: float = DEFAULT_ALPHA
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    @property
    def n_filters(self) -> int:
        return self.filters.shape[0]

    @property
    def dim(self) -> int:
        return self.filters.shape[1]

    @property
    def fitted(self) -> bool:
        return self.norm_mean is not None and self.norm_std is not None

    def filters_3d(self) -> np.ndarray:
        return self.filters.reshape(self.n_filters, self.a, self.a, self.k)

    def truncate(self, n: int) -> "FilterBank":
        """Keep the first n filters (the n best under the bank's ordering)."""
        if not 1 <= n <= self.n_filters:
            raise ValueError(f"cannot truncate {self.n_filters} filters to {n}")
        return replace(
            self,
            filters=self.filters[:n],
            slowness=self.slowness[:n],
            norm_mean=None if self.norm_mean is None else self.norm_mean[:n],
            norm_std=None if self.norm_std is None else self.norm_std[:n],
        )


def _sample_matrix(samples) -> tuple:
    if len(samples) == 0:
        raise ValueError("need at least one sample")
    a, k = samples[0].a, samples[0].k
    for s in samples:
        if (s.a, s.k) != (a, k):
            raise DimensionMismatchError("samples mix patch shapes")
    x = np.stack([s.values for s in samples]).astype(np.float64)
    return x, a, k


def learn_sfa(
    samples,
    n_filters: int,
    t_vox: int,
    ridge: float = DEFAULT_RIDGE,
    time_scale: float | None = None,
    alpha: float = DEFAULT_ALPHA,
) -> FilterBank:
    """Learn the n_filters slowest projections under event removal.

    Returns a bank whose rows satisfy w_i^T B w_j = delta_ij for the
    regularized covariance B and whose objective values come out
    ascending.  Raises RankDeficiencyError when fewer than n_filters
    usable directions survive the ridge floor.
    """
    x, a, k = _sample_matrix(samples)
    m, d = x.shape
    if not 1 <= n_filters <= d:
        raise DimensionMismatchError(f"n_filters must be in [1, {d}], got {n_filters}")
    if m < 10 * d:
        warnings.warn(
            f"only {m} samples for {d}-dimensional filters; recommend >= {10 * d}",
            stacklevel=2,
        )
    diffs = x - np.stack(
        [phi(s, t_vox, time_scale=time_scale).values for s in samples]
    ).astype(np.float64)

    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / m
    moment = diffs.T @ diffs / m
    ridge_term = ridge * np.trace(cov) / d
    cov_reg = cov + ridge_term * np.eye(d)

    s, u = scipy.linalg.eigh(cov_reg)
    keep = s > ridge_term + 1e-12 * max(s[-1], 0.0)
    if keep.sum() < n_filters:
        raise RankDeficiencyError(
            f"covariance supports {int(keep.sum())} directions, need {n_filters}; "
            "increase ridge or sample count"
        )
    whiten = u[:, keep] / np.sqrt(s[keep])
    aw = whiten.T @ moment @ whiten
    lam, v = scipy.linalg.eigh((aw + aw.T) / 2.0)
    lam = np.maximum(lam[:n_filters], 0.0)
    filters = (whiten @ v[:, :n_filters]).T
    return FilterBank(
        filters=_fix_signs(filters),
        slowness=lam,
        a=a,
        k=k,
        t_vox=t_vox,
        method="sfa",
        alpha=alpha,
    )


def learn_pca(samples, n_filters: int, alpha: float = DEFAULT_ALPHA, t_vox: int = 0) -> FilterBank:
    """Top principal components of the centered patches, unit-norm rows."""
    x, a, k = _sample_matrix(samples)
    m, d = x.shape
    if not 1 <= n_filters <= d:
        raise DimensionMismatchError(f"n_filters must be in [1, {d}], got {n_filters}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / m
    evals, evecs = scipy.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1][:n_filters]
    return FilterBank(
        filters=_fix_signs(evecs[:, order].T),
        slowness=evals[order],
        a=a,
        k=k,
        t_vox=t_vox,
        method="pca",
        alpha=alpha,
    )


def learn_random(
    dim: int,
    n_filters: int,
    seed: int,
    a: int = 0,
    k: int = 0,
    t_vox: int = 0,
    alpha: float = DEFAULT_ALPHA,
) -> FilterBank:
    """Seeded standard-normal projections, each normalized to unit length."""
    if not 1 <= n_filters <= dim:
        raise DimensionMismatchError(f"n_filters must be in [1, {dim}], got {n_filters}")
    rng = np.random.default_rng(seed)
    filters = rng.standard_normal((n_filters, dim))
    filters /= np.linalg.norm(filters, axis=1, keepdims=True)
    return FilterBank(
        filters=filters,
        slowness=np.zeros(n_filters),
        a=a,
        k=k,
        t_vox=t_vox,
        method="random",
        alpha=alpha,
    )


def slowness_of(bank: FilterBank, samples, t_vox: int, time_scale: float | None = None) -> np.ndarray:
    """Evaluate the perturbation objective of each filter on given samples.

    Per filter: mean squared response change under the perturbation,
    divided by the response variance, so values are comparable across
    banks regardless of filter scaling.
    """
    x, _, _ = _sample_matrix(samples)
    if x.shape[1] != bank.dim:
        raise DimensionMismatchError(f"samples have dim {x.shape[1]}, bank has {bank.dim}")
    x_phi = np.stack(
        [phi(s, t_vox, time_scale=time_scale).values for s in samples]
    ).astype(np.float64)
    proj = x @ bank.filters.T
    num = np.mean((proj - x_phi @ bank.filters.T) ** 2, axis=0)
    var = proj.var(axis=0)
    if np.any(var <= 0):
        bad = int(np.argmax(var <= 0))
        raise ZeroVarianceError(f"filter {bad} has constant response on these samples")
    return num / var


def _fix_signs(filters: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude weight is positive."""
    out = filters.copy()
    for row in out:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return out


def save_filterbank(bank: FilterBank, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": "evsfa-filterbank-v1",
        "method": bank.method,
        "a": bank.a,
        "k": bank.k,
        "t_vox": bank.t_vox,
        "alpha": bank.alpha,
        "filters": bank.filters.tolist(),
        "slowness": bank.slowness.tolist(),
        "norm_mean": None if bank.norm_mean is None else bank.norm_mean.tolist(),
        "norm_std": None if bank.norm_std is None else bank.norm_std.tolist(),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_filterbank(path) -> FilterBank:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return FilterBank(
        filters=np.asarray(doc["filters"], dtype=np.float64),
        slowness=np.asarray(doc["slowness"], dtype=np.float64),
        a=int(doc["a"]),
        k=int(doc["k"]),
        t_vox=int(doc["t_vox"]),
        method=doc["method"],
        alpha=float(doc["alpha"]),
        norm_mean=None if doc["norm_mean"] is None else np.asarray(doc["norm_mean"], dtype=np.float64),
        norm_std=None if doc["norm_std"] is None else np.asarray(doc["norm_std"], dtype=np.float64),
    )


def export_filters(bank: FilterBank, out_dir) -> None:
    """Write per-bin grayscale cross-sections plus the raw weights.

    Each filter becomes k binary PGM images (one per time bin, scaled to
    the filter's own weight range) so its spatiotemporal shape can be
    inspected; the full bank is saved alongside as filterbank.json.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_filterbank(bank, out_dir / "filterbank.json")
    weights = bank.filters_3d()
    for f in range(bank.n_filters):
        w = weights[f]
        lo, hi = float(w.min()), float(w.max())
        span = hi - lo
        for b in range(bank.k):
            if span < 1e-300:
                img = np.full((bank.a, bank.a), 128, dtype=np.uint8)
            else:
                img = np.round(255.0 * (w[:, :, b] - lo) / span).astype(np.uint8)
            header = f"P5\n{bank.a} {bank.a}\n255\n".encode("ascii")
            (out_dir / f"filter{f:02d}_t{b:02d}.pgm").write_bytes(header + img.tobytes())
