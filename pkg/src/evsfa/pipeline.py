"""End-to-end orchestration: filters -> normalization -> CNN -> evaluation.

Training touches only the train split: patch sampling, filter learning,
normalization statistics, and CNN weights never see a test event.  A
single run seed drives every stochastic stage, so identical runs produce
identical artifacts byte for byte.

Evaluation slides overlapping windows over each test recording, takes one
CNN decision per window, and aggregates winner-take-all (ties broken by
the largest summed softmax score, then lowest class index).
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .cnn import (
    CnnModel,
    OptimizerConfig,
    init_model,
    predict,
    save_model,
    scaled_architecture,
    train,
)
from .errors import InsufficientDataError, ZeroVarianceError
from .events import DatasetManifest, EventRecording, add_timestamp_noise, load_entry
from .filterbank import DEFAULT_POOL, fit_normalization, respond
from .filterlearn import (
    FilterBank,
    learn_pca,
    learn_random,
    learn_sfa,
    save_filterbank,
)
from .voxel import VoxelGrid, count_events, partition_slabs, sample_rois, voxelize

# seed-stream tags so each stochastic stage gets an independent stream
_ROI, _RANDBANK, _CNN, _NOISE, _REMOVAL = 1, 2, 3, 4, 5


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass(frozen=True)
class RunParams:
    """Every knob of a training run; defaults follow the standard presets."""

    a: int = 6
    k: int = 25
    t_vox: int = 4000
    n_filters: int = 9
    alpha: float = 0.2
    method: str = "sfa"
    m_samples: int = 4000
    ridge: float = 1e-6
    nn_time_scale: float | None = None
    pool: int = DEFAULT_POOL
    cnn_widths: tuple | None = None
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 60
    weight_decay: float = 0.0
    augmentation: int = 1
    seed: int = 0

    @property
    def window(self) -> int:
        """Event duration consumed per CNN decision, in microseconds."""
        return self.k * self.t_vox

    def to_dict(self) -> dict:
        doc = asdict(self)
        if doc["cnn_widths"] is not None:
            doc["cnn_widths"] = list(doc["cnn_widths"])
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "RunParams":
        doc = dict(doc)
        if doc.get("cnn_widths") is not None:
            doc["cnn_widths"] = tuple(doc["cnn_widths"])
        return cls(**doc)


@dataclass(frozen=True)
class EvalProtocol:
    """Windowed aggregation settings: all values in microseconds."""

    t_total: int
    window: int
    overlap: int

    def __post_init__(self):
        if not 0 <= self.overlap < self.window:
            raise ValueError("need 0 <= overlap < window")
        if self.t_total < self.window:
            raise ValueError("t_total must cover at least one window")

    @property
    def stride(self) -> int:
        return self.window - self.overlap


def gesture_protocol(t_total: int = 200_000, window: int = 100_000) -> EvalProtocol:
    """100 ms windows with 90 ms overlap."""
    return EvalProtocol(t_total=t_total, window=window, overlap=window - window // 10)


def action_protocol(t_total: int = 2_000_000, window: int = 100_000) -> EvalProtocol:
    """100 ms windows with 50% overlap."""
    return EvalProtocol(t_total=t_total, window=window, overlap=window // 2)


@dataclass
class EvalReport:
    overall_accuracy: float
    per_class_f1: dict
    confusion: np.ndarray
    categories: tuple
    config_fingerprint: str
    decisions: list

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "per_class_f1": self.per_class_f1,
            "confusion": self.confusion.tolist(),
            "categories": list(self.categories),
            "config_fingerprint": self.config_fingerprint,
            "decisions": self.decisions,
        }

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def save_confusion_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["truth\\pred", *self.categories])
            for label, row in zip(self.categories, self.confusion):
                writer.writerow([label, *row.tolist()])


def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def metrics_from_confusion(confusion: np.ndarray) -> tuple:
    """(accuracy, per-class F1) from a rows-are-truth confusion matrix.

    F1 = 2PR/(P+R) with the convention F1 = 0 when P + R = 0.
    """
    confusion = np.asarray(confusion, dtype=np.int64)
    total = confusion.sum()
    accuracy = float(np.trace(confusion) / total) if total else 0.0
    f1 = np.zeros(confusion.shape[0])
    for c in range(confusion.shape[0]):
        tp = confusion[c, c]
        pred = confusion[:, c].sum()
        truth = confusion[c, :].sum()
        precision = tp / pred if pred else 0.0
        recall = tp / truth if truth else 0.0
        f1[c] = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return accuracy, f1


def window_grid(rec: EventRecording, start: int, t_vox: int, k: int) -> VoxelGrid:
    """Fixed k-bin grid of the events in [start, start + k*t_vox)."""
    i0, i1 = np.searchsorted(rec.t, [start, start + k * t_vox], side="left")
    ev = np.column_stack([rec.x[i0:i1], rec.y[i0:i1], rec.t[i0:i1] - start])
    h, w = rec.sensor_height, rec.sensor_width
    counts = np.zeros((h, w, k), dtype=np.int64)
    if len(ev):
        bins = ev[:, 2] // t_vox
        flat = (ev[:, 1] * w + ev[:, 0]) * k + bins
        counts = np.bincount(flat, minlength=h * w * k).reshape(h, w, k).astype(np.int64)
    return VoxelGrid(counts, t_vox, start)


def classify_duration(
    rec: EventRecording,
    bank: FilterBank,
    model: CnnModel,
    protocol: EvalProtocol,
    pool: int = DEFAULT_POOL,
) -> int:
    """Aggregate per-window CNN decisions over a recording.

    Windows of protocol.window microseconds slide at protocol.stride from
    the first event until min(t_total, recording extent) is covered;
    windows that would extend past the recording are excluded.  The final
    class is the modal per-window decision.
    """
    if protocol.window != bank.k * bank.t_vox:
        raise ValueError(
            f"window {protocol.window} us != k*t_vox = {bank.k * bank.t_vox} us"
        )
    if len(rec) == 0:
        raise InsufficientDataError("empty recording")
    t0 = int(rec.t[0])
    n_windows = count_windows(rec.duration, protocol)
    preds = []
    probs = []
    for i in range(n_windows):
        slab = window_grid(rec, t0 + i * protocol.stride, bank.t_vox, bank.k)
        cls, p = predict(model, respond(slab, bank, pool=pool, slab_index=i))
        preds.append(cls)
        probs.append(p)
    return aggregate_votes(preds, probs, model.config.n_classes)


def count_windows(rec_duration: int, protocol: EvalProtocol) -> int:
    """Windows fully inside min(t_total, recording extent), slid at stride."""
    span = min(protocol.t_total, rec_duration + 1)
    if span < protocol.window:
        raise InsufficientDataError(
            f"recording extent {span} us shorter than window {protocol.window} us"
        )
    return 1 + (span - protocol.window) // protocol.stride


def aggregate_votes(preds, probs, n_classes: int) -> int:
    """Modal class over window decisions; ties go to the largest summed
    softmax score, then the lowest class index."""
    votes = np.bincount(preds, minlength=n_classes)
    score_sums = np.sum(probs, axis=0)
    tied = np.flatnonzero(votes == votes.max())
    return int(tied[np.argmax(score_sums[tied])])


def _evaluate_recordings(
    recordings,
    truths,
    categories,
    bank: FilterBank,
    model: CnnModel,
    protocol: EvalProtocol,
    pool: int = DEFAULT_POOL,
    threads: int = 1,
    names=None,
) -> EvalReport:
    n_cat = len(categories)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool_exec:
            preds = list(
                pool_exec.map(lambda r: classify_duration(r, bank, model, protocol, pool), recordings)
            )
    else:
        preds = [classify_duration(r, bank, model, protocol, pool) for r in recordings]
    confusion = np.zeros((n_cat, n_cat), dtype=np.int64)
    decisions = []
    for idx, (truth, pred) in enumerate(zip(truths, preds)):
        confusion[truth, pred] += 1
        decisions.append(
            {
                "name": names[idx] if names else str(idx),
                "truth": categories[truth],
                "predicted": categories[pred],
            }
        )
    accuracy, f1 = metrics_from_confusion(confusion)
    fp = fingerprint(
        {
            "protocol": asdict(protocol),
            "categories": list(categories),
            "method": bank.method,
            "n_filters": bank.n_filters,
        }
    )
    return EvalReport(
        overall_accuracy=accuracy,
        per_class_f1={categories[c]: float(f1[c]) for c in range(n_cat)},
        confusion=confusion,
        categories=tuple(categories),
        config_fingerprint=fp,
        decisions=decisions,
    )


def evaluate(
    manifest: DatasetManifest,
    bank: FilterBank,
    model: CnnModel,
    protocol: EvalProtocol,
    pool: int = DEFAULT_POOL,
    threads: int = 1,
) -> EvalReport:
    """One aggregated decision per test recording, plus accuracy/F1/confusion."""
    entries = manifest.split("test")
    if not entries:
        raise ValueError("manifest has no test split")
    recs = [load_entry(manifest, e) for e in entries]
    truths = [manifest.categories.index(e.label) for e in entries]
    return _evaluate_recordings(
        recs, truths, manifest.categories, bank, model, protocol, pool,
        threads=threads, names=[e.path for e in entries],
    )


def _train_recordings(manifest: DatasetManifest):
    entries = manifest.split("train")
    if not entries:
        raise ValueError("manifest has no train split")
    return [load_entry(manifest, e) for e in entries]


def _sample_training_rois(recordings, params: RunParams):
    """Split the patch budget evenly over train recordings; skip sparse ones."""
    n = len(recordings)
    quota = [params.m_samples // n + (1 if i < params.m_samples % n else 0) for i in range(n)]
    samples = []
    for i, (rec, m_i) in enumerate(zip(recordings, quota)):
        if m_i == 0:
            continue
        try:
            samples.extend(
                sample_rois(rec, params.a, params.k, params.t_vox, m_i, derive_seed(params.seed, _ROI, i))
            )
        except InsufficientDataError:
            continue
    if not samples:
        raise InsufficientDataError("no training recording could host a single patch")
    return samples


def _learn_bank(samples, params: RunParams) -> FilterBank:
    if params.method == "sfa":
        return learn_sfa(
            samples,
            params.n_filters,
            params.t_vox,
            ridge=params.ridge,
            time_scale=params.nn_time_scale,
            alpha=params.alpha,
        )
    if params.method == "pca":
        return learn_pca(samples, params.n_filters, alpha=params.alpha, t_vox=params.t_vox)
    if params.method == "random":
        return learn_random(
            params.a * params.a * params.k,
            params.n_filters,
            derive_seed(params.seed, _RANDBANK),
            a=params.a,
            k=params.k,
            t_vox=params.t_vox,
            alpha=params.alpha,
        )
    raise ValueError(f"unknown method {params.method!r}; choose sfa, pca or random")


def _training_slabs(recordings, params: RunParams):
    """One training example per full k-bin slab, zero-event slabs included."""
    slabs, labels = [], []
    for rec in recordings:
        for slab in partition_slabs(voxelize(rec, params.t_vox), params.k):
            slabs.append(slab)
            labels.append(rec.label)
    return slabs, labels


def _fit_and_train(bank: FilterBank, recordings, categories, params: RunParams):
    slabs, labels = _training_slabs(recordings, params)
    if not slabs:
        raise InsufficientDataError("train recordings yield no full slabs")
    bank = fit_normalization(bank, slabs)
    stacks = [respond(s, bank, pool=params.pool) for s in slabs]
    inputs = np.stack([s.pooled for s in stacks])
    targets = np.array([categories.index(l) for l in labels], dtype=np.int64)
    p = inputs.shape[2]
    config = scaled_architecture(
        p,
        bank.n_filters,
        len(categories),
        widths=params.cnn_widths,
        optimizer=OptimizerConfig(
            learning_rate=params.learning_rate,
            momentum=params.momentum,
            batch_size=params.batch_size,
            epochs=params.epochs,
            weight_decay=params.weight_decay,
        ),
        augmentation=params.augmentation,
        seed=derive_seed(params.seed, _CNN),
    )
    model, history = train(init_model(config), inputs, targets)
    return bank, model, history


def run_training(manifest: DatasetManifest, params: RunParams, out_dir=None):
    """Learn filters, fit normalization, and train the CNN on the train split.

    Returns (fitted bank, trained model, per-epoch history).  When out_dir
    is given, persists filters/filterbank.json, model/model.bin and
    model/history.csv beneath it.
    """
    recordings = _train_recordings(manifest)
    samples = _sample_training_rois(recordings, params)
    bank = _learn_bank(samples, params)
    bank, model, history = _fit_and_train(bank, recordings, manifest.categories, params)
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_filterbank(bank, out_dir / "filters" / "filterbank.json")
        save_model(model, out_dir / "model" / "model.bin")
        save_history_csv(history, out_dir / "model" / "history.csv")
    return bank, model, history


def save_history_csv(history, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss", "train_acc", "val_acc"])
        for row in history:
            writer.writerow(
                [
                    row["epoch"],
                    repr(row["loss"]),
                    repr(row["train_acc"]),
                    "" if row["val_acc"] is None else repr(row["val_acc"]),
                ]
            )


def sweep_filter_count(
    manifest: DatasetManifest,
    params: RunParams,
    counts,
    protocol: EvalProtocol,
):
    """Accuracy per filter count, truncating one learned bank to each count.

    The bank is learned once at max(counts); each requested count keeps
    the best-count prefix and retrains the CNN with identical seeds.
    """
    counts = list(counts)
    recordings = _train_recordings(manifest)
    base = replace(params, n_filters=max(counts))
    samples = _sample_training_rois(recordings, base)
    full_bank = _learn_bank(samples, base)
    rows = []
    for count in counts:
        bank, model, _ = _fit_and_train(
            full_bank.truncate(count), recordings, manifest.categories, params
        )
        report = evaluate(manifest, bank, model, protocol, pool=params.pool)
        rows.append({"n_filters": count, "accuracy": report.overall_accuracy})
    return rows


def sweep_timestamp_noise(
    manifest: DatasetManifest,
    bank: FilterBank,
    model: CnnModel,
    deltas,
    protocol: EvalProtocol,
    pool: int = DEFAULT_POOL,
    seed: int = 0,
):
    """Evaluate fixed artifacts on timestamp-degraded test recordings.

    Returns one row per t_delta with overall accuracy and per-class F1;
    t_delta = 0 reproduces the clean evaluation exactly.
    """
    entries = manifest.split("test")
    if not entries:
        raise ValueError("manifest has no test split")
    recs = [load_entry(manifest, e) for e in entries]
    truths = [manifest.categories.index(e.label) for e in entries]
    names = [e.path for e in entries]
    rows = []
    for delta in deltas:
        noisy = [
            add_timestamp_noise(r, delta, derive_seed(seed, _NOISE, delta, i))
            for i, r in enumerate(recs)
        ]
        report = _evaluate_recordings(
            noisy, truths, manifest.categories, bank, model, protocol, pool, names=names
        )
        rows.append(
            {
                "t_delta_us": int(delta),
                "accuracy": report.overall_accuracy,
                "per_class_f1": report.per_class_f1,
            }
        )
    return rows


def compare_methods(
    manifest: DatasetManifest,
    params: RunParams,
    methods=("sfa", "pca", "random"),
    protocol: EvalProtocol | None = None,
):
    """Full train+eval per filter-learning method under identical seeds."""
    protocol = protocol or action_protocol()
    rows = []
    for method in methods:
        bank, model, _ = run_training(manifest, replace(params, method=method))
        report = evaluate(manifest, bank, model, protocol, pool=params.pool)
        rows.append({"method": method, "accuracy": report.overall_accuracy})
    return rows


def mean_response_shift(
    bank: FilterBank,
    samples,
    removal_fraction: float,
    seed: int,
) -> np.ndarray:
    """Mean squared response change per filter under random event removal.

    For each patch, removal_fraction of its events (rounded) are deleted
    at random and the patch re-counted; the squared projection change is
    averaged over patches and normalized by each filter's response
    variance.  A fraction of 0 returns exact zeros.
    """
    if not 0 <= removal_fraction <= 1:
        raise ValueError("removal_fraction must be in [0, 1]")
    x = np.stack([s.values for s in samples]).astype(np.float64)
    proj = x @ bank.filters.T
    var = proj.var(axis=0)
    if np.any(var <= 0):
        raise ZeroVarianceError("a filter has constant response on these samples")
    rng = np.random.default_rng([seed, _REMOVAL])
    x_removed = np.empty_like(x)
    for i, s in enumerate(samples):
        n = len(s.events)
        n_remove = int(round(removal_fraction * n))
        if n_remove == 0:
            x_removed[i] = x[i]
            continue
        keep = rng.choice(n, size=n - n_remove, replace=False)
        x_removed[i] = count_events(s.events[keep], s.a, s.k, bank.t_vox)
    shift = np.mean((proj - x_removed @ bank.filters.T) ** 2, axis=0)
    return shift / var
