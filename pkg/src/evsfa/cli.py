"""Command-line surface for reproducible, config-driven runs.

Every subcommand accepts ``--config FILE`` (JSON whose top-level keys are
run parameters, plus an optional "protocol" object) with individual flags
overriding single keys, and ``--seed`` overriding the run seed.  Each run
writes its outputs under ``--out`` together with a run.json fingerprint
(effective config, seed, and sha256 of every artifact) sufficient to
reproduce it.  Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .errors import EvsfaError
from .events import load_manifest
from .filterlearn import export_filters, load_filterbank, save_filterbank
from .cnn import load_model
from .pipeline import (
    EvalProtocol,
    RunParams,
    action_protocol,
    evaluate,
    gesture_protocol,
    mean_response_shift,
    run_training,
    save_history_csv,
    sweep_filter_count,
    sweep_timestamp_noise,
    compare_methods,
    _learn_bank,
    _sample_training_rois,
    _train_recordings,
    _fit_and_train,
)
from .synth import PATTERNS, SceneSpec, build_dataset
from .voxel import sample_rois

# (flag, RunParams field, type)
_PARAM_FLAGS = [
    ("--a", "a", int),
    ("--k", "k", int),
    ("--t-vox", "t_vox", int),
    ("--n-filters", "n_filters", int),
    ("--alpha", "alpha", float),
    ("--method", "method", str),
    ("--m-samples", "m_samples", int),
    ("--ridge", "ridge", float),
    ("--pool", "pool", int),
    ("--epochs", "epochs", int),
    ("--batch-size", "batch_size", int),
    ("--learning-rate", "learning_rate", float),
    ("--momentum", "momentum", float),
    ("--weight-decay", "weight_decay", float),
    ("--augmentation", "augmentation", int),
]


def _add_common(parser: argparse.ArgumentParser, out_default: str) -> None:
    parser.add_argument("--config", help="JSON config file; flags override its keys")
    parser.add_argument("--seed", type=int, help="run seed (overrides config)")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker pool size; 1 forces serial execution")
    parser.add_argument("--out", default=out_default, help="run output directory")
    for flag, field, typ in _PARAM_FLAGS:
        parser.add_argument(flag, dest=field, type=typ, default=None)


def _add_protocol_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--protocol", choices=["action", "gesture"], default=None,
                        help="aggregation preset (default: action)")
    parser.add_argument("--t-total", type=int, default=None, help="total input per decision, us")
    parser.add_argument("--window", type=int, default=None, help="window per CNN decision, us")
    parser.add_argument("--overlap", type=int, default=None, help="window overlap, us")


def _load_config(args) -> dict:
    doc = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    return doc


def _resolve_params(args, doc: dict) -> RunParams:
    fields = {k: v for k, v in doc.items() if k != "protocol"}
    for _, field, _typ in _PARAM_FLAGS:
        val = getattr(args, field, None)
        if val is not None:
            fields[field] = val
    if args.seed is not None:
        fields["seed"] = args.seed
    return RunParams.from_dict(fields)


def _resolve_protocol(args, doc: dict, params: RunParams) -> EvalProtocol:
    window = params.window
    preset = getattr(args, "protocol", None) or doc.get("protocol", {}).get("preset")
    base = gesture_protocol(window=window) if preset == "gesture" else action_protocol(window=window)
    cfg = {k: v for k, v in doc.get("protocol", {}).items() if k != "preset"}
    for key in ("t_total", "window", "overlap"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return EvalProtocol(
        t_total=cfg.get("t_total", base.t_total),
        window=cfg.get("window", base.window),
        overlap=cfg.get("overlap", base.overlap),
    )


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_run_json(out_dir: Path, command: str, params: RunParams, extra: dict | None = None) -> None:
    artifacts = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "run.json":
            artifacts[str(p.relative_to(out_dir))] = _sha256(p)
    doc = {
        "command": command,
        "params": params.to_dict(),
        "seed": params.seed,
        "artifacts": artifacts,
    }
    if extra:
        doc.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_rows_csv(rows, columns, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(str(row[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cmd_synth(args) -> int:
    doc = _load_config(args)
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    patterns = tuple(args.classes.split(","))
    for p in patterns:
        if p not in PATTERNS:
            raise EvsfaError(f"unknown pattern {p!r}; choose from {PATTERNS}")
    width, height = (int(v) for v in args.geometry.split("x"))
    specs = [
        SceneSpec(
            class_id=p,
            pattern=p,
            velocity=args.velocity,
            duration=args.duration_ms * 1000,
            event_rate=args.event_rate,
            background_noise_rate=args.bg_rate,
            seed=seed + 1000 * i,
        )
        for i, p in enumerate(patterns)
    ]
    manifest = build_dataset(
        specs,
        args.n_train,
        args.n_test,
        args.out,
        recordings_per_subject=args.recs_per_subject,
        geometry=(width, height),
        rate_jitter=args.rate_jitter,
    )
    print(f"wrote {len(manifest.recordings)} recordings under {args.out}")
    return 0


def _cmd_learn_filters(args) -> int:
    doc = _load_config(args)
    params = _resolve_params(args, doc)
    manifest = load_manifest(args.manifest)
    recordings = _train_recordings(manifest)
    samples = _sample_training_rois(recordings, params)
    bank = _learn_bank(samples, params)
    from .filterbank import fit_normalization
    from .voxel import partition_slabs, voxelize

    slabs = [s for rec in recordings for s in partition_slabs(voxelize(rec, params.t_vox), params.k)]
    bank = fit_normalization(bank, slabs)
    out = Path(args.out)
    save_filterbank(bank, out / "filters" / "filterbank.json")
    _write_run_json(out, "learn-filters", params)
    print(f"learned {bank.n_filters} {bank.method} filters -> {out / 'filters' / 'filterbank.json'}")
    return 0


def _cmd_export_filters(args) -> int:
    bank = load_filterbank(args.bank)
    export_filters(bank, args.out)
    print(f"exported {bank.n_filters} filters x {bank.k} sections to {args.out}")
    return 0


def _cmd_train(args) -> int:
    doc = _load_config(args)
    params = _resolve_params(args, doc)
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    bank, model, history = run_training(manifest, params, out_dir=out)
    _write_run_json(out, "train", params)
    print(f"trained: {len(history)} epochs, final loss {history[-1]['loss']:.4f} -> {out}")
    return 0


def _cmd_eval(args) -> int:
    doc = _load_config(args)
    params = _resolve_params(args, doc)
    protocol = _resolve_protocol(args, doc, params)
    manifest = load_manifest(args.manifest)
    bank = load_filterbank(args.bank)
    model = load_model(args.model)
    report = evaluate(manifest, bank, model, protocol, pool=params.pool, threads=args.threads)
    out = Path(args.out)
    report.save(out / "reports" / "eval.json")
    report.save_confusion_csv(out / "reports" / "confusion.csv")
    _write_run_json(out, "eval", params, extra={"protocol": protocol.__dict__})
    print(f"accuracy {report.overall_accuracy:.4f} over {len(report.decisions)} recordings")
    return 0


def _cmd_sweep_filters(args) -> int:
    doc = _load_config(args)
    params = _resolve_params(args, doc)
    protocol = _resolve_protocol(args, doc, params)
    manifest = load_manifest(args.manifest)
    counts = [int(v) for v in args.counts.split(",")]
    rows = sweep_filter_count(manifest, params, counts, protocol)
    out = Path(args.out)
    _write_rows_csv(rows, ["n_filters", "accuracy"], out / "reports" / "sweep_filters.csv")
    _write_json(rows, out / "reports" / "sweep_filters.json")
    _write_run_json(out, "sweep-filters", params)
    for row in rows:
        print(f"n_filters={row['n_filters']}: accuracy {row['accuracy']:.4f}")
    return 0


def _cmd_sweep_noise(args) -> int:
    doc = _load_config(args)
    params = _resolve_params(args, doc)
    protocol = _resolve_protocol(args, doc, params)
    manifest = load_manifest(args.manifest)
    bank = load_filterbank(args.bank)
    model = load_model(args.model)
    deltas = [int(v) for v in args.deltas.split(",")]
    rows = sweep_timestamp_noise(
        manifest, bank, model, deltas, protocol, pool=params.pool, seed=params.seed
    )
    out = Path(args.out)
    flat = [
        {"t_delta_us": r["t_delta_us"], "accuracy": r["accuracy"],
         **{f"f1_{c}": v for c, v in r["per_class_f1"].items()}}
        for r in rows
    ]
    columns = ["t_delta_us", "accuracy"] + [f"f1_{c}" for c in manifest.categories]
    _write_rows_csv(flat, columns, out / "reports" / "sweep_noise.csv")
    _write_json(rows, out / "reports" / "sweep_noise.json")
    _write_run_json(out, "sweep-noise", params)
    for row in rows:
        print(f"t_delta={row['t_delta_us']}us: accuracy {row['accuracy']:.4f}")
    return 0


def _cmd_compare_methods(args) -> int:
    doc = _load_config(args)
    params = _resolve_params(args, doc)
    protocol = _resolve_protocol(args, doc, params)
    manifest = load_manifest(args.manifest)
    methods = args.methods.split(",")
    rows = compare_methods(manifest, params, methods, protocol)
    out = Path(args.out)
    _write_rows_csv(rows, ["method", "accuracy"], out / "reports" / "compare_methods.csv")
    _write_json(rows, out / "reports" / "compare_methods.json")
    _write_run_json(out, "compare-methods", params)
    for row in rows:
        print(f"{row['method']}: accuracy {row['accuracy']:.4f}")
    return 0


def _cmd_response_shift(args) -> int:
    doc = _load_config(args)
    params = _resolve_params(args, doc)
    manifest = load_manifest(args.manifest)
    bank = load_filterbank(args.bank)
    params = replace(params, a=bank.a, k=bank.k, t_vox=bank.t_vox)
    recordings = _train_recordings(manifest)
    samples = _sample_training_rois(recordings, params)
    shifts = mean_response_shift(bank, samples, args.removal_fraction, params.seed)
    out = Path(args.out)
    result = {
        "removal_fraction": args.removal_fraction,
        "n_samples": len(samples),
        "per_filter_shift": shifts.tolist(),
        "mean_shift": float(shifts.mean()),
    }
    _write_json(result, out / "reports" / "response_shift.json")
    _write_run_json(out, "response-shift", params)
    print(f"mean normalized response shift: {shifts.mean():.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evsfa",
        description="Event-camera action recognition with slowness-learned spatiotemporal filters",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    p.add_argument("--out", default="dataset", help="dataset output directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--classes", default="moving_bar,oscillating_bar,rotating_edge,expanding_ring")
    p.add_argument("--n-train", type=int, default=6, help="training subjects")
    p.add_argument("--n-test", type=int, default=2, help="test subjects")
    p.add_argument("--recs-per-subject", type=int, default=5)
    p.add_argument("--geometry", default="32x32")
    p.add_argument("--velocity", type=float, default=40.0, help="pattern speed, px/s")
    p.add_argument("--duration-ms", type=int, default=1400)
    p.add_argument("--event-rate", type=float, default=12000.0, help="edge events/s")
    p.add_argument("--bg-rate", type=float, default=2.0, help="noise events/s/pixel")
    p.add_argument("--rate-jitter", type=float, default=0.0, help="per-recording rate jitter fraction")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("learn-filters", help="learn and normalize a filter bank")
    p.add_argument("--manifest", required=True)
    _add_common(p, "runs/learn-filters")
    p.set_defaults(func=_cmd_learn_filters)

    p = sub.add_parser("export-filters", help="write per-bin PGM cross-sections of a bank")
    p.add_argument("--bank", required=True)
    p.add_argument("--out", default="runs/export-filters")
    p.set_defaults(func=_cmd_export_filters)

    p = sub.add_parser("train", help="learn filters and train the CNN")
    p.add_argument("--manifest", required=True)
    _add_common(p, "runs/train")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate trained artifacts on the test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--model", required=True)
    _add_common(p, "runs/eval")
    _add_protocol_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep-filters", help="accuracy as a function of filter count")
    p.add_argument("--manifest", required=True)
    p.add_argument("--counts", default="1,3,5,7,9,12,15")
    _add_common(p, "runs/sweep-filters")
    _add_protocol_flags(p)
    p.set_defaults(func=_cmd_sweep_filters)

    p = sub.add_parser("sweep-noise", help="accuracy under timestamp noise")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--deltas", default="0,2000,4000,8000,16000,32000",
                   help="comma list of t_delta in microseconds")
    _add_common(p, "runs/sweep-noise")
    _add_protocol_flags(p)
    p.set_defaults(func=_cmd_sweep_noise)

    p = sub.add_parser("compare-methods", help="train+eval per filter-learning method")
    p.add_argument("--manifest", required=True)
    p.add_argument("--methods", default="sfa,pca,random")
    _add_common(p, "runs/compare-methods")
    _add_protocol_flags(p)
    p.set_defaults(func=_cmd_compare_methods)

    p = sub.add_parser("response-shift", help="response change under random event removal")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--removal-fraction", type=float, default=0.1)
    _add_common(p, "runs/response-shift")
    p.set_defaults(func=_cmd_response_shift)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (EvsfaError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
