"""Single command line entry point for the whole pipeline.

Subcommands: generate, featurize, pretrain, embed, probe, sweep,
dropout-eval, ablate, selfcheck. Anything that affects numerics lives in a
key=value config file (unknown keys are hard errors); flags cover only
paths, seeds and thread limits. Every command that writes into an output
directory also drops a run_manifest.json there recording the command, a
config snapshot, input checksums, code version and timestamps.

Exit codes: 0 success, 1 validation error (bad inputs, bad config), 2
runtime failure. Failures emit one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import json
import math
import os
import sys

import numpy as np

from . import __version__, dataio, synthgen
from .features import FEATURE_NAMES
from .model import CHECKPOINT_FORMAT_VERSION, ModelConfig, load_checkpoint
from .pretrain import TrainConfig, TrainingDiverged, pretrain
from .probe_eval import (
    SWEEP_FRACTIONS,
    ProbeTask,
    ablation_matrix,
    data_regime_sweep,
    dropout_robustness,
    embed_segments,
    pooled_feature_matrix,
    run_probe,
    segment_labels,
)
from .signal_core import preprocess_records
from .validation import ValidationError

_VERSION_STRING = f"ctgssl {__version__} (checkpoint format {CHECKPOINT_FORMAT_VERSION})"

# kept alive for the life of the process once --threads takes effect
_thread_limiter = None


# ------------------------------------------------------------- config file

_MODEL_FIELDS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
assert not set(_MODEL_FIELDS) & set(_TRAIN_FIELDS)

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _coerce(key: str, raw: str, type_name: str):
    t = str(type_name)
    try:
        if t == "bool":
            low = raw.strip().lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
    except ValueError as e:
        raise ValidationError(f"config key {key!r}: {e}") from None
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    """key = value lines; blank lines and # comments ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key in out:
            raise ValidationError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def split_config(kv: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    """Route keys to ModelConfig or TrainConfig; unknown keys are errors."""
    model_kwargs: dict = {}
    train_kwargs: dict = {}
    for key, raw in kv.items():
        if key in _MODEL_FIELDS:
            model_kwargs[key] = _coerce(key, raw, _MODEL_FIELDS[key])
        elif key in _TRAIN_FIELDS:
            train_kwargs[key] = _coerce(key, raw, _TRAIN_FIELDS[key])
        else:
            raise ValidationError(f"unknown config key {key!r}")
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


def load_config(path: str | None) -> tuple[ModelConfig, TrainConfig]:
    if path is None:
        return ModelConfig(), TrainConfig()
    if not os.path.exists(path):
        raise ValidationError(f"config file not found: {path}")
    with open(path) as fh:
        return split_config(parse_config_text(fh.read()))


# ---------------------------------------------------------------- manifest


def _utcnow() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def write_manifest(
    out_dir: str,
    command: str,
    config: dict,
    inputs: dict[str, str],
    outputs: list[str],
    seed: int | None,
    started: str,
) -> None:
    """One run_manifest.json per command invocation.

    Carries timestamps by design, so it is the only output file excluded
    from byte-identity comparisons between reruns.
    """
    manifest = {
        "command": command,
        "config": config,
        "inputs": {path: dataio.sha256_file(path) for path in sorted(inputs)},
        "code_version": __version__,
        "checkpoint_format_version": CHECKPOINT_FORMAT_VERSION,
        "seed": seed,
        "started": started,
        "finished": _utcnow(),
        "outputs": sorted(outputs),
    }
    dataio.write_json(os.path.join(out_dir, "run_manifest.json"), manifest)


# ------------------------------------------------------------ report files


def _cell(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return repr(value)
    if isinstance(value, list):
        return json.dumps(value)
    return "" if value is None else str(value)


def _sanitize(value):
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def write_report(out_dir: str, stem: str, rows: list[dict]) -> list[str]:
    """Write rows as <stem>.csv and <stem>.ndjson; returns the file names."""
    if not rows:
        raise ValidationError(f"no rows to report for {stem}")
    fieldnames = list(rows[0].keys())
    csv_name = f"{stem}.csv"
    nd_name = f"{stem}.ndjson"
    with open(os.path.join(out_dir, csv_name), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([_cell(row.get(k)) for k in fieldnames])
    with open(os.path.join(out_dir, nd_name), "w") as fh:
        for row in rows:
            fh.write(json.dumps({k: _sanitize(v) for k, v in row.items()}) + "\n")
    return [csv_name, nd_name]


def write_plot_data(out_dir: str, stem: str, points: list[tuple]) -> str:
    """Plot-ready (x, y, sd[, series]) CSV; plotting itself is out of scope."""
    name = f"{stem}.csv"
    width = max(len(p) for p in points)
    header = ["x", "y", "sd", "series"][:width]
    with open(os.path.join(out_dir, name), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for p in points:
            writer.writerow([_cell(v) for v in p])
    return name


# ----------------------------------------------------------- shared loaders


def _records_path(data: str) -> str:
    if os.path.isdir(data):
        path = os.path.join(data, "records.ndjson")
    else:
        path = data
    if not os.path.exists(path):
        raise ValidationError(f"records file not found: {path}")
    return path


def _load_segments(data: str, max_missing: float | None):
    path = _records_path(data)
    records = dataio.read_records_ndjson(path)
    segments = preprocess_records(records, max_missing=max_missing)
    if not segments:
        raise ValidationError(f"{path}: no usable segments after preprocessing")
    return path, segments


def _load_labels(path: str) -> dict[str, dict]:
    if not os.path.exists(path):
        raise ValidationError(f"labels file not found: {path}")
    return dataio.read_labels_csv(path)


def _load_model(path: str):
    if not os.path.exists(path):
        raise ValidationError(f"checkpoint not found: {path}")
    model, _ = load_checkpoint(path)
    return model


def _probe_inputs(args, max_missing: float | None = 0.5):
    """Everything the evaluation commands share: model, embeddings, labels."""
    model = _load_model(args.ckpt)
    records_path, segments = _load_segments(args.data, max_missing)
    labels_by_record = _load_labels(args.labels)
    record_ids = [s.source_record for s in segments]
    labels = segment_labels(record_ids, labels_by_record, args.task)
    reps = embed_segments(model, segments)
    inputs = {args.ckpt: None, records_path: None, args.labels: None}
    return model, segments, record_ids, labels, reps, inputs


def _task(args) -> ProbeTask:
    return ProbeTask(name=args.task, n_runs=args.runs, seed=args.seed)


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    started = _utcnow()
    if not 0.0 <= args.mix <= 1.0:
        raise ValidationError(f"--mix must be in [0, 1], got {args.mix}")
    if not 0.0 <= args.dropout_min <= args.dropout_max < 1.0:
        raise ValidationError("need 0 <= dropout-min <= dropout-max < 1")
    os.makedirs(args.out, exist_ok=True)
    synthgen.generate_corpus(
        n_records=args.n,
        class_mix=args.mix,
        seed=args.seed,
        out_dir=args.out,
        duration=args.duration,
        dropout_range=(args.dropout_min, args.dropout_max),
    )
    write_manifest(
        args.out,
        "generate",
        config={
            "n": args.n,
            "mix": args.mix,
            "duration": args.duration,
            "dropout_range": [args.dropout_min, args.dropout_max],
        },
        inputs={},
        outputs=["records.ndjson", "labels.csv", "params.ndjson", "manifest.json"],
        seed=args.seed,
        started=started,
    )
    return 0


def cmd_featurize(args) -> int:
    started = _utcnow()
    records_path, segments = _load_segments(args.data, max_missing=None)
    os.makedirs(args.out, exist_ok=True)
    from .features import segment_features

    out_csv = os.path.join(args.out, "features.csv")
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["record_id", "start_offset", "patch_index", "segment_missing_fraction"]
            + list(FEATURE_NAMES)
        )
        for seg in segments:
            feats = segment_features(seg)
            for p in range(feats.shape[0]):
                writer.writerow(
                    [seg.source_record, seg.start_offset, p, repr(seg.missing_fraction)]
                    + [repr(float(v)) for v in feats[p]]
                )
    write_manifest(
        args.out,
        "featurize",
        config={"n_segments": len(segments)},
        inputs={records_path: None},
        outputs=["features.csv"],
        seed=None,
        started=started,
    )
    return 0


def cmd_pretrain(args) -> int:
    started = _utcnow()
    model_cfg, train_cfg = load_config(args.config)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    records_path, segments = _load_segments(args.data, max_missing=0.5)
    os.makedirs(args.out, exist_ok=True)
    model, metrics = pretrain(
        segments,
        model_config=None if args.resume else model_cfg,
        train_config=train_cfg,
        out_dir=args.out,
        resume_from=args.resume,
    )
    inputs = {records_path: None}
    if args.config:
        inputs[args.config] = None
    if args.resume:
        inputs[args.resume] = None
    write_manifest(
        args.out,
        "pretrain",
        config={
            "model": dataclasses.asdict(model.config),
            "train": dataclasses.asdict(train_cfg),
            "n_segments": len(segments),
            "final_loss": metrics[-1]["loss_total"] if metrics else None,
        },
        inputs=inputs,
        outputs=["model.ckpt", "metrics.ndjson"],
        seed=train_cfg.seed,
        started=started,
    )
    return 0


def cmd_embed(args) -> int:
    started = _utcnow()
    model = _load_model(args.ckpt)
    records_path, segments = _load_segments(args.data, max_missing=None)
    reps = embed_segments(model, segments)
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, "embeddings.csv")
    dim = reps.shape[1]
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["record_id", "start_offset", "missing_fraction"]
            + [f"e{j:03d}" for j in range(dim)]
        )
        for seg, row in zip(segments, reps):
            writer.writerow(
                [seg.source_record, seg.start_offset, repr(seg.missing_fraction)]
                + [repr(float(v)) for v in row]
            )
    write_manifest(
        args.out,
        "embed",
        config={"n_segments": len(segments), "dim": dim},
        inputs={args.ckpt: None, records_path: None},
        outputs=["embeddings.csv"],
        seed=None,
        started=started,
    )
    return 0


def cmd_probe(args) -> int:
    started = _utcnow()
    _, _, record_ids, labels, reps, inputs = _probe_inputs(args)
    report = run_probe(reps, labels, record_ids, _task(args))
    os.makedirs(args.out, exist_ok=True)
    outputs = write_report(args.out, "probe_report", [report.to_row()])
    outputs.append(
        write_plot_data(
            args.out, "probe_plot", [(report.task, report.auc_mean, report.auc_sd)]
        )
    )
    write_manifest(
        args.out,
        "probe",
        config={"task": args.task, "runs": args.runs},
        inputs=inputs,
        outputs=outputs,
        seed=args.seed,
        started=started,
    )
    return 0


def cmd_sweep(args) -> int:
    started = _utcnow()
    _, _, record_ids, labels, reps, inputs = _probe_inputs(args)
    reports = data_regime_sweep(reps, labels, record_ids, _task(args), SWEEP_FRACTIONS)
    os.makedirs(args.out, exist_ok=True)
    outputs = write_report(args.out, "sweep_report", [r.to_row() for r in reports])
    outputs.append(
        write_plot_data(
            args.out,
            "sweep_plot",
            [(r.train_fraction, r.auc_mean, r.auc_sd) for r in reports],
        )
    )
    write_manifest(
        args.out,
        "sweep",
        config={"task": args.task, "runs": args.runs, "fractions": list(SWEEP_FRACTIONS)},
        inputs=inputs,
        outputs=outputs,
        seed=args.seed,
        started=started,
    )
    return 0


def cmd_dropout_eval(args) -> int:
    started = _utcnow()
    _, segments, record_ids, labels, reps, inputs = _probe_inputs(args)
    missing = np.array([s.missing_fraction for s in segments])
    task = _task(args)
    enc_reports = dropout_robustness(reps, labels, record_ids, missing, task)
    raw = pooled_feature_matrix(segments)
    raw_reports = dropout_robustness(raw, labels, record_ids, missing, task)
    rows = []
    for name, reports in (("encoder", enc_reports), ("raw_features", raw_reports)):
        for r in reports:
            row = {"representation": name}
            row.update(r.to_row())
            rows.append(row)
    os.makedirs(args.out, exist_ok=True)
    outputs = write_report(args.out, "dropout_report", rows)
    outputs.append(
        write_plot_data(
            args.out,
            "dropout_plot",
            [
                (r["dropout_bin"], r["auc_mean"], r["auc_sd"], r["representation"])
                for r in rows
            ],
        )
    )
    write_manifest(
        args.out,
        "dropout-eval",
        config={"task": args.task, "runs": args.runs},
        inputs=inputs,
        outputs=outputs,
        seed=args.seed,
        started=started,
    )
    return 0


def cmd_ablate(args) -> int:
    started = _utcnow()
    model_cfg, train_cfg = load_config(args.config)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    records_path, segments = _load_segments(args.data, max_missing=0.5)
    labels_by_record = _load_labels(args.labels)
    task_names = [t.strip() for t in args.task.split(",") if t.strip()]
    if not task_names:
        raise ValidationError("--task must name at least one label column")
    tasks = [ProbeTask(name=t, n_runs=args.runs, seed=train_cfg.seed) for t in task_names]
    rows = ablation_matrix(
        segments, segments, labels_by_record, model_cfg, train_cfg, tasks
    )
    os.makedirs(args.out, exist_ok=True)
    outputs = write_report(args.out, "ablation_report", rows)
    outputs.append(
        write_plot_data(
            args.out,
            "ablation_plot",
            [
                (r["variant"], r["auc_mean"], r["auc_sd"])
                for r in rows
                if r["task"] == "average"
            ],
        )
    )
    inputs = {records_path: None, args.labels: None}
    if args.config:
        inputs[args.config] = None
    write_manifest(
        args.out,
        "ablate",
        config={
            "model": dataclasses.asdict(model_cfg),
            "train": dataclasses.asdict(train_cfg),
            "tasks": task_names,
        },
        inputs=inputs,
        outputs=outputs,
        seed=train_cfg.seed,
        started=started,
    )
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    results = run_selfcheck()
    failed = []
    for name, ok, detail in results:
        print(f"{'ok  ' if ok else 'FAIL'} {name}: {detail}")
        if not ok:
            failed.append(name)
    if failed:
        print(json.dumps({"error": "selfcheck", "failed": failed}), file=sys.stderr)
        return 2
    print(f"{len(results)} checks passed")
    return 0


# -------------------------------------------------------------- arg parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctgssl",
        description="Self-supervised pretraining and evaluation for CTG signals.",
    )
    parser.add_argument("--version", action="version", version=_VERSION_STRING)
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        metavar="N",
        help="cap BLAS/OpenMP threads; 1 guarantees bit-level determinism",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a labelled synthetic corpus")
    p.add_argument("--n", type=int, required=True, help="number of records")
    p.add_argument("--mix", type=float, default=0.5, help="abnormal fraction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--duration", type=float, default=3600.0, help="seconds per record")
    p.add_argument("--dropout-min", type=float, default=0.0)
    p.add_argument("--dropout-max", type=float, default=0.4)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("featurize", help="handcrafted features for every patch")
    p.add_argument("--data", required=True, help="corpus dir or records.ndjson")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("pretrain", help="run (or resume) self-supervised pretraining")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("embed", help="frozen-encoder segment representations")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    for name, func, extra_help in (
        ("probe", cmd_probe, "linear probe on one task"),
        ("sweep", cmd_sweep, "probe across training-data fractions"),
        ("dropout-eval", cmd_dropout_eval, "probe AUC per missing-data bin"),
    ):
        p = sub.add_parser(name, help=extra_help)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--labels", required=True)
        p.add_argument("--task", default="abnormal")
        p.add_argument("--out", required=True)
        p.add_argument("--runs", type=int, default=5)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="pretrain and probe every ablation variant")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--task", default="abnormal,near_delivery", help="comma-separated")
    p.add_argument("--out", required=True)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("selfcheck", help="run the fast invariant battery")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def _limit_threads(n: int) -> None:
    global _thread_limiter
    import threadpoolctl

    _thread_limiter = threadpoolctl.threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print(json.dumps({"error": "validation", "message": "--threads must be >= 1"}), file=sys.stderr)
            return 1
        _limit_threads(args.threads)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError) as e:
        print(json.dumps({"error": "validation", "message": str(e)}), file=sys.stderr)
        return 1
    except TrainingDiverged as e:
        print(
            json.dumps({"error": "diverged", "message": str(e), "step": e.step}),
            file=sys.stderr,
        )
        return 2
    except Exception as e:  # noqa: BLE001 - contract: runtime failures exit 2
        print(
            json.dumps({"error": "runtime", "type": type(e).__name__, "message": str(e)}),
            file=sys.stderr,
        )
        return 2


if __name__ == "__main__":
    sys.exit(main())
