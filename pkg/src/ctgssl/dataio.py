"""On-disk formats: record NDJSON, raw CSV ingestion, labels CSV, manifests.

NDJSON is the canonical interchange format for corpora: one JSON object per
line with keys record_id, hz, fhr, ua, and the metadata fields. Missing
samples are serialized as null. CSV ingestion covers the external format of
one recording per file (header t,fhr,ua at 4 Hz) with a JSON sidecar that
holds record_id and metadata.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os

import numpy as np

from .signal_core import METADATA_FIELDS, CtgRecord, Metadata, ingest
from .validation import ValidationError


def _nan_to_none(arr: np.ndarray) -> list:
    return [None if not np.isfinite(v) else float(v) for v in arr]


def _none_to_nan(values: list) -> np.ndarray:
    return np.array([np.nan if v is None else float(v) for v in values], dtype=np.float64)


def record_to_dict(record: CtgRecord) -> dict:
    d = {
        "record_id": record.record_id,
        "hz": record.hz,
        "fhr": _nan_to_none(record.fhr),
        "ua": _nan_to_none(record.ua),
    }
    for f in METADATA_FIELDS:
        d[f] = float(getattr(record.metadata, f))
    return d


def record_from_dict(d: dict) -> CtgRecord:
    try:
        meta = Metadata(**{f: d[f] for f in METADATA_FIELDS})
        return ingest(
            record_id=d["record_id"],
            fhr=_none_to_nan(d["fhr"]),
            ua=_none_to_nan(d["ua"]),
            metadata=meta,
            hz=float(d.get("hz", 4)),
        )
    except KeyError as exc:
        raise ValidationError(f"record object missing key {exc}") from exc


def write_records_ndjson(path: str, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec), allow_nan=False))
            fh.write("\n")


def read_records_ndjson(path: str) -> list[CtgRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed JSON ({exc})") from exc
            records.append(record_from_dict(d))
    return records


def read_record_csv(csv_path: str, sidecar_path: str | None = None) -> CtgRecord:
    """Read one 4 Hz recording from CSV plus its JSON sidecar.

    The CSV has header t,fhr,ua with t in seconds. An empty cell or an FHR
    of 0 means missing. The sidecar (default: same path with .json suffix)
    holds record_id and the metadata fields.
    """
    if sidecar_path is None:
        root, _ = os.path.splitext(csv_path)
        sidecar_path = root + ".json"
    with open(sidecar_path) as fh:
        sidecar = json.load(fh)
    for key in ("record_id",) + METADATA_FIELDS:
        if key not in sidecar:
            raise ValidationError(f"{sidecar_path}: missing key {key!r}")
    fhr, ua = [], []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != ["t", "fhr", "ua"]:
            raise ValidationError(f"{csv_path}: expected header t,fhr,ua, got {reader.fieldnames}")
        for row in reader:
            f = row["fhr"].strip() if row["fhr"] else ""
            u = row["ua"].strip() if row["ua"] else ""
            fv = np.nan if f == "" else float(f)
            if fv == 0.0:
                fv = np.nan
            fhr.append(fv)
            ua.append(np.nan if u == "" else float(u))
    meta = Metadata(**{f: float(sidecar[f]) for f in METADATA_FIELDS})
    return ingest(sidecar["record_id"], np.array(fhr), np.array(ua), meta, hz=4)


LABEL_COLUMNS = ("record_id", "abnormal", "near_delivery")


def write_labels_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LABEL_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LABEL_COLUMNS})


def read_labels_csv(path: str) -> dict[str, dict]:
    """Map record_id -> {abnormal: int, near_delivery: int}."""
    out: dict[str, dict] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != list(LABEL_COLUMNS):
            raise ValidationError(
                f"{path}: expected header {','.join(LABEL_COLUMNS)}, got {reader.fieldnames}"
            )
        for row in reader:
            rid = row["record_id"]
            if rid in out:
                raise ValidationError(f"{path}: duplicate record_id {rid!r}")
            labels = {}
            for col in LABEL_COLUMNS[1:]:
                v = row[col].strip()
                if v not in ("0", "1"):
                    raise ValidationError(f"{path}: label {col}={v!r} for {rid!r} is not 0/1")
                labels[col] = int(v)
            out[rid] = labels
    return out


def write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def read_json(path: str):
    with open(path) as fh:
        return json.load(fh)


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
