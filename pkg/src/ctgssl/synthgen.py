"""Synthetic CTG generator with ground-truth labels.

Each record is built from a small set of physiological knobs (baseline,
variability, accel/decel event rates, contraction pattern, dropout) drawn
per class, and the binary labels are a pure function of those knobs, so a
generated corpus comes with exact ground truth:

    abnormal      = variability_bpm < 5 and decel_rate >= 6
    near_delivery = time_to_birth <= 7 days

Generation is fully determined by GenParams.seed; the draw order inside
generate() is fixed (UA tone, contractions, FHR noise, accels, decels,
dropout, metadata) and must not be reordered.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from . import dataio
from .signal_core import RAW_HZ, CtgRecord, Metadata, ingest
from .validation import ValidationError, check_in_range

GENERATOR_VERSION = 2

ABNORMAL_VARIABILITY_BPM = 5.0
ABNORMAL_DECEL_RATE = 6.0
NEAR_DELIVERY_DAYS = 7.0

_NOISE_SMOOTH_SAMPLES = 33  # ~8 s moving average at 4 Hz


@dataclasses.dataclass(frozen=True)
class GenParams:
    """Knobs for one synthetic recording. All rates are events per hour."""

    baseline_bpm: float = 135.0
    variability_bpm: float = 8.0
    accel_rate: float = 4.0
    decel_rate: float = 2.0
    decel_depth_bpm: float = 30.0
    contraction_period: float = 300.0
    contraction_amplitude: float = 50.0
    dropout_fraction: float = 0.0
    duration: float = 3600.0
    seed: int = 0
    # Optional fixed time-to-birth (days). When None it is sampled inside
    # generate(); the corpus sampler pins it so uterine activity can be
    # drawn consistently with delivery proximity.
    time_to_birth: float | None = None

    def __post_init__(self):
        check_in_range(self.baseline_bpm, 110.0, 160.0, "baseline_bpm")
        # The physiological design range is 1-25 but 0 is allowed so a
        # perfectly flat trace can be generated for calibration tests.
        check_in_range(self.variability_bpm, 0.0, 25.0, "variability_bpm")
        check_in_range(self.accel_rate, 0.0, 30.0, "accel_rate")
        check_in_range(self.decel_rate, 0.0, 30.0, "decel_rate")
        check_in_range(self.decel_depth_bpm, 10.0, 60.0, "decel_depth_bpm")
        check_in_range(self.contraction_period, 120.0, 600.0, "contraction_period")
        check_in_range(self.contraction_amplitude, 0.0, 100.0, "contraction_amplitude")
        check_in_range(self.dropout_fraction, 0.0, 0.6, "dropout_fraction")
        if self.duration <= 0:
            raise ValidationError(f"duration must be positive, got {self.duration}")
        if not isinstance(self.seed, (int, np.integer)) or isinstance(self.seed, bool):
            raise ValidationError(f"seed must be an integer, got {self.seed!r}")
        if self.time_to_birth is not None:
            check_in_range(self.time_to_birth, 0.0, 365.0, "time_to_birth")


@dataclasses.dataclass(frozen=True)
class GenLabel:
    abnormal: int
    near_delivery: int

    @classmethod
    def from_params(cls, params: GenParams, metadata: Metadata) -> "GenLabel":
        abnormal = int(
            params.variability_bpm < ABNORMAL_VARIABILITY_BPM
            and params.decel_rate >= ABNORMAL_DECEL_RATE
        )
        return cls(abnormal=abnormal, near_delivery=int(metadata.time_to_birth <= NEAR_DELIVERY_DAYS))


def _raised_cosine(t: np.ndarray, onset: float, width: float) -> np.ndarray:
    """Unit-amplitude raised-cosine bump supported on [onset, onset+width]."""
    phase = (t - onset) / width
    inside = (phase >= 0.0) & (phase <= 1.0)
    bump = np.zeros_like(t)
    bump[inside] = 0.5 * (1.0 - np.cos(2.0 * np.pi * phase[inside]))
    return bump


def _gaussian(t: np.ndarray, center: float, width: float) -> np.ndarray:
    sigma = width / 4.0
    return np.exp(-0.5 * ((t - center) / sigma) ** 2)


def _apply_dropout(rng: np.random.Generator, n: int, target: float) -> np.ndarray:
    """Mark contiguous runs missing until the realized fraction hits target.

    Run lengths are drawn from 4-120 s; the last run is truncated so the
    realized fraction lands in [target, target + 1/n).
    """
    missing = np.zeros(n, dtype=bool)
    if target <= 0.0:
        return missing
    for _ in range(100_000):
        if missing.mean() >= target:
            break
        run = int(round(rng.uniform(4.0, 120.0) * RAW_HZ))
        start = int(rng.integers(0, max(1, n - run + 1)))
        stop = min(n, start + run)
        new = np.flatnonzero(~missing[start:stop]) + start
        deficit = int(np.ceil(target * n)) - int(missing.sum())
        missing[new[:deficit]] = True
    return missing


def generate(params: GenParams, record_id: str | None = None) -> tuple[CtgRecord, GenLabel]:
    """Generate one labelled 4 Hz recording, deterministic in params.seed."""
    rng = np.random.default_rng(params.seed)
    if record_id is None:
        record_id = f"syn{params.seed:010d}"
    n = int(round(params.duration * RAW_HZ))
    if n < RAW_HZ:
        raise ValidationError("duration too short for a single 1 Hz sample")
    t = np.arange(n) / RAW_HZ

    # uterine channel: resting tone plus raised-cosine contraction bumps
    # with onset-to-onset period jittered +-20%
    tone = rng.uniform(5.0, 15.0)
    ua = np.full(n, tone)
    peak_times = []
    if params.contraction_amplitude > 0:
        onset = rng.uniform(0.0, params.contraction_period)
        while onset < params.duration:
            width = rng.uniform(40.0, 80.0)
            ua += params.contraction_amplitude * _raised_cosine(t, onset, width)
            peak_times.append(onset + width / 2.0)
            onset += params.contraction_period * rng.uniform(0.8, 1.2)
    np.clip(ua, 0.0, 100.0, out=ua)

    # heart rate channel: baseline + band-limited noise + accel/decel bumps
    fhr = np.full(n, params.baseline_bpm)
    if params.variability_bpm > 0:
        white = rng.standard_normal(n)
        kernel = np.ones(_NOISE_SMOOTH_SAMPLES) / _NOISE_SMOOTH_SAMPLES
        smooth = np.convolve(white, kernel, mode="same")
        sd = smooth.std()
        if sd > 0:
            fhr += smooth * (params.variability_bpm / sd)

    n_accel = int(rng.poisson(params.accel_rate * params.duration / 3600.0))
    for _ in range(n_accel):
        center = rng.uniform(0.0, params.duration)
        amp = rng.uniform(15.0, 25.0)
        width = rng.uniform(15.0, 45.0)
        fhr += amp * _gaussian(t, center, width)

    n_decel = int(rng.poisson(params.decel_rate * params.duration / 3600.0))
    for _ in range(n_decel):
        width = rng.uniform(30.0, 90.0)
        coupled = rng.random() < 0.7 and len(peak_times) > 0
        if coupled:
            center = peak_times[int(rng.integers(0, len(peak_times)))] + rng.uniform(0.0, 30.0)
        else:
            center = rng.uniform(0.0, params.duration)
        fhr -= params.decel_depth_bpm * _gaussian(t, center, width)
    np.clip(fhr, 30.0, 240.0, out=fhr)

    # dropout, independent per channel
    fhr[_apply_dropout(rng, n, params.dropout_fraction)] = np.nan
    ua[_apply_dropout(rng, n, params.dropout_fraction)] = np.nan

    ga = rng.uniform(26.0, 42.0)
    ma = float(np.clip(rng.normal(30.0, 5.0), 14.0, 55.0))
    if params.time_to_birth is not None:
        ttb = params.time_to_birth
    elif rng.random() < 0.5:
        ttb = rng.uniform(0.0, NEAR_DELIVERY_DAYS)
    else:
        ttb = rng.uniform(NEAR_DELIVERY_DAYS + 1.0, 60.0)
    metadata = Metadata(gestational_age=ga, time_to_birth=ttb, maternal_age=ma)

    record = ingest(record_id, fhr, ua, metadata, hz=RAW_HZ)
    return record, GenLabel.from_params(params, metadata)


def _draw_class_params(rng: np.random.Generator, abnormal: bool, duration: float,
                       dropout_range: tuple[float, float], seed: int) -> GenParams:
    """Draw per-record knobs for one class.

    The abnormal region (low variability AND frequent decelerations) is
    separated from both normal regions with clear margins around the label
    thresholds (5 bpm, 6 events/h): most normals have high variability,
    and a minority shares the low-variability band but has rare
    decelerations, so both label dimensions stay relevant while a
    20-minute segment still carries enough events to classify it.

    Delivery proximity is drawn here too (not inside generate()) so the
    uterine channel can reflect it: records close to delivery get shorter
    contraction periods and larger amplitudes, making time_to_birth
    partially predictable from the signal, as the metadata pretext task
    assumes.
    """
    if abnormal:
        variability = rng.uniform(2.0, 4.5)
        decel = rng.uniform(9.0, 16.0)
    elif rng.random() < 0.3:
        variability = rng.uniform(3.2, 4.9)
        decel = rng.uniform(0.5, 2.5)
    else:
        variability = rng.uniform(5.6, 9.5)
        decel = rng.uniform(3.0, 12.0)
    if rng.random() < 0.5:
        ttb = rng.uniform(0.5, NEAR_DELIVERY_DAYS - 0.5)
        period = rng.uniform(150.0, 280.0)
        amplitude = rng.uniform(45.0, 85.0)
    else:
        ttb = rng.uniform(NEAR_DELIVERY_DAYS + 1.5, 45.0)
        period = rng.uniform(300.0, 540.0)
        amplitude = rng.uniform(25.0, 65.0)
    return GenParams(
        baseline_bpm=rng.uniform(120.0, 150.0),
        variability_bpm=variability,
        accel_rate=rng.uniform(1.0, 8.0),
        decel_rate=decel,
        decel_depth_bpm=rng.uniform(20.0, 50.0),
        contraction_period=period,
        contraction_amplitude=amplitude,
        dropout_fraction=rng.uniform(*dropout_range),
        duration=duration,
        seed=seed,
        time_to_birth=ttb,
    )


def params_to_dict(params: GenParams) -> dict:
    return dataclasses.asdict(params)


def generate_corpus(
    n_records: int,
    class_mix: float,
    seed: int,
    out_dir: str,
    duration: float = 3600.0,
    dropout_range: tuple[float, float] = (0.0, 0.4),
) -> dict:
    """Generate a labelled corpus on disk and return its manifest.

    class_mix is the abnormal fraction; the realized count is
    round(class_mix * n_records). Outputs under out_dir: records.ndjson,
    labels.csv, params.ndjson (per-record knobs + labels, enough to
    recompute every label), manifest.json.
    """
    if n_records < 1:
        raise ValidationError(f"n_records must be >= 1, got {n_records}")
    check_in_range(class_mix, 0.0, 1.0, "class_mix")
    if not (0.0 <= dropout_range[0] <= dropout_range[1] <= 0.6):
        raise ValidationError(f"bad dropout_range {dropout_range}")
    os.makedirs(out_dir, exist_ok=True)

    master = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    n_abnormal = int(round(class_mix * n_records))
    classes = np.zeros(n_records, dtype=bool)
    classes[:n_abnormal] = True
    master.shuffle(classes)
    record_seeds = master.integers(0, 2**62, size=n_records)

    records_path = os.path.join(out_dir, "records.ndjson")
    labels_rows = []
    params_rows = []
    with open(records_path, "w") as fh:
        for i in range(n_records):
            params = _draw_class_params(
                master, bool(classes[i]), duration, dropout_range, int(record_seeds[i])
            )
            record_id = f"rec{i:05d}"
            record, label = generate(params, record_id=record_id)
            if bool(label.abnormal) != bool(classes[i]):
                raise RuntimeError(
                    f"class draw produced wrong label for {record_id} (internal error)"
                )
            fh.write(json.dumps(dataio.record_to_dict(record), allow_nan=False) + "\n")
            labels_rows.append(
                {
                    "record_id": record_id,
                    "abnormal": label.abnormal,
                    "near_delivery": label.near_delivery,
                }
            )
            params_rows.append(
                {
                    "record_id": record_id,
                    "params": params_to_dict(params),
                    "metadata": {
                        "gestational_age": record.metadata.gestational_age,
                        "time_to_birth": record.metadata.time_to_birth,
                        "maternal_age": record.metadata.maternal_age,
                    },
                    "label": {"abnormal": label.abnormal, "near_delivery": label.near_delivery},
                }
            )

    dataio.write_labels_csv(os.path.join(out_dir, "labels.csv"), labels_rows)
    with open(os.path.join(out_dir, "params.ndjson"), "w") as fh:
        for row in params_rows:
            fh.write(json.dumps(row, allow_nan=False) + "\n")

    manifest = {
        "generator_version": GENERATOR_VERSION,
        "seed": int(seed),
        "n_records": int(n_records),
        "class_mix": float(class_mix),
        "n_abnormal": int(n_abnormal),
        "duration": float(duration),
        "dropout_range": [float(dropout_range[0]), float(dropout_range[1])],
        "files": ["records.ndjson", "labels.csv", "params.ndjson"],
    }
    dataio.write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def read_params_ndjson(path: str) -> list[dict]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
