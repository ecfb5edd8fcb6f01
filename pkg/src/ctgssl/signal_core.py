"""Domain types and deterministic preprocessing for CTG recordings.

A recording carries two channels, fetal heart rate (FHR, bpm) and uterine
activity (UA, arbitrary 0-100 units), sampled at 4 Hz with missing samples
encoded as NaN. Preprocessing is a fixed deterministic pipeline:

    downsample to 1 Hz -> window into 20-minute segments -> fill gaps ->
    normalize -> cut into 60-sample patches

Every stage is a pure function of its input so the same record always maps
to byte-identical segments.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .validation import ValidationError, as_float_array, check_in_range

RAW_HZ = 4
TARGET_HZ = 1
WINDOW_SECONDS = 1200  # 20 minutes at 1 Hz
PATCH_SECONDS = 60
N_PATCHES = WINDOW_SECONDS // PATCH_SECONDS
N_CHANNELS = 2

# plausibility band applied at ingestion; FHR outside it becomes missing
FHR_PLAUSIBLE = (30.0, 240.0)
UA_PLAUSIBLE = (0.0, 100.0)

# normalization constants (clip then affine)
FHR_CLIP = (50.0, 210.0)
FHR_CENTER = 130.0
FHR_SCALE = 30.0
UA_CLIP = (0.0, 100.0)
UA_CENTER = 25.0
UA_SCALE = 25.0

# fallback fill when a channel has no valid sample at all in a window
FHR_FALLBACK = 130.0
UA_FALLBACK = 10.0

MAX_INTERP_GAP = 30  # seconds; longer gaps get the segment median instead

PRETRAIN_MAX_MISSING = 0.5


@dataclasses.dataclass(frozen=True)
class Metadata:
    """Per-recording patient metadata used as a regression target.

    gestational_age is in weeks, time_to_birth in days, maternal_age in years.
    """

    gestational_age: float
    time_to_birth: float
    maternal_age: float

    def __post_init__(self):
        check_in_range(self.gestational_age, 20.0, 44.0, "gestational_age")
        check_in_range(self.time_to_birth, 0.0, 365.0, "time_to_birth")
        check_in_range(self.maternal_age, 14.0, 55.0, "maternal_age")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.gestational_age, self.time_to_birth, self.maternal_age], dtype=np.float64
        )


METADATA_FIELDS = ("gestational_age", "time_to_birth", "maternal_age")


@dataclasses.dataclass
class CtgRecord:
    """One CTG recording: two aligned channels plus metadata.

    fhr and ua are float64 arrays of equal length with NaN marking missing
    samples. Construct via ingest() so the plausibility rules are applied.
    """

    record_id: str
    fhr: np.ndarray
    ua: np.ndarray
    metadata: Metadata
    hz: float = RAW_HZ

    def __post_init__(self):
        if not self.record_id:
            raise ValidationError("record_id must be a non-empty string")
        if self.fhr.shape != self.ua.shape or self.fhr.ndim != 1:
            raise ValidationError(
                f"fhr/ua must be equal-length 1-d arrays, got {self.fhr.shape} vs {self.ua.shape}"
            )

    def __len__(self) -> int:
        return self.fhr.shape[0]


def ingest(record_id: str, fhr, ua, metadata: Metadata, hz: float = RAW_HZ) -> CtgRecord:
    """Build a CtgRecord, mapping implausible or non-finite samples to NaN.

    FHR outside [30, 240] bpm becomes missing; UA is clipped into [0, 100]
    and non-finite UA becomes missing.
    """
    fhr = as_float_array(fhr, "fhr", ndim=1, allow_nan=True).copy()
    ua = as_float_array(ua, "ua", ndim=1, allow_nan=True).copy()
    if fhr.shape != ua.shape:
        raise ValidationError(f"fhr/ua length mismatch: {fhr.shape[0]} vs {ua.shape[0]}")
    bad_f = ~np.isfinite(fhr) | (fhr < FHR_PLAUSIBLE[0]) | (fhr > FHR_PLAUSIBLE[1])
    fhr[bad_f] = np.nan
    bad_u = ~np.isfinite(ua)
    ua[bad_u] = np.nan
    np.clip(ua, UA_PLAUSIBLE[0], UA_PLAUSIBLE[1], out=ua)
    ua[bad_u] = np.nan
    return CtgRecord(record_id=record_id, fhr=fhr, ua=ua, metadata=metadata, hz=float(hz))


@dataclasses.dataclass
class Segment:
    """A 20-minute window at 1 Hz, gap-filled, with its original validity.

    values is (1200, 2) with channel 0 = FHR, channel 1 = UA. valid is the
    pre-fill validity mask; missing_fraction is 1 - mean(valid).
    """

    values: np.ndarray
    valid: np.ndarray
    missing_fraction: float
    metadata: Metadata
    source_record: str
    start_offset: int
    normalized: bool = False

    def __post_init__(self):
        if self.values.shape != self.valid.shape or self.values.ndim != 2:
            raise ValidationError(
                f"segment values/valid shape mismatch: {self.values.shape} vs {self.valid.shape}"
            )
        if self.values.shape[1] != N_CHANNELS:
            raise ValidationError(f"segment must have {N_CHANNELS} channels")

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclasses.dataclass
class PatchGrid:
    """A segment cut into N non-overlapping patches of P samples.

    patches is (N, 2*P): each row is the channel-major flattening of one
    patch, FHR samples first then UA. patch_valid_fraction is (N,).
    """

    patches: np.ndarray
    patch_valid_fraction: np.ndarray

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]


def downsample_4hz_to_1hz(record: CtgRecord) -> CtgRecord:
    """Block-mean each channel over non-overlapping groups of 4 samples.

    The mean ignores missing samples; a block is missing only when all four
    inputs are missing. A trailing remainder shorter than a block is dropped.
    """
    if record.hz != RAW_HZ:
        raise ValidationError(f"expected a {RAW_HZ} Hz record, got hz={record.hz}")
    n_blocks = len(record) // RAW_HZ
    if n_blocks == 0:
        raise ValidationError(f"empty record {record.record_id!r}: nothing to downsample")

    def block_mean(x: np.ndarray) -> np.ndarray:
        blocks = x[: n_blocks * RAW_HZ].reshape(n_blocks, RAW_HZ)
        valid = np.isfinite(blocks)
        counts = valid.sum(axis=1)
        sums = np.where(valid, blocks, 0.0).sum(axis=1)
        out = np.full(n_blocks, np.nan)
        has = counts > 0
        out[has] = sums[has] / counts[has]
        return out

    return CtgRecord(
        record_id=record.record_id,
        fhr=block_mean(record.fhr),
        ua=block_mean(record.ua),
        metadata=record.metadata,
        hz=TARGET_HZ,
    )


def fill_gaps(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Fill missing samples of a (L, 2) window, one channel at a time.

    Interior gaps of at most MAX_INTERP_GAP seconds are linearly
    interpolated between their valid neighbours; everything else (long gaps
    and the edges) takes the channel median over valid samples. A channel
    with no valid sample at all is filled with its fallback constant.
    """
    filled = values.copy()
    for c, fallback in ((0, FHR_FALLBACK), (1, UA_FALLBACK)):
        col = filled[:, c]
        v = valid[:, c]
        if not v.any():
            col[:] = fallback
            continue
        if v.all():
            continue
        median = float(np.median(col[v]))
        idx = np.flatnonzero(v)
        # default everything missing to the median, then revisit short
        # interior gaps with linear interpolation
        out = col.copy()
        out[~v] = median
        starts = []
        prev = None
        for i in idx:
            if prev is not None and i - prev > 1:
                starts.append((prev, i))
            prev = i
        for left, right in starts:
            gap = right - left - 1
            if gap <= MAX_INTERP_GAP:
                xs = np.arange(left + 1, right)
                out[left + 1 : right] = np.interp(xs, [left, right], [col[left], col[right]])
        filled[:, c] = out
    return filled


def window_segments(record: CtgRecord, stride: int = WINDOW_SECONDS) -> list[Segment]:
    """Cut a 1 Hz record into gap-filled 20-minute segments.

    Windows start at offsets 0, stride, 2*stride, ... while a full window
    fits; a record shorter than one window yields an empty list.
    """
    if record.hz != TARGET_HZ:
        raise ValidationError(f"expected a {TARGET_HZ} Hz record, got hz={record.hz}")
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    n = len(record)
    segments = []
    for start in range(0, n - WINDOW_SECONDS + 1, stride):
        window = np.stack(
            [
                record.fhr[start : start + WINDOW_SECONDS],
                record.ua[start : start + WINDOW_SECONDS],
            ],
            axis=1,
        )
        valid = np.isfinite(window)
        missing_fraction = float(1.0 - valid.mean())
        filled = fill_gaps(window, valid)
        segments.append(
            Segment(
                values=filled,
                valid=valid,
                missing_fraction=missing_fraction,
                metadata=record.metadata,
                source_record=record.record_id,
                start_offset=start,
            )
        )
    return segments


def normalize_values(values: np.ndarray) -> np.ndarray:
    """Clip-then-affine normalization of raw (L, 2) values."""
    out = np.empty_like(values)
    out[:, 0] = (np.clip(values[:, 0], *FHR_CLIP) - FHR_CENTER) / FHR_SCALE
    out[:, 1] = (np.clip(values[:, 1], *UA_CLIP) - UA_CENTER) / UA_SCALE
    return out


def denormalize_values(values: np.ndarray) -> np.ndarray:
    """Exact inverse of normalize_values on the clipped ranges."""
    out = np.empty_like(values)
    out[:, 0] = values[:, 0] * FHR_SCALE + FHR_CENTER
    out[:, 1] = values[:, 1] * UA_SCALE + UA_CENTER
    return out


def normalize(segment: Segment) -> Segment:
    if segment.normalized:
        raise ValidationError("segment is already normalized")
    return dataclasses.replace(
        segment, values=normalize_values(segment.values), normalized=True
    )


def denormalize(segment: Segment) -> Segment:
    if not segment.normalized:
        raise ValidationError("segment is not normalized")
    return dataclasses.replace(
        segment, values=denormalize_values(segment.values), normalized=False
    )


def filter_for_pretraining(segments: list[Segment]) -> list[Segment]:
    """Drop segments with more than 50% missing data."""
    return [s for s in segments if s.missing_fraction <= PRETRAIN_MAX_MISSING]


def _patch_view(arr: np.ndarray, patch_len: int) -> np.ndarray:
    """(L, 2) -> (N, 2*patch_len) channel-major rows (FHR block then UA)."""
    n = arr.shape[0] // patch_len
    return arr.reshape(n, patch_len, N_CHANNELS).transpose(0, 2, 1).reshape(n, -1)


def to_patches(segment: Segment, patch_len: int = PATCH_SECONDS) -> PatchGrid:
    """Cut a normalized segment into non-overlapping flattened patches."""
    if not segment.normalized:
        raise ValidationError("to_patches expects a normalized segment")
    L = len(segment)
    if L % patch_len != 0:
        raise ValidationError(f"segment length {L} not divisible by patch length {patch_len}")
    patches = _patch_view(segment.values, patch_len)
    pv = _patch_view(segment.valid, patch_len)
    return PatchGrid(patches=patches, patch_valid_fraction=pv.mean(axis=1))


def patch_valid_mask(segment: Segment, patch_len: int = PATCH_SECONDS) -> np.ndarray:
    """Per-patch validity in the same channel-major layout as the patches."""
    L = len(segment)
    if L % patch_len != 0:
        raise ValidationError(f"segment length {L} not divisible by patch length {patch_len}")
    return _patch_view(segment.valid, patch_len)


def preprocess_records(
    records: list[CtgRecord],
    stride: int = WINDOW_SECONDS,
    max_missing: float | None = PRETRAIN_MAX_MISSING,
) -> list[Segment]:
    """Full deterministic pipeline from 4 Hz records to normalized segments.

    max_missing=None keeps every window; the default applies the
    pretraining filter (drop anything over 50% missing).
    """
    segments: list[Segment] = []
    for record in records:
        rec1hz = downsample_4hz_to_1hz(record) if record.hz == RAW_HZ else record
        for seg in window_segments(rec1hz, stride=stride):
            if max_missing is not None and seg.missing_fraction > max_missing:
                continue
            segments.append(normalize(seg))
    return segments


def reassemble(grid: PatchGrid, patch_len: int = PATCH_SECONDS) -> np.ndarray:
    """Invert to_patches back to a (N*patch_len, 2) array, bit-exactly."""
    n = grid.patches.shape[0]
    if grid.patches.shape[1] != N_CHANNELS * patch_len:
        raise ValidationError(
            f"patch width {grid.patches.shape[1]} does not match {N_CHANNELS}*{patch_len}"
        )
    return (
        grid.patches.reshape(n, N_CHANNELS, patch_len)
        .transpose(0, 2, 1)
        .reshape(n * patch_len, N_CHANNELS)
    )
