"""Handcrafted per-patch clinical features.

Every 60-second patch maps to a fixed vector of 17 features computed from
the raw-unit samples (bpm / UA units, never the normalized values) and the
validity mask. FHR statistics use only valid samples; a channel with fewer
than two valid samples falls back to its fill constant for location
features and 0 for spread/event features, so the extractor is total.

Feature order (indices used by tests and docs are 1-based):

     1 fhr_mean           mean of valid FHR
     2 fhr_std            population std of valid FHR
     3 fhr_min
     4 fhr_max
     5 fhr_range          max - min
     6 fhr_stv            mean |successive difference| over valid pairs
     7 fhr_rmssd          rms of successive differences over valid pairs
     8 fhr_zero_crossings sign changes of linearly detrended valid series
     9 fhr_slope          least-squares trend, bpm per minute
    10 fhr_above_median   count of valid samples > median + 15 bpm
    11 fhr_below_median   count of valid samples < median - 15 bpm
    12 missing_fraction   fraction invalid over both channels
    13 ua_mean            mean of valid UA
    14 ua_std             population std of valid UA
    15 ua_max
    16 ua_peaks           count of separated threshold-crossing UA peaks
    17 fhr_ua_corr        Pearson correlation where both channels valid
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .signal_core import FHR_FALLBACK, PATCH_SECONDS, UA_FALLBACK, Segment, denormalize_values
from .validation import ValidationError, check_shape

FEATURE_NAMES = (
    "fhr_mean",
    "fhr_std",
    "fhr_min",
    "fhr_max",
    "fhr_range",
    "fhr_stv",
    "fhr_rmssd",
    "fhr_zero_crossings",
    "fhr_slope",
    "fhr_above_median",
    "fhr_below_median",
    "missing_fraction",
    "ua_mean",
    "ua_std",
    "ua_max",
    "ua_peaks",
    "fhr_ua_corr",
)
N_FEATURES = len(FEATURE_NAMES)

UA_PEAK_MIN_SEPARATION = 20  # seconds
UA_PEAK_STD_FACTOR = 0.5
MEDIAN_BAND_BPM = 15.0


def _linear_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares line y ~ a + b*x via the closed form."""
    xm = x.mean()
    ym = y.mean()
    xc = x - xm
    denom = float(np.dot(xc, xc))
    b = float(np.dot(xc, y - ym) / denom) if denom > 0 else 0.0
    a = ym - b * xm
    return a, b


def _count_ua_peaks(ua_filled: np.ndarray, threshold: float) -> int:
    """Local maxima above threshold, at least UA_PEAK_MIN_SEPARATION apart.

    Candidates are interior samples with a strict rise on the left and a
    non-drop on the right; candidates closer than the separation to the
    previously accepted peak are skipped (greedy left-to-right).
    """
    n = ua_filled.shape[0]
    count = 0
    last = -UA_PEAK_MIN_SEPARATION
    for i in range(1, n - 1):
        if (
            ua_filled[i] > ua_filled[i - 1]
            and ua_filled[i] >= ua_filled[i + 1]
            and ua_filled[i] > threshold
            and i - last >= UA_PEAK_MIN_SEPARATION
        ):
            count += 1
            last = i
    return count


def extract_features(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Compute the 17-feature vector for one raw-unit patch.

    values is (P, 2) gap-filled raw samples (FHR bpm, UA units); valid is
    the matching pre-fill validity mask.
    """
    values = np.asarray(values, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    check_shape(values, (None, 2), "values")
    if values.shape != valid.shape:
        raise ValidationError(f"values/valid shape mismatch: {values.shape} vs {valid.shape}")
    if not np.all(np.isfinite(values)):
        raise ValidationError("values must be gap-filled (no NaN) before feature extraction")

    fhr = values[:, 0]
    ua = values[:, 1]
    fv = valid[:, 0]
    uv = valid[:, 1]
    out = np.zeros(N_FEATURES, dtype=np.float64)

    if fv.sum() >= 2:
        y = fhr[fv]
        out[0] = y.mean()
        out[1] = y.std()
        out[2] = y.min()
        out[3] = y.max()
        out[4] = out[3] - out[2]
        pair = fv[:-1] & fv[1:]
        if pair.any():
            d = (fhr[1:] - fhr[:-1])[pair]
            out[5] = np.abs(d).mean()
            out[6] = float(np.sqrt(np.mean(d * d)))
        x = np.flatnonzero(fv).astype(np.float64)
        a, b = _linear_fit(x, y)
        out[8] = b * 60.0
        r = y - (a + b * x)
        out[7] = float(np.count_nonzero(r[:-1] * r[1:] < 0))
        med = float(np.median(y))
        out[9] = float(np.count_nonzero(y > med + MEDIAN_BAND_BPM))
        out[10] = float(np.count_nonzero(y < med - MEDIAN_BAND_BPM))
    else:
        out[0] = FHR_FALLBACK
        out[2] = FHR_FALLBACK
        out[3] = FHR_FALLBACK

    out[11] = 1.0 - valid.mean()

    if uv.sum() >= 2:
        u = ua[uv]
        out[12] = u.mean()
        out[13] = u.std()
        out[14] = u.max()
        threshold = out[12] + UA_PEAK_STD_FACTOR * out[13]
        out[15] = float(_count_ua_peaks(ua, threshold))
    else:
        out[12] = UA_FALLBACK
        out[14] = UA_FALLBACK

    both = fv & uv
    if both.sum() >= 2:
        xf = fhr[both]
        xu = ua[both]
        if not np.all(xf == xf[0]) and not np.all(xu == xu[0]):
            out[16] = float(np.corrcoef(xf, xu)[0, 1])

    return out


def segment_features(segment: Segment, patch_len: int = PATCH_SECONDS) -> np.ndarray:
    """Feature vectors for every patch of a segment, shape (N, 17).

    Values are converted back to raw units first when the segment is
    normalized, so features never depend on the normalization constants.
    """
    values = denormalize_values(segment.values) if segment.normalized else segment.values
    L = values.shape[0]
    if L % patch_len != 0:
        raise ValidationError(f"segment length {L} not divisible by patch length {patch_len}")
    n = L // patch_len
    out = np.empty((n, N_FEATURES), dtype=np.float64)
    for i in range(n):
        sl = slice(i * patch_len, (i + 1) * patch_len)
        out[i] = extract_features(values[sl], segment.valid[sl])
    return out


class FeatureStandardizer(BaseEstimator, TransformerMixin):
    """Per-dimension z-scoring with near-constant dimensions zeroed.

    fit() records mean and population std per feature over the training
    corpus; transform() maps x -> (x - mean) / std, with dimensions whose
    std is below `min_std` mapped to exactly 0 so they carry no signal.
    """

    def __init__(self, min_std: float = 1e-8):
        self.min_std = min_std

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        check_shape(X, (None, N_FEATURES), "X")
        if X.shape[0] < 1:
            raise ValidationError("cannot fit feature statistics on an empty matrix")
        if not np.all(np.isfinite(X)):
            raise ValidationError("X contains non-finite values")
        self.mean_ = X.mean(axis=0)
        self.std_ = X.std(axis=0)
        self.active_ = self.std_ >= self.min_std
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = np.asarray(X, dtype=np.float64)
        check_shape(X, (None, N_FEATURES), "X")
        denom = np.where(self.active_, self.std_, 1.0)
        z = (X - self.mean_) / denom
        z[:, ~self.active_] = 0.0
        return z

    @classmethod
    def from_stats(cls, mean: np.ndarray, std: np.ndarray, min_std: float = 1e-8):
        est = cls(min_std=min_std)
        est.mean_ = np.asarray(mean, dtype=np.float64)
        est.std_ = np.asarray(std, dtype=np.float64)
        if est.mean_.shape != (N_FEATURES,) or est.std_.shape != (N_FEATURES,):
            raise ValidationError("feature stats must have shape (17,)")
        est.active_ = est.std_ >= min_std
        return est


def fit_feature_stats(segments: list[Segment]) -> FeatureStandardizer:
    """Fit standardization statistics over every patch of a corpus."""
    if not segments:
        raise ValidationError("cannot fit feature statistics on an empty corpus")
    mats = [segment_features(s) for s in segments]
    return FeatureStandardizer().fit(np.concatenate(mats, axis=0))
