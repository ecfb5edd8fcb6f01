"""Frozen random-projection quantizers.

A quantizer maps a d_in vector to a discrete code: project with a fixed
random matrix, L2-normalize, and return the index of the nearest codebook
row (squared Euclidean distance). Projection and codebook are drawn once
from a seed and never trained; two independent instances tokenize signal
patches (120 -> 16, 256 codes) and feature vectors (17 -> 8, 64 codes).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import ValidationError, check_positive_int

SIGNAL_QUANTIZER = dict(d_in=120, d_lat=16, codebook_size=256)
FEATURE_QUANTIZER = dict(d_in=17, d_lat=8, codebook_size=64)

_CHUNK_ROWS = 512


class RandomProjectionQuantizer(BaseEstimator, TransformerMixin):
    """BEST-RQ style frozen quantizer.

    fit() materializes the frozen matrices from the seed (it ignores X):
    projection_ is (d_in, d_lat) ~ N(0, 1/d_lat); codebook_ is
    (codebook_size, d_lat) with standard-normal rows L2-normalized. Both
    arrays are marked read-only. transform() maps (n, d_in) -> (n,) int
    codes; ties break to the lowest index and a zero-norm projection
    normalizes to the zero vector.
    """

    def __init__(self, d_in: int = 120, d_lat: int = 16, codebook_size: int = 256, seed: int = 0):
        self.d_in = d_in
        self.d_lat = d_lat
        self.codebook_size = codebook_size
        self.seed = seed

    def fit(self, X=None, y=None):
        check_positive_int(self.d_in, "d_in")
        check_positive_int(self.d_lat, "d_lat")
        check_positive_int(self.codebook_size, "codebook_size")
        rng = np.random.default_rng(self.seed)
        proj = rng.normal(0.0, 1.0 / np.sqrt(self.d_lat), size=(self.d_in, self.d_lat))
        cb = rng.standard_normal((self.codebook_size, self.d_lat))
        norms = np.linalg.norm(cb, axis=1, keepdims=True)
        if np.any(norms == 0):  # probability zero, but keep the math total
            norms[norms == 0] = 1.0
        cb = cb / norms
        proj.setflags(write=False)
        cb.setflags(write=False)
        self.projection_ = proj
        self.codebook_ = cb
        return self

    def _normalized_projection(self, X: np.ndarray) -> np.ndarray:
        z = X @ self.projection_
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        out = np.zeros_like(z)
        nz = norms[:, 0] > 0
        out[nz] = z[nz] / norms[nz]
        return out

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "projection_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.d_in:
            raise ValidationError(f"expected (n, {self.d_in}) input, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValidationError("quantizer input contains non-finite values")
        labels = np.empty(X.shape[0], dtype=np.int64)
        for start in range(0, X.shape[0], _CHUNK_ROWS):
            block = self._normalized_projection(X[start : start + _CHUNK_ROWS])
            d2 = ((block[:, None, :] - self.codebook_[None, :, :]) ** 2).sum(axis=2)
            labels[start : start + block.shape[0]] = np.argmin(d2, axis=1)
        return labels

    def quantize(self, x) -> int:
        """Code for a single d_in vector."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.d_in,):
            raise ValidationError(f"expected a ({self.d_in},) vector, got shape {x.shape}")
        return int(self.transform(x[None, :])[0])


def build_quantizer(d_in: int, d_lat: int, codebook_size: int, seed: int) -> RandomProjectionQuantizer:
    return RandomProjectionQuantizer(
        d_in=d_in, d_lat=d_lat, codebook_size=codebook_size, seed=seed
    ).fit()
