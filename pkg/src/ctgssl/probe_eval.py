"""Frozen-encoder evaluation: linear probes, AUC, and the experiment
harness (data-regime sweep, dropout-bin robustness, ablation matrix).

Protocol invariants, enforced here rather than left to callers: splits are
by record id so no record contributes segments to both sides; the same
split is reused across models within an experiment (it depends only on the
task seed); the encoder is never mutated (checksum-checked); the 5-run
variance comes from probe initialization and train-subsample draws only.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
import zlib

import numpy as np
from scipy.stats import rankdata
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .features import N_FEATURES, segment_features
from .model import ModelConfig, MultiViewModel
from .signal_core import Segment, to_patches
from .validation import ValidationError, check_binary_labels

logger = logging.getLogger(__name__)

SWEEP_FRACTIONS = (0.10, 0.25, 0.50, 0.75, 1.0)
DROPOUT_BINS = ((0.0, 0.10), (0.10, 0.25), (0.25, 0.50))
MIN_BIN_CLASS_COUNT = 10


def auc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) AUC: (concordant + 0.5*tied) / (pos*neg).

    Computed from average ranks so ties are handled exactly; raises on a
    single-class label vector.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = check_binary_labels(labels, "labels")
    if scores.shape != labels.shape:
        raise ValidationError(f"scores/labels shape mismatch: {scores.shape} vs {labels.shape}")
    n_pos = int(labels.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC needs both a positive and a negative example")
    ranks = rankdata(scores)
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


class LinearProbe(BaseEstimator, ClassifierMixin):
    """Linear softmax classifier on frozen representations.

    Standardizes per-dimension on the training split, then trains a
     2-class linear layer with full-batch adaptive-moment updates
    (lr 1e-2, 200 epochs, decoupled weight decay 1e-4 on the weight
    matrix). Deterministic per seed.
    """

    def __init__(self, lr: float = 1e-2, epochs: int = 200, weight_decay: float = 1e-4, seed: int = 0):
        self.lr = lr
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = check_binary_labels(y, "y")
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValidationError(f"bad probe inputs: X {X.shape}, y {y.shape}")
        if np.unique(y).shape[0] < 2:
            raise ValidationError("degenerate task: training split has a single class")
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std < 1e-8, 1.0, std)
        self.dead_ = std < 1e-8
        Z = self._standardize(X)
        n, d = Z.shape
        rng = np.random.default_rng(self.seed)
        W = rng.normal(0.0, 0.01, size=(d, 2))
        b = np.zeros(2)
        onehot = np.zeros((n, 2))
        onehot[np.arange(n), y] = 1.0
        mW = np.zeros_like(W)
        vW = np.zeros_like(W)
        mb = np.zeros_like(b)
        vb = np.zeros_like(b)
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        losses = []
        for t in range(1, self.epochs + 1):
            logits = Z @ W + b
            m = logits.max(axis=1, keepdims=True)
            e = np.exp(logits - m)
            p = e / e.sum(axis=1, keepdims=True)
            nll = -np.log(np.maximum(p[np.arange(n), y], 1e-300))
            losses.append(float(nll.mean()))
            g = (p - onehot) / n
            gW = Z.T @ g
            gb = g.sum(axis=0)
            mW = beta1 * mW + (1 - beta1) * gW
            vW = beta2 * vW + (1 - beta2) * gW * gW
            mb = beta1 * mb + (1 - beta1) * gb
            vb = beta2 * vb + (1 - beta2) * gb * gb
            bc1 = 1 - beta1**t
            bc2 = 1 - beta2**t
            W -= self.lr * ((mW / bc1) / (np.sqrt(vW / bc2) + eps) + self.weight_decay * W)
            b -= self.lr * (mb / bc1) / (np.sqrt(vb / bc2) + eps)
        self.coef_ = W
        self.intercept_ = b
        self.classes_ = np.array([0, 1])
        self.train_losses_ = losses
        return self

    def _standardize(self, X):
        Z = (np.asarray(X, dtype=np.float64) - self.mean_) / self.scale_
        Z[:, self.dead_] = 0.0
        return Z

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        logits = self._standardize(X) @ self.coef_ + self.intercept_
        return logits[:, 1] - logits[:, 0]

    def predict_proba(self, X):
        check_is_fitted(self, "coef_")
        logits = self._standardize(X) @ self.coef_ + self.intercept_
        m = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - m)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(np.int64)


# ------------------------------------------------------------- embedding


def patch_matrix(segments: list[Segment], patch_len: int = 60) -> np.ndarray:
    """(S, N, patch_dim) float32 stack of normalized patch rows."""
    if not segments:
        raise ValidationError("no segments to embed")
    rows = [to_patches(s, patch_len=patch_len).patches.astype(np.float32) for s in segments]
    return np.stack(rows, axis=0)


def embed_matrix(model: MultiViewModel, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Frozen-encoder representations for a stack of patch rows."""
    S, N, pd = patches.shape
    sig_labels = model.sig_quantizer.transform(
        patches.reshape(S * N, pd).astype(np.float64)
    ).reshape(S, N)
    reps = np.empty((S, model.config.representation_dim), dtype=np.float32)
    for start in range(0, S, batch_size):
        stop = min(S, start + batch_size)
        reps[start:stop] = model.forward_probe(patches[start:stop], sig_labels[start:stop])
    return reps


def embed_segments(model: MultiViewModel, segments: list[Segment], batch_size: int = 256) -> np.ndarray:
    return embed_matrix(model, patch_matrix(segments, model.config.patch_len), batch_size)


def embed_corpus(
    model: MultiViewModel,
    segments: list[Segment],
    cache_dir: str | None = None,
    batch_size: int = 256,
) -> np.ndarray:
    """embed_segments with an on-disk cache keyed by the encoder checksum
    plus a corpus fingerprint; any mismatch falls through to recompute."""
    patches = patch_matrix(segments, model.config.patch_len)
    if cache_dir is None:
        return embed_matrix(model, patches, batch_size)
    ids = "\n".join(f"{s.source_record}:{s.start_offset}" for s in segments)
    checksum = model.checksum()
    h = hashlib.sha256()
    h.update(checksum.encode())
    h.update(ids.encode())
    h.update(np.ascontiguousarray(patches).tobytes())
    key = h.hexdigest()
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"emb_{key[:24]}.npz")
    if os.path.exists(path):
        with np.load(path, allow_pickle=False) as z:
            if str(z["key"]) == key and z["reps"].shape[0] == len(segments):
                logger.debug("embedding cache hit: %s", path)
                return z["reps"]
        logger.info("embedding cache stale, recomputing: %s", path)
    reps = embed_matrix(model, patches, batch_size)
    np.savez(path, reps=reps, key=np.str_(key))
    if model.checksum() != checksum:
        raise RuntimeError("encoder parameters changed during embedding")
    return reps


# ----------------------------------------------------------------- tasks


@dataclasses.dataclass(frozen=True)
class ProbeTask:
    """One evaluation task: a labels-CSV column plus split/run protocol."""

    name: str  # column in the labels CSV: 'abnormal' or 'near_delivery'
    test_fraction: float = 0.2
    n_runs: int = 5
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.test_fraction < 1.0):
            raise ValidationError(f"test_fraction must be in (0,1), got {self.test_fraction}")
        if self.n_runs < 1:
            raise ValidationError("n_runs must be >= 1")


@dataclasses.dataclass
class ProbeReport:
    task: str
    aucs: list[float]
    auc_mean: float
    auc_sd: float
    n_train: int
    n_test: int
    n_train_records: int
    n_test_records: int
    train_fraction: float = 1.0
    dropout_bin: str | None = None
    insufficient: bool = False

    def to_row(self) -> dict:
        return {
            "task": self.task,
            "auc_mean": self.auc_mean,
            "auc_sd": self.auc_sd,
            "aucs": list(self.aucs),
            "n_train": self.n_train,
            "n_test": self.n_test,
            "n_train_records": self.n_train_records,
            "n_test_records": self.n_test_records,
            "train_fraction": self.train_fraction,
            "dropout_bin": self.dropout_bin,
            "insufficient": self.insufficient,
        }


def _split_seed(task: ProbeTask) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(task.seed), zlib.crc32(task.name.encode())])


def split_by_record(record_ids, test_fraction: float, seed_seq) -> tuple[set, set]:
    """Deterministic 80/20-style split over unique record ids.

    Returns (train_ids, test_ids); both sides are non-empty.
    """
    uniq = sorted(set(record_ids))
    if len(uniq) < 2:
        raise ValidationError("need at least 2 records to split")
    rng = np.random.default_rng(seed_seq)
    order = list(rng.permutation(len(uniq)))
    n_test = min(len(uniq) - 1, max(1, int(round(test_fraction * len(uniq)))))
    test = {uniq[i] for i in order[:n_test]}
    train = {uniq[i] for i in order[n_test:]}
    return train, test


def split_masks(record_ids: list[str], task: ProbeTask) -> tuple[np.ndarray, np.ndarray]:
    train_ids, test_ids = split_by_record(record_ids, task.test_fraction, _split_seed(task))
    rid = np.asarray(record_ids)
    return np.isin(rid, sorted(train_ids)), np.isin(rid, sorted(test_ids))


def segment_labels(record_ids: list[str], labels_by_record: dict[str, dict], key: str) -> np.ndarray:
    """Per-segment labels inherited from the source record."""
    out = np.empty(len(record_ids), dtype=np.int64)
    for i, rid in enumerate(record_ids):
        if rid not in labels_by_record:
            raise ValidationError(f"record {rid!r} missing from labels file")
        if key not in labels_by_record[rid]:
            raise ValidationError(f"label column {key!r} missing for record {rid!r}")
        out[i] = int(labels_by_record[rid][key])
    return out


def _stratified_subsample(idx: np.ndarray, labels: np.ndarray, fraction: float, rng) -> np.ndarray:
    """Keep floor(fraction * n_class) of each class (at least 1), preserving
    determinism via the supplied rng."""
    keep = []
    for cls in (0, 1):
        cand = idx[labels[idx] == cls]
        if cand.size == 0:
            continue
        k = max(1, int(np.floor(fraction * cand.size)))
        keep.append(rng.choice(cand, size=k, replace=False))
    if not keep:
        raise ValidationError("empty training split after subsampling")
    return np.sort(np.concatenate(keep))


def run_probe(
    reps: np.ndarray,
    labels: np.ndarray,
    record_ids: list[str],
    task: ProbeTask,
    train_fraction: float = 1.0,
) -> ProbeReport:
    """The standard 5-run probe protocol on precomputed representations."""
    labels = check_binary_labels(labels, "labels")
    tr_mask, te_mask = split_masks(record_ids, task)
    tr_idx = np.flatnonzero(tr_mask)
    te_idx = np.flatnonzero(te_mask)
    if np.unique(labels[te_idx]).shape[0] < 2:
        raise ValidationError("degenerate task: test split has a single class")
    aucs = []
    for run in range(task.n_runs):
        run_ss = np.random.SeedSequence([int(task.seed), zlib.crc32(task.name.encode()), run])
        probe_seed, sub_seed = run_ss.spawn(2)
        idx = tr_idx
        if train_fraction < 1.0:
            idx = _stratified_subsample(
                tr_idx, labels, train_fraction, np.random.default_rng(sub_seed)
            )
        probe = LinearProbe(seed=int(probe_seed.generate_state(1)[0])).fit(reps[idx], labels[idx])
        aucs.append(auc(probe.decision_function(reps[te_idx]), labels[te_idx]))
    aucs_arr = np.asarray(aucs)
    return ProbeReport(
        task=task.name,
        aucs=[float(a) for a in aucs],
        auc_mean=float(aucs_arr.mean()),
        auc_sd=float(aucs_arr.std(ddof=1)) if len(aucs) > 1 else 0.0,
        n_train=int(tr_idx.size),
        n_test=int(te_idx.size),
        n_train_records=len({record_ids[i] for i in tr_idx}),
        n_test_records=len({record_ids[i] for i in te_idx}),
        train_fraction=float(train_fraction),
    )


def data_regime_sweep(
    reps: np.ndarray,
    labels: np.ndarray,
    record_ids: list[str],
    task: ProbeTask,
    fractions=SWEEP_FRACTIONS,
) -> list[ProbeReport]:
    """Probe at several train fractions; the test split never changes."""
    return [run_probe(reps, labels, record_ids, task, train_fraction=f) for f in fractions]


def pooled_feature_matrix(segments: list[Segment]) -> np.ndarray:
    """Comparator representation: per-segment mean over patches of the raw
    17-dim handcrafted features (the probe standardizes them)."""
    out = np.empty((len(segments), N_FEATURES), dtype=np.float64)
    for i, seg in enumerate(segments):
        out[i] = segment_features(seg).mean(axis=0)
    return out


def _bin_name(lo: float, hi: float) -> str:
    return f"{int(round(lo * 100))}-{int(round(hi * 100))}%"


def dropout_robustness(
    reps: np.ndarray,
    labels: np.ndarray,
    record_ids: list[str],
    missing_fraction: np.ndarray,
    task: ProbeTask,
    bins=DROPOUT_BINS,
) -> list[ProbeReport]:
    """Probe trained on the full train split; test AUC reported per
    missing-data bin. Bins with < MIN_BIN_CLASS_COUNT segments of either
    class are flagged insufficient (auc fields NaN)."""
    labels = check_binary_labels(labels, "labels")
    missing_fraction = np.asarray(missing_fraction, dtype=np.float64)
    tr_mask, te_mask = split_masks(record_ids, task)
    tr_idx = np.flatnonzero(tr_mask)
    te_idx = np.flatnonzero(te_mask)

    bin_members: list[np.ndarray] = []
    for b, (lo, hi) in enumerate(bins):
        mf = missing_fraction[te_idx]
        if b == 0:
            sel = mf <= hi
        else:
            sel = (mf > lo) & (mf <= hi)
        bin_members.append(te_idx[sel])

    per_bin_scores: list[list[np.ndarray]] = [[] for _ in bins]
    for run in range(task.n_runs):
        run_ss = np.random.SeedSequence(
            [int(task.seed), zlib.crc32(task.name.encode()), 7, run]
        )
        probe = LinearProbe(seed=int(run_ss.generate_state(1)[0])).fit(
            reps[tr_idx], labels[tr_idx]
        )
        for b, members in enumerate(bin_members):
            if members.size:
                per_bin_scores[b].append(probe.decision_function(reps[members]))

    reports = []
    for b, (lo, hi) in enumerate(bins):
        members = bin_members[b]
        counts = [int((labels[members] == c).sum()) for c in (0, 1)]
        insufficient = min(counts) < MIN_BIN_CLASS_COUNT if members.size else True
        if insufficient:
            reports.append(
                ProbeReport(
                    task=task.name,
                    aucs=[],
                    auc_mean=float("nan"),
                    auc_sd=float("nan"),
                    n_train=int(tr_idx.size),
                    n_test=int(members.size),
                    n_train_records=len({record_ids[i] for i in tr_idx}),
                    n_test_records=len({record_ids[i] for i in members}),
                    dropout_bin=_bin_name(lo, hi),
                    insufficient=True,
                )
            )
            continue
        aucs = [auc(scores, labels[members]) for scores in per_bin_scores[b]]
        arr = np.asarray(aucs)
        reports.append(
            ProbeReport(
                task=task.name,
                aucs=[float(a) for a in aucs],
                auc_mean=float(arr.mean()),
                auc_sd=float(arr.std(ddof=1)) if len(aucs) > 1 else 0.0,
                n_train=int(tr_idx.size),
                n_test=int(members.size),
                n_train_records=len({record_ids[i] for i in tr_idx}),
                n_test_records=len({record_ids[i] for i in members}),
                dropout_bin=_bin_name(lo, hi),
            )
        )
    return reports


# -------------------------------------------------------------- ablation


ABLATION_VARIANTS = (
    "full",
    "no_cnn",
    "no_label_embed",
    "no_multiview",
    "no_bestrq_mae",
    "no_uncertainty",
)

_VARIANT_FLAGS = {
    "full": {},
    "no_cnn": {"use_cnn": False},
    "no_label_embed": {"use_label_embed": False},
    "no_multiview": {"use_multiview": False},
    "no_bestrq_mae": {"use_bestrq_mae": False},
    "no_uncertainty": {"use_uncertainty_weighting": False},
}


def ablation_config(base: ModelConfig, variant: str) -> ModelConfig:
    if variant not in _VARIANT_FLAGS:
        raise ValidationError(f"unknown ablation variant {variant!r}")
    return dataclasses.replace(base, **_VARIANT_FLAGS[variant])


def ablation_matrix(
    train_segments: list[Segment],
    eval_segments: list[Segment],
    labels_by_record: dict[str, dict],
    base_config: ModelConfig,
    train_config,
    tasks: list[ProbeTask],
    variants=ABLATION_VARIANTS,
) -> list[dict]:
    """Pretrain one model per variant (identical seeds/steps), probe each on
    every task, and return per-(variant, task) rows plus a per-variant
    average. Heavyweight: one full pretraining run per variant."""
    from .pretrain import pretrain

    eval_rids = [s.source_record for s in eval_segments]
    rows = []
    for variant in variants:
        cfg = ablation_config(base_config, variant)
        logger.info("ablation: pretraining variant %s", variant)
        model, _ = pretrain(train_segments, cfg, train_config)
        reps = embed_segments(model, eval_segments)
        task_means = []
        for task in tasks:
            labels = segment_labels(eval_rids, labels_by_record, task.name)
            report = run_probe(reps, labels, eval_rids, task)
            task_means.append(report.auc_mean)
            rows.append(
                {
                    "variant": variant,
                    "task": task.name,
                    "auc_mean": report.auc_mean,
                    "auc_sd": report.auc_sd,
                    "n_train": report.n_train,
                    "n_test": report.n_test,
                }
            )
        rows.append(
            {
                "variant": variant,
                "task": "average",
                "auc_mean": float(np.mean(task_means)),
                "auc_sd": float(np.std(task_means, ddof=1)) if len(task_means) > 1 else 0.0,
                "n_train": rows[-1]["n_train"],
                "n_test": rows[-1]["n_test"],
            }
        )
    return rows
