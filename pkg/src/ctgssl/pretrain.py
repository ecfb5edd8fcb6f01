"""Masked multi-task pretraining.

One optimizer step: draw a batch of segments, draw a fresh random patch
mask per segment, run the encoder on visible patches only, and minimize
the uncertainty-weighted sum of the active pretext losses:

    L = sum_i exp(-s_i) * L_i + s_i        (i in {r, v, f})

where L_r is the masked-patch reconstruction MSE over valid samples, L_v
the metadata regression MSE in z-space, and L_f the per-patch feature-code
cross entropy. The s_i are trainable scalars (frozen at 0 when uncertainty
weighting is ablated); with the multi-view objectives disabled the loss is
plainly L_r.

Training is deterministic given TrainConfig.seed: a single PCG64 stream
drives batch selection and masking in a fixed order, and its serialized
state rides in every checkpoint so an interrupted run resumes bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import nn
from .features import N_FEATURES, segment_features
from .model import (
    ModelConfig,
    MultiViewModel,
    PretrainBatch,
    load_checkpoint,
    n_masked_patches,
    save_checkpoint,
)
from .signal_core import FHR_SCALE, Segment, patch_valid_mask, to_patches
from .validation import ValidationError

logger = logging.getLogger(__name__)

_TAG_TRAIN = 4


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 0
    snapshot_interval: int = 500

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValidationError("steps and batch_size must be positive")
        if not (0.0 < self.lr and 0.0 <= self.lr_min <= self.lr):
            raise ValidationError(f"need 0 < lr and lr_min <= lr, got {self.lr}, {self.lr_min}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValidationError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.clip_norm <= 0:
            raise ValidationError("weight_decay must be >= 0 and clip_norm > 0")
        if self.snapshot_interval < 1:
            raise ValidationError("snapshot_interval must be >= 1")


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient goes non-finite; carries the step and
    the offending batch's segment indices for reproduction."""

    def __init__(self, step: int, batch_indices, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step
        self.batch_indices = list(int(i) for i in batch_indices)


def cosine_lr(step: int, config: TrainConfig) -> float:
    """Learning rate for 0-indexed step; cosine from lr down to lr_min,
    hitting lr_min exactly on the final step."""
    total = max(1, config.steps - 1)
    t = min(step, total)
    return config.lr_min + 0.5 * (config.lr - config.lr_min) * (1.0 + np.cos(np.pi * t / total))


def sample_mask(n_patches: int, mask_ratio: float, rng: np.random.Generator):
    """Random disjoint (masked, visible) index sets, each sorted, both
    non-empty."""
    n_m = n_masked_patches(n_patches, mask_ratio)
    perm = rng.permutation(n_patches)
    return np.sort(perm[:n_m]), np.sort(perm[n_m:])


# ---------------------------------------------------------------- losses


def masked_reconstruction_loss(
    recon: nn.Tensor, targets: np.ndarray, valid: np.ndarray, mask_idx: np.ndarray
) -> nn.Tensor:
    """MSE over masked patches only, restricted to originally-valid samples.

    The predictions at visible positions are never gathered, so they do not
    enter the graph at all; the denominator is the number of contributing
    scalar elements.
    """
    if mask_idx.size == 0:
        raise ValidationError("masked set is empty")
    pred_m = nn.gather_rows(recon, mask_idx)
    tgt_m = np.take_along_axis(targets, mask_idx[:, :, None], axis=1)
    w = np.take_along_axis(valid, mask_idx[:, :, None], axis=1).astype(recon.dtype)
    count = float(w.sum())
    diff = nn.mul(nn.sub(pred_m, tgt_m), w)
    return nn.mul(nn.sum_(nn.mul(diff, diff)), 1.0 / max(count, 1.0))


def metadata_loss(pred: nn.Tensor, meta_z: np.ndarray) -> nn.Tensor:
    d = nn.sub(pred, meta_z)
    return nn.mean_(nn.mul(d, d))


def feature_loss(logits: nn.Tensor, feat_labels: np.ndarray, vis_idx: np.ndarray) -> nn.Tensor:
    """Cross entropy of per-visible-patch feature codes."""
    B, n_vis, V = logits.shape
    lab = np.take_along_axis(feat_labels, vis_idx, axis=1).reshape(-1)
    return nn.cross_entropy_mean(nn.reshape(logits, (B * n_vis, V)), lab)


def combined_loss(
    model: MultiViewModel, lv: dict, outputs: dict, batch: PretrainBatch
) -> tuple[nn.Tensor, dict]:
    """Uncertainty-weighted total plus float part values for logging."""
    cfg = model.config
    parts: dict[str, float] = {}
    terms: list[tuple[str, nn.Tensor]] = []
    if cfg.use_bestrq_mae:
        l_r = masked_reconstruction_loss(outputs["recon"], batch.patches, batch.valid, batch.mask_idx)
        parts["loss_recon"] = float(l_r.data)
        terms.append(("r", l_r))
    if cfg.use_multiview:
        l_v = metadata_loss(outputs["meta"], batch.meta_z)
        l_f = feature_loss(outputs["feat_logits"], batch.feat_labels, batch.vis_idx)
        parts["loss_meta"] = float(l_v.data)
        parts["loss_feat"] = float(l_f.data)
        terms.append(("v", l_v))
        terms.append(("f", l_f))

    if not cfg.use_multiview:
        total = terms[0][1]
    else:
        total = None
        for name, term in terms:
            s = lv[f"loss.s_{name}"]
            parts[f"s_{name}"] = float(s.data)
            weighted = nn.add(nn.mul(nn.exp(nn.neg(s)), term), s)
            total = weighted if total is None else nn.add(total, weighted)
    parts["loss_total"] = float(total.data)
    return total, parts


# ------------------------------------------------------------- optimizer


class AdamW:
    """Adam with decoupled weight decay applied to matrix-shaped
    parameters only (biases, gains, tokens and scalars are not decayed)."""

    def __init__(self, params: dict[str, nn.Param], config: TrainConfig):
        self.params = params
        self.config = config
        self.t = 0
        self.m = {
            name: np.zeros_like(p.value)
            for name, p in params.items()
            if p.trainable
        }
        self.v = {name: np.zeros_like(arr) for name, arr in self.m.items()}

    def step(self, lr: float) -> None:
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name in sorted(self.m):
            p = self.params[name]
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            if p.value.ndim >= 2 and c.weight_decay > 0:
                update = update + c.weight_decay * p.value
            p.value -= np.asarray(lr * update, dtype=p.value.dtype)

    def state(self) -> dict:
        return {"opt_m": self.m, "opt_v": self.v, "t": self.t}

    def load_state(self, opt_m: dict, opt_v: dict, t: int) -> None:
        for name in self.m:
            if name not in opt_m or opt_m[name].shape != self.m[name].shape:
                raise ValidationError(f"optimizer state missing or misshaped for {name}")
            self.m[name][...] = opt_m[name]
            self.v[name][...] = opt_v[name]
        self.t = int(t)


def clip_gradients(params: dict[str, nn.Param], clip_norm: float) -> float:
    """Global-norm clipping in place; returns the pre-clip norm."""
    norm = nn.global_grad_norm(params)
    if norm > clip_norm and norm > 0:
        scale = clip_norm / norm
        for p in params.values():
            if p.trainable:
                p.grad *= scale
    return norm


# ------------------------------------------------------- data preparation


@dataclasses.dataclass
class TrainingData:
    """Per-segment tensors precomputed once so the step loop never touches
    feature extraction or quantization."""

    patches: np.ndarray  # (S, N, patch_dim) float32
    valid: np.ndarray  # (S, N, patch_dim) bool
    sig_labels: np.ndarray  # (S, N) int64
    feat_labels: np.ndarray  # (S, N) int64
    meta_z: np.ndarray  # (S, 3) float32
    record_ids: list[str]
    segment_ids: list[str]
    missing_fraction: np.ndarray  # (S,)

    @property
    def n_segments(self) -> int:
        return self.patches.shape[0]


def prepare_training_data(
    segments: list[Segment], model: MultiViewModel, refit_stats: bool = True
) -> TrainingData:
    """Quantize labels and z-score targets for a corpus of normalized
    segments, fitting corpus statistics into the model unless it already
    carries them (resume path)."""
    if not segments:
        raise ValidationError("no segments to train on")
    for s in segments:
        if not s.normalized:
            raise ValidationError("segments must be normalized before training")

    S = len(segments)
    N = model.config.n_patches
    pd = model.config.patch_dim
    patches = np.empty((S, N, pd), dtype=np.float32)
    valid = np.empty((S, N, pd), dtype=bool)
    feats = np.empty((S, N, N_FEATURES), dtype=np.float64)
    meta_raw = np.empty((S, 3), dtype=np.float64)
    for i, seg in enumerate(segments):
        grid = to_patches(seg, patch_len=model.config.patch_len)
        patches[i] = grid.patches.astype(np.float32)
        valid[i] = patch_valid_mask(seg, patch_len=model.config.patch_len)
        feats[i] = segment_features(seg, patch_len=model.config.patch_len)
        meta_raw[i] = seg.metadata.as_array()

    if refit_stats or model.feature_stats is None:
        from .features import FeatureStandardizer

        model.feature_stats = FeatureStandardizer().fit(feats.reshape(S * N, -1))
        model.meta_mean = meta_raw.mean(axis=0)
        std = meta_raw.std(axis=0)
        model.meta_std = np.where(std < 1e-8, 1.0, std)

    feat_z = model.feature_stats.transform(feats.reshape(S * N, -1))
    feat_labels = model.feat_quantizer.transform(feat_z).reshape(S, N)
    sig_labels = model.sig_quantizer.transform(
        patches.reshape(S * N, pd).astype(np.float64)
    ).reshape(S, N)
    meta_z = ((meta_raw - model.meta_mean) / model.meta_std).astype(np.float32)

    return TrainingData(
        patches=patches,
        valid=valid,
        sig_labels=sig_labels.astype(np.int64),
        feat_labels=feat_labels.astype(np.int64),
        meta_z=meta_z,
        record_ids=[s.source_record for s in segments],
        segment_ids=[f"{s.source_record}:{s.start_offset}" for s in segments],
        missing_fraction=np.array([s.missing_fraction for s in segments]),
    )


def make_batch(data: TrainingData, idx: np.ndarray, config: ModelConfig, rng) -> PretrainBatch:
    B = idx.shape[0]
    n_m = n_masked_patches(config.n_patches, config.mask_ratio)
    mask_idx = np.empty((B, n_m), dtype=np.int64)
    vis_idx = np.empty((B, config.n_patches - n_m), dtype=np.int64)
    for row in range(B):
        mask_idx[row], vis_idx[row] = sample_mask(config.n_patches, config.mask_ratio, rng)
    return PretrainBatch(
        patches=data.patches[idx],
        valid=data.valid[idx],
        sig_labels=data.sig_labels[idx],
        feat_labels=data.feat_labels[idx],
        meta_z=data.meta_z[idx],
        vis_idx=vis_idx,
        mask_idx=mask_idx,
    )


# ---------------------------------------------------------- training loop


def _masked_fhr_rmse_bpm(recon: np.ndarray, batch: PretrainBatch, patch_len: int) -> float:
    """Diagnostic: reconstruction RMSE on masked valid FHR samples, in bpm."""
    pred = np.take_along_axis(recon, batch.mask_idx[:, :, None], axis=1)[:, :, :patch_len]
    tgt = np.take_along_axis(batch.patches, batch.mask_idx[:, :, None], axis=1)[:, :, :patch_len]
    w = np.take_along_axis(batch.valid, batch.mask_idx[:, :, None], axis=1)[:, :, :patch_len]
    if not w.any():
        return float("nan")
    d = (pred - tgt)[w]
    return float(np.sqrt(np.mean(d * d)) * FHR_SCALE)


def pretrain(
    segments_or_data,
    model_config: ModelConfig | None = None,
    train_config: TrainConfig = TrainConfig(),
    out_dir: str | None = None,
    resume_from: str | None = None,
    model_seed: int | None = None,
    log_every: int = 50,
) -> tuple[MultiViewModel, list[dict]]:
    """Run (or resume) a full pretraining job.

    segments_or_data is either a list of normalized Segments or an already
    prepared TrainingData paired with a model via resume. Returns the
    trained model and the per-step metric rows. When out_dir is given,
    writes metrics.ndjson, periodic checkpoints/step{N}.ckpt snapshots and
    a final model.ckpt (which embeds the trainer state, so it can itself
    be resumed if more steps are requested later).
    """
    if resume_from is not None:
        model, tstate = load_checkpoint(resume_from)
        if tstate is None:
            raise ValidationError(f"{resume_from}: checkpoint has no trainer state to resume")
        if model_config is not None and model_config != model.config:
            raise ValidationError("resume config does not match checkpoint config")
        start_step = int(tstate["step"])
        if start_step >= train_config.steps:
            raise ValidationError(
                f"checkpoint already at step {start_step} >= steps {train_config.steps}"
            )
    else:
        if model_config is None:
            raise ValidationError("model_config is required unless resuming")
        model = MultiViewModel(
            model_config, seed=train_config.seed if model_seed is None else model_seed
        )
        tstate = None
        start_step = 0

    if isinstance(segments_or_data, TrainingData):
        data = segments_or_data
    else:
        data = prepare_training_data(segments_or_data, model, refit_stats=tstate is None)

    cfg = model.config
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([int(train_config.seed), _TAG_TRAIN]))
    )
    optimizer = AdamW(model.params, train_config)
    if tstate is not None:
        rng.bit_generator.state = tstate["rng_state"]
        optimizer.load_state(tstate["opt_m"], tstate["opt_v"], start_step)

    metrics: list[dict] = []
    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
        metrics_fh = open(
            os.path.join(out_dir, "metrics.ndjson"), "a" if start_step > 0 else "w"
        )

    def save(path: str, step: int) -> None:
        save_checkpoint(
            path,
            model,
            trainer_state={
                "step": step,
                "rng_state": rng.bit_generator.state,
                "opt_m": optimizer.m,
                "opt_v": optimizer.v,
            },
        )

    try:
        for step in range(start_step, train_config.steps):
            lr = cosine_lr(step, train_config)
            idx = rng.integers(0, data.n_segments, size=train_config.batch_size)
            batch = make_batch(data, idx, cfg, rng)
            lv = model.leaves()
            outputs = model.forward_pretrain(lv, batch)
            total, parts = combined_loss(model, lv, outputs, batch)
            if not np.isfinite(parts["loss_total"]):
                detail = json.dumps(parts)
                if out_dir is not None:
                    with open(os.path.join(out_dir, "divergence.json"), "w") as fh:
                        json.dump({"step": step, "parts": parts, "batch": idx.tolist()}, fh)
                raise TrainingDiverged(step, idx, detail)
            total.backward()
            nn.collect_grads(model.params, lv)
            grad_norm = clip_gradients(model.params, train_config.clip_norm)
            if not np.isfinite(grad_norm):
                raise TrainingDiverged(step, idx, f"gradient norm {grad_norm}")
            optimizer.step(lr)

            row = {"step": step + 1, "lr": lr, "grad_norm": grad_norm}
            row.update(parts)
            if cfg.use_bestrq_mae:
                row["fhr_rmse_bpm"] = _masked_fhr_rmse_bpm(
                    outputs["recon"].data, batch, cfg.patch_len
                )
            metrics.append(row)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(row) + "\n")
            if (step + 1) % log_every == 0 or step + 1 == train_config.steps:
                logger.info(
                    "step %d/%d loss %.4f grad %.3f lr %.2e",
                    step + 1,
                    train_config.steps,
                    parts["loss_total"],
                    grad_norm,
                    lr,
                )
            if out_dir is not None and (step + 1) % train_config.snapshot_interval == 0:
                snap = os.path.join(out_dir, "checkpoints", f"step{step + 1:06d}.ckpt")
                save(snap, step + 1)
                metrics_fh.flush()
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if out_dir is not None:
        save(os.path.join(out_dir, "model.ckpt"), train_config.steps)
    return model, metrics


# ------------------------------------------------------------- estimator


class CtgPretrainer(BaseEstimator, TransformerMixin):
    """sklearn-style wrapper: fit() pretrains on normalized segments,
    transform() embeds segments with the frozen encoder."""

    def __init__(
        self,
        model_config: ModelConfig | None = None,
        train_config: TrainConfig | None = None,
        out_dir: str | None = None,
    ):
        self.model_config = model_config
        self.train_config = train_config
        self.out_dir = out_dir

    def fit(self, X, y=None):
        model_config = self.model_config or ModelConfig()
        train_config = self.train_config or TrainConfig()
        self.model_, self.metrics_ = pretrain(
            X, model_config, train_config, out_dir=self.out_dir
        )
        return self

    def transform(self, X) -> np.ndarray:
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "model_")
        from .probe_eval import embed_segments

        return embed_segments(self.model_, X)
