"""Fast invariant battery behind the `selfcheck` CLI command.

Each check is a scaled-down version of an acceptance property (gradient
correctness, isolation exactness, quantizer contracts, masked-loss
locality, AUC/feature oracles, uncertainty stationarity) sized to finish
in well under a minute. Returns (name, ok, detail) triples; the CLI turns
any failure into a nonzero exit.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .features import extract_features
from .model import ModelConfig, MultiViewModel, PretrainBatch
from .pretrain import TrainConfig, combined_loss, pretrain, sample_mask
from .probe_eval import auc
from .quantizer import build_quantizer
from .signal_core import FHR_FALLBACK, UA_FALLBACK

TINY_CONFIG = ModelConfig(
    embed_dim=8,
    enc_layers=1,
    dec_layers=1,
    heads=2,
    mlp_ratio=2,
    n_patches=4,
    patch_len=6,
    cnn_channels=4,
    cnn_blocks=1,
    sig_codebook_size=8,
    sig_latent_dim=4,
    feat_codebook_size=8,
    feat_latent_dim=4,
)


def random_batch(model: MultiViewModel, batch_size: int, rng: np.random.Generator, dtype=np.float64) -> PretrainBatch:
    """Random but well-formed pretraining inputs for property checks."""
    cfg = model.config
    B, N, pd = batch_size, cfg.n_patches, cfg.patch_dim
    n_m = cfg.n_masked
    mask_idx = np.empty((B, n_m), dtype=np.int64)
    vis_idx = np.empty((B, N - n_m), dtype=np.int64)
    for b in range(B):
        mask_idx[b], vis_idx[b] = sample_mask(N, cfg.mask_ratio, rng)
    return PretrainBatch(
        patches=rng.normal(0, 1, (B, N, pd)).astype(dtype),
        valid=rng.random((B, N, pd)) < 0.8,
        sig_labels=rng.integers(0, cfg.sig_codebook_size, (B, N)),
        feat_labels=rng.integers(0, cfg.feat_codebook_size, (B, N)),
        meta_z=rng.normal(0, 1, (B, 3)).astype(dtype),
        vis_idx=vis_idx,
        mask_idx=mask_idx,
    )


def pretrain_loss_fn(model: MultiViewModel, batch: PretrainBatch):
    def fn(leaves):
        outputs = model.forward_pretrain(leaves, batch)
        total, _ = combined_loss(model, leaves, outputs, batch)
        return total

    return fn


def gradient_check(config: ModelConfig = TINY_CONFIG, seed: int = 0, sample_fraction: float = 0.02) -> float:
    """Finite-difference check of the full pretraining loss in float64."""
    model = MultiViewModel(config, seed=seed)
    params64 = nn.params_astype(model.params, np.float64)
    rng = np.random.default_rng(seed + 1)
    batch = random_batch(model, 2, rng, dtype=np.float64)
    return nn.check_gradients(
        pretrain_loss_fn(model, batch),
        params64,
        epsilon=(1e-5, 1e-4),
        sample_fraction=sample_fraction,
        rng=np.random.default_rng(seed + 2),
    )


def isolation_trial(config: ModelConfig, seed: int, trial: int) -> bool:
    """Perturb one initial task token; the other CLS outputs and all patch
    outputs before cross-attention must be bit-identical."""
    model = MultiViewModel(config, seed=seed + trial)
    rng = np.random.default_rng(1000 + trial)
    B, N = 2, config.n_patches
    patches = rng.normal(0, 1, (B, N, config.patch_dim)).astype(np.float32)
    sig_labels = rng.integers(0, config.sig_codebook_size, (B, N))

    def run() -> tuple[np.ndarray, np.ndarray]:
        lv = model.leaves(with_grad=False)
        h = model.embed_patches(lv, patches)
        fused = model.fuse_tokens(lv, h, sig_labels)
        cls, patch_out = model.encode(lv, fused)
        return cls.data.copy(), patch_out.data.copy()

    base_cls, base_patch = run()
    task = ("cls.r", "cls.v", "cls.f")[trial % 3]
    keep = model.params[task].value.copy()
    model.params[task].value += rng.normal(0.5, 0.2, keep.shape).astype(np.float32)
    pert_cls, pert_patch = run()
    model.params[task].value[...] = keep

    t_idx = trial % 3
    others = [i for i in range(3) if i != t_idx]
    ok = np.array_equal(base_patch, pert_patch)
    for i in others:
        ok = ok and np.array_equal(base_cls[:, i], pert_cls[:, i])
    # sanity: the perturbed token's own output must actually change
    ok = ok and not np.array_equal(base_cls[:, t_idx], pert_cls[:, t_idx])
    return ok


def locality_trial(config: ModelConfig, seed: int, trial: int) -> bool:
    """Randomizing decoder predictions at visible patches must leave the
    reconstruction loss exactly unchanged."""
    from .pretrain import masked_reconstruction_loss

    model = MultiViewModel(config, seed=seed)
    rng = np.random.default_rng(2000 + trial)
    batch = random_batch(model, 2, rng, dtype=np.float32)
    lv = model.leaves(with_grad=False)
    recon = model.forward_pretrain(lv, batch)["recon"].data
    loss_a = float(
        masked_reconstruction_loss(nn.Tensor(recon), batch.patches, batch.valid, batch.mask_idx).data
    )
    tampered = recon.copy()
    binds = np.arange(tampered.shape[0])[:, None]
    tampered[binds, batch.vis_idx] = rng.normal(0, 10, tampered[binds, batch.vis_idx].shape).astype(
        np.float32
    )
    loss_b = float(
        masked_reconstruction_loss(nn.Tensor(tampered), batch.patches, batch.valid, batch.mask_idx).data
    )
    return loss_a == loss_b


def quantizer_checks(n_vectors: int = 200, seed: int = 0) -> tuple[bool, str]:
    q = build_quantizer(d_in=12, d_lat=4, codebook_size=16, seed=seed)
    rng = np.random.default_rng(seed + 1)
    X = rng.normal(0, 1, (n_vectors, 12))
    base = q.transform(X)
    scales = rng.uniform(0.1, 10.0, (n_vectors, 1))
    if not np.array_equal(base, q.transform(X * scales)):
        return False, "positive-scale invariance violated"
    # brute-force nearest-neighbour oracle
    for i in range(n_vectors):
        z = X[i] @ q.projection_
        norm = np.sqrt(float((z * z).sum()))
        u = z / norm if norm > 0 else np.zeros_like(z)
        best, best_d = 0, float("inf")
        for v in range(q.codebook_size):
            d = float(((u - q.codebook_[v]) ** 2).sum())
            if d < best_d:
                best, best_d = v, d
        if best != base[i]:
            return False, f"oracle disagreement at vector {i}"
    if q.projection_.flags.writeable or q.codebook_.flags.writeable:
        return False, "quantizer arrays are writable"
    return True, f"{n_vectors} vectors agree"


def auc_oracle_check(n_instances: int = 50, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(10, 40))
        scores = np.round(rng.normal(0, 1, n), 1)  # coarse grid forces ties
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        fast = auc(scores, labels)
        pos = scores[labels == 1]
        neg = scores[labels == 0]
        wins = ties = 0
        for sp in pos:
            for sn in neg:
                if sp > sn:
                    wins += 1
                elif sp == sn:
                    ties += 1
        slow = (wins + 0.5 * ties) / (len(pos) * len(neg))
        worst = max(worst, abs(fast - slow))
    return worst < 1e-12, f"max |fast-slow| = {worst:.2e}"


def feature_spot_checks() -> tuple[bool, str]:
    P = 60
    valid = np.ones((P, 2), dtype=bool)
    const = np.empty((P, 2))
    const[:, 0] = 140.0
    const[:, 1] = 20.0
    f = extract_features(const, valid)
    expect = np.zeros(17)
    expect[0] = expect[2] = expect[3] = 140.0
    expect[12] = expect[14] = 20.0
    if not np.allclose(f, expect, atol=1e-12):
        return False, "constant-signal vector mismatch"
    ramp = np.empty((P, 2))
    ramp[:, 0] = 100.0 + np.arange(P)
    ramp[:, 1] = 20.0
    f = extract_features(ramp, valid)
    if not (abs(f[5] - 1.0) < 1e-9 and abs(f[8] - 60.0) < 1e-9 and abs(f[4] - 59.0) < 1e-9):
        return False, "ramp STV/slope/range mismatch"
    none_valid = np.zeros((P, 2), dtype=bool)
    f = extract_features(const, none_valid)
    if not (f[0] == FHR_FALLBACK and f[12] == UA_FALLBACK and f[11] == 1.0):
        return False, "fallback vector mismatch"
    return True, "constant/ramp/fallback cases match"


def stationarity_check() -> tuple[bool, str]:
    """Minimize sum_i exp(-s_i) L_i + s_i over s alone, L = (1, 100, 1)."""
    fixed = np.array([1.0, 100.0, 1.0])
    s = nn.Param.create("s", np.zeros(3))
    for _ in range(3000):
        lv = {"s": nn.Tensor(s.value, requires_grad=True)}
        total = nn.sum_(nn.add(nn.mul(nn.exp(nn.neg(lv["s"])), fixed), lv["s"]))
        total.backward()
        nn.collect_grads({"s": s}, lv)
        s.value -= 0.01 * s.grad
    target = np.array([0.0, np.log(100.0), 0.0])
    err = np.abs(s.value - target).max()
    return err < 0.05, f"max |s - ln L| = {err:.4f}"


def frozenness_check(seed: int = 0) -> tuple[bool, str]:
    """Quantizer bytes identical across a short training run."""
    rng = np.random.default_rng(seed)
    from .signal_core import Metadata, Segment, normalize

    segments = []
    for i in range(8):
        vals = np.empty((TINY_CONFIG.n_patches * TINY_CONFIG.patch_len, 2))
        vals[:, 0] = 130 + 10 * rng.standard_normal(vals.shape[0])
        vals[:, 1] = np.clip(25 + 10 * rng.standard_normal(vals.shape[0]), 0, 100)
        seg = Segment(
            values=vals,
            valid=np.ones(vals.shape, dtype=bool),
            missing_fraction=0.0,
            metadata=Metadata(30.0, float(3 + i), 30.0),
            source_record=f"r{i}",
            start_offset=0,
        )
        segments.append(normalize(seg))
    model, _ = pretrain(
        segments,
        TINY_CONFIG,
        TrainConfig(steps=5, batch_size=4, snapshot_interval=5, seed=seed),
    )
    fresh = MultiViewModel(TINY_CONFIG, seed=seed)
    same = all(
        np.array_equal(model.params[k].value, fresh.params[k].value)
        for k in model.params
        if k.startswith(("sig_q.", "feat_q.", "pos."))
    )
    return same, "frozen arrays byte-identical after training"


def run_selfcheck() -> list[tuple[str, bool, str]]:
    results: list[tuple[str, bool, str]] = []

    worst = gradient_check()
    results.append(("gradient_check", worst < 1e-4, f"max rel err {worst:.2e}"))

    iso_ok = all(isolation_trial(TINY_CONFIG, seed=10, trial=t) for t in range(6))
    results.append(("isolation_mask", iso_ok, "6 perturbation trials"))

    loc_ok = all(locality_trial(TINY_CONFIG, seed=20, trial=t) for t in range(5))
    results.append(("masked_loss_locality", loc_ok, "5 tamper trials"))

    ok, detail = quantizer_checks()
    results.append(("quantizer_contracts", ok, detail))

    ok, detail = frozenness_check()
    results.append(("quantizer_frozen_in_training", ok, detail))

    ok, detail = auc_oracle_check()
    results.append(("auc_oracle", ok, detail))

    ok, detail = feature_spot_checks()
    results.append(("feature_oracle", ok, detail))

    ok, detail = stationarity_check()
    results.append(("uncertainty_stationarity", ok, detail))
    return results
