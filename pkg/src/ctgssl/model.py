"""Three-task-token transformer with isolation masking.

The encoder consumes patch tokens (optionally CNN-derived) fused with
frozen positional and learned discrete-label embeddings, plus one CLS token
per pretext task (reconstruction r, metadata regression v, feature
classification f). The isolation mask lets each CLS attend only to itself
and to the patch tokens, and lets patch tokens attend only to each other,
so the three task summaries cannot leak into one another inside the
encoder; they are mixed only afterwards by per-task CLS cross-attention.

During pretraining the encoder sees only the visible patches; the gated
decoder rebuilds the full sequence from encoded patches, mask tokens,
positions and per-patch quantizer-label embeddings, queries the
reconstruction CLS, and predicts raw patch values. During probing all
patches are visible and the concatenated cross-attended CLS embeddings
form the segment representation.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json

import numpy as np

from . import nn
from .features import N_FEATURES, FeatureStandardizer
from .quantizer import RandomProjectionQuantizer, build_quantizer
from .signal_core import N_CHANNELS, N_PATCHES, PATCH_SECONDS
from .validation import ValidationError, check_positive_int

CHECKPOINT_FORMAT_VERSION = 1

# sub-seed tags so each random concern gets an independent stream
_TAG_INIT = 1
_TAG_SIG_QUANTIZER = 2
_TAG_FEAT_QUANTIZER = 3

TASK_NAMES = ("r", "v", "f")


def derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(tag)]).generate_state(1, np.uint64)[0] >> 1)


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    enc_layers: int = 4
    dec_layers: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    n_patches: int = N_PATCHES
    patch_len: int = PATCH_SECONDS
    mask_ratio: float = 0.5
    cnn_channels: int = 16
    cnn_blocks: int = 2
    cnn_kernel: int = 5
    sig_codebook_size: int = 256
    sig_latent_dim: int = 16
    feat_codebook_size: int = 64
    feat_latent_dim: int = 8
    n_metadata: int = 3
    use_cnn: bool = True
    use_label_embed: bool = True
    use_multiview: bool = True
    use_bestrq_mae: bool = True
    use_uncertainty_weighting: bool = True

    def __post_init__(self):
        for field in (
            "embed_dim",
            "enc_layers",
            "dec_layers",
            "heads",
            "mlp_ratio",
            "n_patches",
            "patch_len",
            "cnn_channels",
            "cnn_blocks",
            "cnn_kernel",
            "sig_codebook_size",
            "sig_latent_dim",
            "feat_codebook_size",
            "feat_latent_dim",
        ):
            check_positive_int(getattr(self, field), field)
        if self.embed_dim % self.heads != 0:
            raise ValidationError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if not (0.0 < self.mask_ratio < 1.0):
            raise ValidationError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if self.n_patches < 2:
            raise ValidationError("need at least 2 patches so both mask sets are non-empty")
        if self.n_metadata != 3:
            raise ValidationError("the metadata head predicts exactly 3 targets")
        if not (self.use_bestrq_mae or self.use_multiview):
            raise ValidationError("at least one pretext objective must be enabled")

    @property
    def patch_dim(self) -> int:
        return N_CHANNELS * self.patch_len

    @property
    def n_cls(self) -> int:
        return 3 if self.use_multiview else 1

    @property
    def n_masked(self) -> int:
        return min(self.n_patches - 1, max(1, int(round(self.n_patches * self.mask_ratio))))

    @property
    def representation_dim(self) -> int:
        return self.n_cls * self.embed_dim


def n_masked_patches(n_patches: int, mask_ratio: float) -> int:
    """round(N * ratio) clamped so both masked and visible sets are non-empty."""
    return min(n_patches - 1, max(1, int(round(n_patches * mask_ratio))))


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Fixed sin/cos positional table, (n, d)."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def build_isolation_mask(n_visible: int, n_cls: int = 3) -> np.ndarray:
    """Boolean attention mask (T, T), T = n_cls + n_visible.

    Each CLS row may attend to itself and to every patch column; patch rows
    attend only to patch columns. CLS tokens never see each other, so each
    task summary is computed independently inside the encoder.
    """
    if n_visible < 1:
        raise ValidationError("isolation mask needs at least one visible patch")
    t = n_cls + n_visible
    mask = np.zeros((t, t), dtype=bool)
    mask[:, n_cls:] = True
    mask[np.arange(n_cls), np.arange(n_cls)] = True
    return mask


@dataclasses.dataclass
class PretrainBatch:
    """Everything one pretraining step consumes, all plain arrays.

    patches/valid are in the channel-major per-patch layout; meta_z holds
    z-scored metadata targets; vis_idx/mask_idx are sorted and disjoint.
    """

    patches: np.ndarray  # (B, N, patch_dim) float32, normalized units
    valid: np.ndarray  # (B, N, patch_dim) bool
    sig_labels: np.ndarray  # (B, N) int
    feat_labels: np.ndarray  # (B, N) int
    meta_z: np.ndarray  # (B, 3) float32
    vis_idx: np.ndarray  # (B, n_vis) int
    mask_idx: np.ndarray  # (B, n_mask) int


class MultiViewModel:
    """Model = frozen quantizers + named parameters + pure forward ops.

    All forward methods take the leaf-tensor dict for the current pass so
    the same code serves training (with tape) and inference (tape-free).
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        self.sig_quantizer_seed = derive_seed(seed, _TAG_SIG_QUANTIZER)
        self.feat_quantizer_seed = derive_seed(seed, _TAG_FEAT_QUANTIZER)
        self.sig_quantizer = build_quantizer(
            d_in=config.patch_dim,
            d_lat=config.sig_latent_dim,
            codebook_size=config.sig_codebook_size,
            seed=self.sig_quantizer_seed,
        )
        self.feat_quantizer = build_quantizer(
            d_in=N_FEATURES,
            d_lat=config.feat_latent_dim,
            codebook_size=config.feat_codebook_size,
            seed=self.feat_quantizer_seed,
        )
        self.params = self._build_params()
        # corpus statistics, fitted by the trainer and carried in checkpoints
        self.meta_mean: np.ndarray | None = None
        self.meta_std: np.ndarray | None = None
        self.feature_stats: FeatureStandardizer | None = None

    # ------------------------------------------------------------ building

    def _build_params(self) -> dict[str, nn.Param]:
        cfg = self.config
        rng = np.random.default_rng(derive_seed(self.seed, _TAG_INIT))
        params: dict[str, nn.Param] = {}

        def lin(fan_in: int, shape) -> np.ndarray:
            return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape).astype(np.float32)

        def small(shape) -> np.ndarray:
            return rng.normal(0.0, 0.02, size=shape).astype(np.float32)

        def addp(name: str, value: np.ndarray, trainable: bool = True):
            params[name] = nn.Param.create(name, value, trainable=trainable)

        def add_ln(prefix: str, dim: int):
            addp(f"{prefix}.g", np.ones(dim, dtype=np.float32))
            addp(f"{prefix}.b", np.zeros(dim, dtype=np.float32))

        def add_attn(prefix: str, dim: int):
            # no key bias: it cancels inside the softmax (see nn.multi_head_attention)
            for w, b in (("wq", "bq"), ("wk", None), ("wv", "bv"), ("wo", "bo")):
                addp(f"{prefix}.{w}", lin(dim, (dim, dim)))
                if b is not None:
                    addp(f"{prefix}.{b}", np.zeros(dim, dtype=np.float32))

        def add_block(prefix: str, dim: int):
            add_ln(f"{prefix}.ln1", dim)
            add_attn(f"{prefix}.attn", dim)
            add_ln(f"{prefix}.ln2", dim)
            hidden = dim * cfg.mlp_ratio
            addp(f"{prefix}.mlp.w1", lin(dim, (dim, hidden)))
            addp(f"{prefix}.mlp.b1", np.zeros(hidden, dtype=np.float32))
            addp(f"{prefix}.mlp.w2", lin(hidden, (hidden, dim)))
            addp(f"{prefix}.mlp.b2", np.zeros(dim, dtype=np.float32))

        D = cfg.embed_dim
        if cfg.use_cnn:
            c = cfg.cnn_channels
            k = cfg.cnn_kernel
            for b in range(cfg.cnn_blocks):
                cin = N_CHANNELS if b == 0 else c
                pre = f"cnn.b{b}"
                addp(f"{pre}.conv1_w", lin(k * cin, (k, cin, c)))
                addp(f"{pre}.conv1_b", np.zeros(c, dtype=np.float32))
                add_ln(f"{pre}.ln", c)
                addp(f"{pre}.conv2_w", lin(k * c, (k, c, c)))
                addp(f"{pre}.conv2_b", np.zeros(c, dtype=np.float32))
                if cin != c:
                    addp(f"{pre}.proj_w", lin(cin, (cin, c)))
                    addp(f"{pre}.proj_b", np.zeros(c, dtype=np.float32))
            patch_in = cfg.patch_len * c
        else:
            patch_in = cfg.patch_dim
        addp("patch.proj.w", lin(patch_in, (patch_in, D)))
        addp("patch.proj.b", np.zeros(D, dtype=np.float32))

        addp(
            "pos.table",
            sinusoidal_positions(cfg.n_patches, D).astype(np.float32),
            trainable=False,
        )
        if cfg.use_label_embed:
            addp("label_embed.table", small((cfg.sig_codebook_size, D)))

        addp("cls.r", small((D,)))
        if cfg.use_multiview:
            addp("cls.v", small((D,)))
            addp("cls.f", small((D,)))

        for layer in range(cfg.enc_layers):
            add_block(f"enc.{layer}", D)
        add_ln("enc.norm", D)

        if cfg.use_multiview:
            for t in TASK_NAMES:
                add_ln(f"xattn.{t}.ln", D)
                add_attn(f"xattn.{t}.attn", D)

        if cfg.use_bestrq_mae:
            addp("dec.inproj.w", lin(D, (D, D)))
            addp("dec.inproj.b", np.zeros(D, dtype=np.float32))
            addp("dec.mask_token", small((D,)))
            if cfg.use_label_embed:
                addp("dec.gate.w", lin(2 * D, (2 * D, D)))
                addp("dec.gate.b", np.zeros(D, dtype=np.float32))
            add_ln("dec.xattn.ln", D)
            add_attn("dec.xattn.attn", D)
            for layer in range(cfg.dec_layers):
                add_block(f"dec.{layer}", D)
            add_ln("dec.norm", D)
            addp("dec.out.w", lin(D, (D, cfg.patch_dim)))
            addp("dec.out.b", np.zeros(cfg.patch_dim, dtype=np.float32))

        if cfg.use_multiview:
            addp("heads.meta.w1", lin(D, (D, D)))
            addp("heads.meta.b1", np.zeros(D, dtype=np.float32))
            addp("heads.meta.w2", lin(D, (D, cfg.n_metadata)))
            addp("heads.meta.b2", np.zeros(cfg.n_metadata, dtype=np.float32))
            addp("heads.feat.w", lin(D, (D, cfg.feat_codebook_size)))
            addp("heads.feat.b", np.zeros(cfg.feat_codebook_size, dtype=np.float32))
            if cfg.use_bestrq_mae:
                addp(
                    "loss.s_r",
                    np.zeros((), dtype=np.float32),
                    trainable=cfg.use_uncertainty_weighting,
                )
            addp(
                "loss.s_v",
                np.zeros((), dtype=np.float32),
                trainable=cfg.use_uncertainty_weighting,
            )
            addp(
                "loss.s_f",
                np.zeros((), dtype=np.float32),
                trainable=cfg.use_uncertainty_weighting,
            )

        # frozen quantizer matrices ride along so the checkpoint is
        # self-contained and their frozenness is checkable like any param
        addp("sig_q.projection", self.sig_quantizer.projection_, trainable=False)
        addp("sig_q.codebook", self.sig_quantizer.codebook_, trainable=False)
        addp("feat_q.projection", self.feat_quantizer.projection_, trainable=False)
        addp("feat_q.codebook", self.feat_quantizer.codebook_, trainable=False)
        return params

    def leaves(self, with_grad: bool = True) -> dict[str, nn.Tensor]:
        return nn.make_leaves(self.params, with_grad=with_grad)

    # ------------------------------------------------------------- forward

    def _attn_params(self, lv, prefix: str) -> dict:
        return {k: lv[f"{prefix}.{k}"] for k in ("wq", "bq", "wk", "wv", "bv", "wo", "bo")}

    def _encoder_block(self, lv, prefix: str, x: nn.Tensor, mask: np.ndarray) -> nn.Tensor:
        h = nn.layer_norm(x, lv[f"{prefix}.ln1.g"], lv[f"{prefix}.ln1.b"])
        x = nn.add(
            x, nn.multi_head_attention(h, h, self._attn_params(lv, f"{prefix}.attn"), self.config.heads, mask)
        )
        h = nn.layer_norm(x, lv[f"{prefix}.ln2.g"], lv[f"{prefix}.ln2.b"])
        mlp = {k: lv[f"{prefix}.mlp.{k}"] for k in ("w1", "b1", "w2", "b2")}
        return nn.add(x, nn.mlp_block(h, mlp))

    def embed_patches(self, lv, patches: np.ndarray) -> nn.Tensor:
        """(B, N, patch_dim) raw patch rows -> (B, N, D) tokens."""
        cfg = self.config
        B, N, pd = patches.shape
        if N != cfg.n_patches or pd != cfg.patch_dim:
            raise ValidationError(
                f"expected patches (B, {cfg.n_patches}, {cfg.patch_dim}), got {patches.shape}"
            )
        if cfg.use_cnn:
            # per-patch conv stem: each patch is convolved independently
            # (zero-padded at its own borders), so a perturbation inside one
            # patch can never bleed into another patch's token
            seq = (
                patches.reshape(B, N, N_CHANNELS, cfg.patch_len)
                .transpose(0, 1, 3, 2)
                .reshape(B * N, cfg.patch_len, N_CHANNELS)
            )
            x = nn.Tensor(np.ascontiguousarray(seq))
            for b in range(cfg.cnn_blocks):
                pre = f"cnn.b{b}"
                block = {
                    "conv1_w": lv[f"{pre}.conv1_w"],
                    "conv1_b": lv[f"{pre}.conv1_b"],
                    "ln_g": lv[f"{pre}.ln.g"],
                    "ln_b": lv[f"{pre}.ln.b"],
                    "conv2_w": lv[f"{pre}.conv2_w"],
                    "conv2_b": lv[f"{pre}.conv2_b"],
                }
                if f"{pre}.proj_w" in lv:
                    block["proj_w"] = lv[f"{pre}.proj_w"]
                    block["proj_b"] = lv[f"{pre}.proj_b"]
                x = nn.conv1d_residual_block(x, block)
            x = nn.reshape(x, (B, N, cfg.patch_len * cfg.cnn_channels))  # (B*N, P, C) flattened per patch
        else:
            x = nn.Tensor(patches)
        return nn.linear(x, lv["patch.proj.w"], lv["patch.proj.b"])

    def fuse_tokens(self, lv, h: nn.Tensor, sig_labels: np.ndarray, patch_idx: np.ndarray | None = None) -> nn.Tensor:
        """Add positional and (optionally) label embeddings to patch tokens.

        h is (B, K, D) covering patch positions patch_idx (default: all N
        in order); sig_labels is (B, K) matching h.
        """
        cfg = self.config
        B, K, _ = h.shape
        if patch_idx is None:
            pos = nn.reshape(lv["pos.table"], (1, cfg.n_patches, cfg.embed_dim))
        else:
            pos = nn.embedding(lv["pos.table"], np.asarray(patch_idx))
        out = nn.add(h, pos)
        if cfg.use_label_embed:
            if sig_labels.shape != (B, K):
                raise ValidationError(
                    f"sig_labels shape {sig_labels.shape} does not match tokens {(B, K)}"
                )
            out = nn.add(out, nn.embedding(lv["label_embed.table"], np.asarray(sig_labels)))
        return out

    def encode(self, lv, fused: nn.Tensor) -> tuple[nn.Tensor, nn.Tensor]:
        """Prepend CLS tokens, run the isolation-masked encoder, split.

        Returns (cls_out (B, n_cls, D), patch_out (B, K, D)) after the
        final layer norm.
        """
        cfg = self.config
        B, K, D = fused.shape
        cls_rows = [nn.broadcast_to(nn.reshape(lv["cls.r"], (1, 1, D)), (B, 1, D))]
        if cfg.use_multiview:
            cls_rows.append(nn.broadcast_to(nn.reshape(lv["cls.v"], (1, 1, D)), (B, 1, D)))
            cls_rows.append(nn.broadcast_to(nn.reshape(lv["cls.f"], (1, 1, D)), (B, 1, D)))
        x = nn.concat(cls_rows + [fused], axis=1)
        mask = build_isolation_mask(K, n_cls=cfg.n_cls)
        for layer in range(cfg.enc_layers):
            x = self._encoder_block(lv, f"enc.{layer}", x, mask)
        x = nn.layer_norm(x, lv["enc.norm.g"], lv["enc.norm.b"])
        return nn.getitem(x, (slice(None), slice(0, cfg.n_cls))), nn.getitem(
            x, (slice(None), slice(cfg.n_cls, None))
        )

    def cls_cross_attention(self, lv, cls: nn.Tensor) -> nn.Tensor:
        """Task-wise cross-attention over the CLS set; identity without
        the multi-view objectives."""
        cfg = self.config
        if not cfg.use_multiview:
            return cls
        B, n_cls, D = cls.shape
        full = np.ones((1, n_cls), dtype=bool)
        outs = []
        for t_idx, t in enumerate(TASK_NAMES):
            normed = nn.layer_norm(cls, lv[f"xattn.{t}.ln.g"], lv[f"xattn.{t}.ln.b"])
            q = nn.getitem(normed, (slice(None), slice(t_idx, t_idx + 1)))
            att = nn.multi_head_attention(
                q, normed, self._attn_params(lv, f"xattn.{t}.attn"), cfg.heads, full
            )
            outs.append(nn.add(nn.getitem(cls, (slice(None), slice(t_idx, t_idx + 1))), att))
        return nn.concat(outs, axis=1)

    def decode_reconstruct(
        self,
        lv,
        enc_patches: nn.Tensor,
        vis_idx: np.ndarray,
        mask_idx: np.ndarray,
        sig_labels_full: np.ndarray,
        cls_r: nn.Tensor,
    ) -> nn.Tensor:
        """Rebuild all N patches from encoded visible tokens.

        sig_labels_full are the codes of the full unmasked signal, so the
        decoder's gated label fusion injects target-side hints for masked
        positions too. Returns (B, N, patch_dim) predictions.
        """
        cfg = self.config
        if not cfg.use_bestrq_mae:
            raise ValidationError("reconstruction decoder is disabled in this configuration")
        B, n_vis, D = enc_patches.shape
        N = cfg.n_patches
        n_mask = mask_idx.shape[1]
        proj = nn.linear(enc_patches, lv["dec.inproj.w"], lv["dec.inproj.b"])
        placed = nn.scatter_rows(proj, vis_idx, N)
        mask_tok = nn.broadcast_to(nn.reshape(lv["dec.mask_token"], (1, 1, D)), (B, n_mask, D))
        x = nn.add(placed, nn.scatter_rows(mask_tok, mask_idx, N))
        x = nn.add(x, nn.reshape(lv["pos.table"], (1, N, D)))
        if cfg.use_label_embed:
            e = nn.embedding(lv["label_embed.table"], np.asarray(sig_labels_full))
            gate = nn.sigmoid(
                nn.linear(nn.concat([x, e], axis=2), lv["dec.gate.w"], lv["dec.gate.b"])
            )
            x = nn.add(x, nn.mul(gate, e))
        q = nn.layer_norm(x, lv["dec.xattn.ln.g"], lv["dec.xattn.ln.b"])
        x = nn.add(
            x,
            nn.multi_head_attention(
                q, cls_r, self._attn_params(lv, "dec.xattn.attn"), cfg.heads, np.ones((N, 1), dtype=bool)
            ),
        )
        full = np.ones((N, N), dtype=bool)
        for layer in range(cfg.dec_layers):
            x = self._encoder_block(lv, f"dec.{layer}", x, full)
        x = nn.layer_norm(x, lv["dec.norm.g"], lv["dec.norm.b"])
        return nn.linear(x, lv["dec.out.w"], lv["dec.out.b"])

    def head_metadata(self, lv, cls_v: nn.Tensor) -> nn.Tensor:
        """(B, 1, D) metadata CLS -> (B, 3) z-scored predictions."""
        B = cls_v.shape[0]
        h = nn.reshape(cls_v, (B, self.config.embed_dim))
        h = nn.gelu(nn.linear(h, lv["heads.meta.w1"], lv["heads.meta.b1"]))
        return nn.linear(h, lv["heads.meta.w2"], lv["heads.meta.b2"])

    def head_features(self, lv, enc_patches: nn.Tensor, cls_f: nn.Tensor) -> nn.Tensor:
        """Per-patch feature-code logits from patch tokens + broadcast CLS."""
        fused = nn.add(enc_patches, cls_f)
        return nn.linear(fused, lv["heads.feat.w"], lv["heads.feat.b"])

    def forward_pretrain(self, lv, batch: PretrainBatch) -> dict[str, nn.Tensor]:
        """All active pretext outputs for one masked batch."""
        cfg = self.config
        h = self.embed_patches(lv, batch.patches)
        h_vis = nn.gather_rows(h, batch.vis_idx)
        lab_vis = np.take_along_axis(batch.sig_labels, batch.vis_idx, axis=1)
        fused = self.fuse_tokens(lv, h_vis, lab_vis, patch_idx=batch.vis_idx)
        cls, patch_out = self.encode(lv, fused)
        cls = self.cls_cross_attention(lv, cls)
        out: dict[str, nn.Tensor] = {}
        if cfg.use_bestrq_mae:
            cls_r = nn.getitem(cls, (slice(None), slice(0, 1)))
            out["recon"] = self.decode_reconstruct(
                lv, patch_out, batch.vis_idx, batch.mask_idx, batch.sig_labels, cls_r
            )
        if cfg.use_multiview:
            out["meta"] = self.head_metadata(lv, nn.getitem(cls, (slice(None), slice(1, 2))))
            out["feat_logits"] = self.head_features(
                lv, patch_out, nn.getitem(cls, (slice(None), slice(2, 3)))
            )
        return out

    def forward_probe(self, patches: np.ndarray, sig_labels: np.ndarray) -> np.ndarray:
        """Frozen-encoder segment representations, (B, n_cls * D).

        Every patch is visible; the result is the concatenation of the
        cross-attended CLS embeddings. Runs tape-free.
        """
        lv = self.leaves(with_grad=False)
        h = self.embed_patches(lv, patches.astype(np.float32, copy=False))
        fused = self.fuse_tokens(lv, h, sig_labels)
        cls, _ = self.encode(lv, fused)
        cls = self.cls_cross_attention(lv, cls)
        B = patches.shape[0]
        return np.ascontiguousarray(cls.data.reshape(B, self.config.representation_dim))

    # --------------------------------------------------------------- misc

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            p = self.params[name]
            h.update(name.encode())
            h.update(str(p.value.dtype).encode())
            h.update(np.ascontiguousarray(p.value).tobytes())
        return h.hexdigest()

    def trainable_params(self) -> dict[str, nn.Param]:
        return {k: p for k, p in self.params.items() if p.trainable}


# ------------------------------------------------------------- checkpoints


def _stats_to_json(model: MultiViewModel) -> dict:
    out = {"meta_mean": None, "meta_std": None, "feature_mean": None, "feature_std": None}
    if model.meta_mean is not None:
        out["meta_mean"] = [float(v) for v in model.meta_mean]
        out["meta_std"] = [float(v) for v in model.meta_std]
    if model.feature_stats is not None:
        out["feature_mean"] = [float(v) for v in model.feature_stats.mean_]
        out["feature_std"] = [float(v) for v in model.feature_stats.std_]
    return out


def _stats_from_json(model: MultiViewModel, stats: dict) -> None:
    if stats.get("meta_mean") is not None:
        model.meta_mean = np.asarray(stats["meta_mean"], dtype=np.float64)
        model.meta_std = np.asarray(stats["meta_std"], dtype=np.float64)
    if stats.get("feature_mean") is not None:
        model.feature_stats = FeatureStandardizer.from_stats(
            np.asarray(stats["feature_mean"]), np.asarray(stats["feature_std"])
        )


def save_checkpoint(path: str, model: MultiViewModel, trainer_state: dict | None = None) -> None:
    """Single-file checkpoint: one compact JSON manifest line, then a raw
    little-endian blob of every array (params sorted by name, then any
    optimizer moments). The manifest records per-array offsets/dtypes and
    the blob's sha256, so loads are integrity-checked.
    """
    arrays: list[tuple[str, np.ndarray]] = []
    for name in sorted(model.params):
        arrays.append((name, model.params[name].value))
    trainer_json = None
    if trainer_state is not None:
        for key in ("opt_m", "opt_v"):
            for name in sorted(trainer_state[key]):
                arrays.append((f"opt.{key[-1]}.{name}", trainer_state[key][name]))
        trainer_json = {
            "step": int(trainer_state["step"]),
            "rng_state": trainer_state["rng_state"],
        }

    blob = bytearray()
    entries = []
    for name, arr in arrays:
        # ascontiguousarray promotes 0-d arrays to (1,), so record the
        # original shape for the manifest
        raw = np.ascontiguousarray(arr)
        if raw.dtype == np.float64:
            code = "<f8"
        elif raw.dtype == np.float32:
            code = "<f4"
        else:
            raise ValidationError(f"unsupported checkpoint dtype {raw.dtype} for {name}")
        data = raw.astype(np.dtype(code), copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": code,
                "offset": len(blob),
                "nbytes": len(data),
            }
        )
        blob.extend(data)

    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": dataclasses.asdict(model.config),
        "seed": model.seed,
        "quantizer_seeds": {
            "signal": model.sig_quantizer_seed,
            "feature": model.feat_quantizer_seed,
        },
        "trainable": {name: model.params[name].trainable for name in sorted(model.params)},
        "stats": _stats_to_json(model),
        "entries": entries,
        "blob_sha256": hashlib.sha256(bytes(blob)).hexdigest(),
        "trainer": trainer_json,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode())
        fh.write(b"\n")
        fh.write(bytes(blob))


def load_checkpoint(path: str) -> tuple[MultiViewModel, dict | None]:
    """Rebuild a model (and optional trainer state) from save_checkpoint
    output, verifying blob checksum, shapes, and quantizer frozenness."""
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValidationError(f"{path}: not a checkpoint (missing manifest line)")
    try:
        manifest = json.loads(raw[:nl].decode())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed checkpoint manifest ({exc})") from exc
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValidationError(
            f"{path}: unsupported checkpoint format version {manifest.get('format_version')}"
        )
    blob = raw[nl + 1 :]
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["blob_sha256"]:
        raise ValidationError(f"{path}: checkpoint blob checksum mismatch")

    config = ModelConfig(**manifest["model_config"])
    model = MultiViewModel(config, seed=manifest["seed"])

    loaded: dict[str, np.ndarray] = {}
    for entry in manifest["entries"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(blob[start : start + n], dtype=np.dtype(entry["dtype"]))
        loaded[entry["name"]] = arr.reshape(entry["shape"]).copy()

    for name, p in model.params.items():
        if name not in loaded:
            raise ValidationError(f"{path}: checkpoint missing parameter {name}")
        arr = loaded[name]
        if arr.shape != p.value.shape:
            raise ValidationError(
                f"{path}: shape mismatch for {name}: {arr.shape} vs {p.value.shape}"
            )
        if name.startswith(("sig_q.", "feat_q.")):
            if not np.array_equal(arr, p.value):
                raise ValidationError(
                    f"{path}: frozen quantizer array {name} does not match its seed"
                )
            continue
        p.value[...] = arr.astype(p.value.dtype, copy=False)

    _stats_from_json(model, manifest.get("stats", {}))

    trainer_state = None
    if manifest.get("trainer") is not None:
        opt_m, opt_v = {}, {}
        for name, arr in loaded.items():
            if name.startswith("opt.m."):
                opt_m[name[len("opt.m.") :]] = arr.astype(np.float32, copy=False)
            elif name.startswith("opt.v."):
                opt_v[name[len("opt.v.") :]] = arr.astype(np.float32, copy=False)
        trainer_state = {
            "step": manifest["trainer"]["step"],
            "rng_state": manifest["trainer"]["rng_state"],
            "opt_m": opt_m,
            "opt_v": opt_v,
        }
    return model, trainer_state
