"""Shared fixtures: tiny model configs and small synthetic corpora."""

from __future__ import annotations

import numpy as np
import pytest

from ctgssl.model import ModelConfig
from ctgssl.pretrain import TrainConfig
from ctgssl.signal_core import Metadata, Segment, normalize
from ctgssl.synthgen import GenParams, generate


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="run the slow closed-loop acceptance criteria",
    )


TINY = ModelConfig(
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

TINY_TRAIN = TrainConfig(steps=6, batch_size=4, snapshot_interval=3, seed=0)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return TINY


@pytest.fixture
def tiny_train() -> TrainConfig:
    return TINY_TRAIN


def make_segment(
    length: int = 24,
    seed: int = 0,
    missing: float = 0.0,
    record_id: str = "rec0",
    ttb: float = 10.0,
) -> Segment:
    """A normalized segment of plausible raw values, any length."""
    rng = np.random.default_rng(seed)
    values = np.empty((length, 2))
    values[:, 0] = 130.0 + 8.0 * rng.standard_normal(length)
    values[:, 1] = np.clip(25.0 + 10.0 * rng.standard_normal(length), 0.0, 100.0)
    valid = rng.random((length, 2)) >= missing
    seg = Segment(
        values=values,
        valid=valid,
        missing_fraction=float(1.0 - valid.mean()),
        metadata=Metadata(34.0, ttb, 30.0),
        source_record=record_id,
        start_offset=0,
    )
    return normalize(seg)


@pytest.fixture
def tiny_segments() -> list[Segment]:
    return [
        make_segment(length=24, seed=i, missing=0.1 * (i % 3), record_id=f"r{i:02d}", ttb=float(3 + i))
        for i in range(10)
    ]


@pytest.fixture
def small_records():
    """Six full-scale synthetic records (short duration to stay fast)."""
    records = []
    labels = {}
    for i in range(6):
        params = GenParams(seed=1000 + i, duration=2400.0, dropout_fraction=0.05 * (i % 3))
        rec, lab = generate(params, record_id=f"rec{i}")
        records.append(rec)
        labels[rec.record_id] = {
            "abnormal": lab.abnormal,
            "near_delivery": lab.near_delivery,
        }
    return records, labels
