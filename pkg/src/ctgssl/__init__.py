"""Multi-view self-supervised pretraining for cardiotocography signals.

The package covers the full desk-scale pipeline: synthetic CTG generation,
deterministic preprocessing, frozen random-projection quantizers, a
task-token transformer with isolation masking, masked-reconstruction
pretraining with uncertainty-weighted multi-task losses, and a frozen-encoder
linear-probing evaluation harness.
"""

__version__ = "0.1.0"

from .features import FeatureStandardizer, extract_features
from .model import ModelConfig, MultiViewModel
from .pretrain import CtgPretrainer, TrainConfig
from .probe_eval import LinearProbe, auc
from .quantizer import RandomProjectionQuantizer, build_quantizer
from .signal_core import CtgRecord, Metadata, PatchGrid, Segment

__all__ = [
    "CtgPretrainer",
    "CtgRecord",
    "FeatureStandardizer",
    "LinearProbe",
    "Metadata",
    "ModelConfig",
    "MultiViewModel",
    "PatchGrid",
    "RandomProjectionQuantizer",
    "Segment",
    "TrainConfig",
    "auc",
    "build_quantizer",
    "extract_features",
    "__version__",
]
