"""Geo-supervised domain adaptation for semantic segmentation.

The package trains a segmentation network on a labeled source domain and an
unlabeled target domain whose patches carry only acquisition coordinates. An
auxiliary head regresses a sinusoidal encoding of each patch's centroid on
both domains, and a moving-average class weighting rebalances the source
cross-entropy toward rare classes.
"""

from .class_balance import DcsConfig, DcsState, instantaneous_weights, label_frequency, update
from .data import GeoDataset, Patch, PatchMeta, SyntheticConfig, generate_synthetic, load_dataset
from .encoding import EncodingConfig, RawCoordinate, TimeStamp, encode_supervision, positional_encode
from .metrics import ConfusionMatrix, IouReport, accumulate, iou
from .network import GeoHeadConfig, SegModel, SegNetConfig, TimeHeadConfig
from .training import ComponentFlags, TrainConfig, evaluate, fit

__version__ = "0.1.0"

__all__ = [
    "ComponentFlags",
    "ConfusionMatrix",
    "DcsConfig",
    "DcsState",
    "EncodingConfig",
    "GeoDataset",
    "GeoHeadConfig",
    "IouReport",
    "Patch",
    "PatchMeta",
    "RawCoordinate",
    "SegModel",
    "SegNetConfig",
    "SyntheticConfig",
    "TimeHeadConfig",
    "TimeStamp",
    "TrainConfig",
    "accumulate",
    "encode_supervision",
    "evaluate",
    "fit",
    "generate_synthetic",
    "instantaneous_weights",
    "iou",
    "label_frequency",
    "load_dataset",
    "positional_encode",
    "update",
    "__version__",
]
