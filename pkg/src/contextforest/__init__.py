"""Context forests: retrieval of training images by predicted object properties."""

from contextforest.dataset import (
    Dataset,
    DatasetError,
    ImageRecord,
    ObjectBox,
    SynthConfig,
    load_dataset,
    save_dataset,
    split,
    synth_generate,
)
from contextforest.metrics import (
    PropertyKind,
    SigmaParams,
    compactness,
    distance,
    estimate_sigma,
    kde_window_score,
    retrieval_quality,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DatasetError",
    "ImageRecord",
    "ObjectBox",
    "PropertyKind",
    "SigmaParams",
    "SynthConfig",
    "compactness",
    "distance",
    "estimate_sigma",
    "kde_window_score",
    "load_dataset",
    "retrieval_quality",
    "save_dataset",
    "split",
    "synth_generate",
]
