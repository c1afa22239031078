"""Lesion segmentation with classifiers trained on the most similar cases."""

from .evaluation import LooReport, check_hygiene, evaluate_sc_selection, leave_one_out, summarize
from .pipeline import (
    IdalConfig,
    IdalModel,
    SegmentationResult,
    SimilarityMatrix,
    build_similarity_matrix,
    dice,
    segment,
    segment_oracle,
    segment_pooled,
    train_offline,
)
from .synth import SynthConfig, generate_dataset
from .volume_io import MultiModalCase, Volume, load_dataset, read_manifest, read_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "IdalConfig", "IdalModel", "LooReport", "MultiModalCase", "SegmentationResult", "SimilarityMatrix",
    "SynthConfig", "Volume", "build_similarity_matrix", "check_hygiene", "dice", "evaluate_sc_selection",
    "generate_dataset", "leave_one_out", "load_dataset", "read_manifest", "read_volume", "segment",
    "segment_oracle", "segment_pooled", "summarize", "train_offline", "write_volume",
]
