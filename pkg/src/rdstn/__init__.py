"""Arbitrary-scale super-resolution with a residual dense shifted-window
transformer encoder and an implicit-representation decoder."""

from .data import (
    DatasetSplit,
    EmptyDatasetError,
    add_gaussian_noise,
    downsample_bicubic,
    load_image,
    make_coord_grid,
    save_image,
    split_dataset,
    synthesize_training_pair,
)
from .decoder import DecoderConfig, LEIRUDecoder
from .encoder import EncoderConfig, RDSTEncoder
from .model import RDSTN, ModelConfig, count_parameters, upscale

__all__ = [
    "DatasetSplit",
    "DecoderConfig",
    "EmptyDatasetError",
    "EncoderConfig",
    "LEIRUDecoder",
    "ModelConfig",
    "RDSTEncoder",
    "RDSTN",
    "add_gaussian_noise",
    "count_parameters",
    "downsample_bicubic",
    "load_image",
    "make_coord_grid",
    "save_image",
    "split_dataset",
    "synthesize_training_pair",
    "upscale",
]
