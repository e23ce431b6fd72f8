"""Event-driven single-channel EEG sleep staging.

Signals are turned into sparse bipolar event streams by a two-scale adaptive
delta modulator, grouped into 30 s epochs, and classified by a small numpy
network with masked local attention and a leaky per-epoch state.
"""

from .encoder import EncoderConfig, MultiScaleEventStream, decode, encode_ramsdm, reconstruct
from .exceptions import EventSleepError, FormatError, NumericError, ParameterError, UndefinedMetricError
from .network import ModelConfig, ModelParams, init_params, param_count
from .operating_point import FidelityThresholds, SweepGrid, grid_search
from .s2e import EpochBatch, build_epoch_batch
from .signal_io import Recording, Stage
from .training import TrainConfig, cv_split, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig",
    "EpochBatch",
    "EventSleepError",
    "FidelityThresholds",
    "FormatError",
    "ModelConfig",
    "ModelParams",
    "MultiScaleEventStream",
    "NumericError",
    "ParameterError",
    "Recording",
    "Stage",
    "SweepGrid",
    "TrainConfig",
    "UndefinedMetricError",
    "build_epoch_batch",
    "cv_split",
    "decode",
    "encode_ramsdm",
    "evaluate",
    "grid_search",
    "init_params",
    "param_count",
    "reconstruct",
    "train",
]
