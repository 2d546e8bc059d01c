"""Two-branch real-time semantic segmentation on a small numpy autodiff core."""

from .attention import DualGuidedAttention, GuidedAttention, dga_fuse, double_norm, ga_forward
from .data import (ConfusionMatrix, SegSample, colorize, evaluate, miou, synth_dataset,
                   synth_sample)
from .errors import (BidgError, ConfigError, DataError, GraphError, NumericAbort, NumericError,
                     ShapeError)
from .model import (NetworkConfig, SegModel, build_model, count_params, load_checkpoint,
                    save_checkpoint)
from .rsu import RSU, RsuConfig
from .tensor import GradTape, Tensor
from .train import TrainConfig, lr_at, ohem_ce, train_loop

__version__ = "0.1.0"

__all__ = [
    "BidgError", "ConfigError", "ConfusionMatrix", "DataError", "DualGuidedAttention",
    "GradTape", "GraphError", "GuidedAttention", "NetworkConfig", "NumericAbort", "NumericError",
    "RSU", "RsuConfig", "SegModel", "SegSample", "ShapeError", "Tensor", "TrainConfig",
    "build_model", "colorize", "count_params", "dga_fuse", "double_norm", "evaluate",
    "ga_forward", "load_checkpoint", "lr_at", "miou", "ohem_ce", "save_checkpoint",
    "synth_dataset", "synth_sample", "train_loop",
]
