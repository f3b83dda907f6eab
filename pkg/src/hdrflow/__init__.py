"""Alternating-exposure HDR video reconstruction with learned optical flow,
built on a small numpy reverse-mode autodiff core."""

from .errors import (ConfigError, FormatError, GradientError, HdrFlowError, NumericFault,
                     ShapeError, TrainingDiverged)
from .flow import FlowField, read_flo, warp, write_flo
from .hdr import (ExposureSchedule, LdrFrame, LuminanceMask, RadianceFrame, adjust_exposure,
                  ldr_to_linear, linear_to_ldr, tonemap_mu, well_exposed_mask)
from .networks import (FlowNetConfig, FusionNetConfig, WeightStore, flownet_forward, fuse_hdr,
                       fusionnet_forward, init_model, init_weights, load_weights, save_weights)
from .pipeline import SequenceWindow, process_sequence, reconstruct_2exp, reconstruct_3exp
from .tensor import Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "FormatError", "GradientError", "HdrFlowError", "NumericFault", "ShapeError",
    "TrainingDiverged", "FlowField", "read_flo", "warp", "write_flo", "ExposureSchedule", "LdrFrame",
    "LuminanceMask", "RadianceFrame", "adjust_exposure", "ldr_to_linear", "linear_to_ldr", "tonemap_mu",
    "well_exposed_mask", "FlowNetConfig", "FusionNetConfig", "WeightStore", "flownet_forward", "fuse_hdr",
    "fusionnet_forward", "init_model", "init_weights", "load_weights", "save_weights", "SequenceWindow",
    "process_sequence", "reconstruct_2exp", "reconstruct_3exp", "Tensor", "backward",
]
