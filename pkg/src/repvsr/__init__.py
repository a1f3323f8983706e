"""Reparameterizable x4 video super-resolution engine.

Branched RepConv blocks are trained, then fused into single 3x3 convolutions
for deployment. Hot convolution kernels run in a compiled extension when it
is built, with a numpy fallback (see :mod:`repvsr.backend`).
"""
__version__ = "0.1.0"

from .errors import (ContractError, DataError, RepVSRError, ShapeError,  # noqa: F401
                     TrainingDivergedError, WeightFormatError)
from .network import (NetConfig, NetParams, count_flops, count_params,  # noqa: F401
                      forward_clip, forward_frame, fuse_network, init_params)
from .repconv import RepConvParams, fuse_repconv  # noqa: F401
from .tensor import ConvParams, precision, set_precision  # noqa: F401
