from .checkpoint import checkpoint_load, checkpoint_save
from .functional import conv3d_backward, conv3d_forward, softmax, softmax_cross_entropy
from .layers import ConvBlock, Tensor
from .optim import AdamState, adam_step, adam_update
from .vnet import PRESETS, VNetConfig, VNetModel, count_parameters, vnet_forward

__all__ = [
    "AdamState",
    "ConvBlock",
    "PRESETS",
    "Tensor",
    "VNetConfig",
    "VNetModel",
    "adam_step",
    "adam_update",
    "checkpoint_load",
    "checkpoint_save",
    "conv3d_backward",
    "conv3d_forward",
    "count_parameters",
    "softmax",
    "softmax_cross_entropy",
    "vnet_forward",
]
