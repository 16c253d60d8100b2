"""Configurable 3D V-Net: encoder/decoder with concatenated skips.

Topology for ``levels = L`` and widths ``c_l = base_channels * 2**l``:

* encoder level 0: a stage of ``convs_per_level`` ConvBlocks, ``in_channels -> c_0``
* encoder level l >= 1: stride-2 ConvBlock ``c_{l-1} -> c_l`` then a stage ``c_l -> c_l``
* decoder level l (from L-2 down to 0): stride-2 transposed conv ``c_{l+1} -> c_l``,
  concatenation with the encoder output of level l, then a stage ``2 c_l -> c_l``
* head: zero-initialised 1x1x1 convolution ``c_0 -> out_classes``

Within a stage with more than one conv, the output of the first conv is added
to the output of the last one (V-Net style residual), unless disabled.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import IndivisibleDims, ShapeMismatch
from . import functional as F
from .layers import ConvBlock, PointwiseConv, UpBlock
from .optim import AdamState


@dataclass(frozen=True)
class VNetConfig:
    levels: int = 3
    base_channels: int = 8
    convs_per_level: int = 2
    in_channels: int = 1
    out_classes: int = 2
    residual: bool = True
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.base_channels < 1 or self.convs_per_level < 1 or self.in_channels < 1:
            raise ValueError("channel and conv counts must be positive")
        if self.out_classes != 2:
            raise ValueError("this pipeline is binary: out_classes must be 2")

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** l for l in range(self.levels)]

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "tiny": VNetConfig(levels=3, base_channels=8, convs_per_level=2),
    "full": VNetConfig(levels=5, base_channels=16, convs_per_level=2),
}


class _Stage:
    def __init__(self, in_ch, out_ch, n_convs, residual, rng, dtype, cfg):
        self.convs = [
            ConvBlock(in_ch if i == 0 else out_ch, out_ch, 1, rng, dtype,
                      cfg.bn_momentum, cfg.bn_eps)
            for i in range(n_convs)
        ]
        self.residual = residual and n_convs > 1

    def forward(self, x, train):
        first = x = self.convs[0].forward(x, train)
        for conv in self.convs[1:]:
            x = conv.forward(x, train)
        return x + first if self.residual else x

    def backward(self, g):
        g_first = g if self.residual else None
        for conv in reversed(self.convs[1:]):
            g = conv.backward(g)
        if g_first is not None:
            g = g + g_first
        return self.convs[0].backward(g)

    def named_layers(self, prefix):
        return [(f"{prefix}.conv{i}", c) for i, c in enumerate(self.convs)]


class VNetModel:
    """Network parameters, BN buffers and Adam state for one segmentation stage."""

    def __init__(self, config: VNetConfig = PRESETS["tiny"], seed: int = 0,
                 dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        w = config.widths()
        n = config.convs_per_level
        args = (config.residual, rng, self.dtype, config)
        self.encoder = [_Stage(config.in_channels, w[0], n, *args)]
        self.down = []
        for l in range(1, config.levels):
            self.down.append(ConvBlock(w[l - 1], w[l], 2, rng, self.dtype,
                                       config.bn_momentum, config.bn_eps))
            self.encoder.append(_Stage(w[l], w[l], n, *args))
        self.up = []
        self.decoder = []
        for l in range(config.levels - 2, -1, -1):
            self.up.append(UpBlock(w[l + 1], w[l], rng, self.dtype,
                                   config.bn_momentum, config.bn_eps))
            self.decoder.append(_Stage(2 * w[l], w[l], n, *args))
        self.head = PointwiseConv(w[0], config.out_classes, self.dtype)
        self.adam = AdamState.zeros_like([t.data for _, t in self.named_parameters()])
        self._skip_channels = []

    # -- structure -----------------------------------------------------------

    def named_layers(self):
        layers = []
        for l, stage in enumerate(self.encoder):
            if l > 0:
                layers.append((f"enc{l}.down", self.down[l - 1]))
            layers.extend(stage.named_layers(f"enc{l}"))
        for i, (up, stage) in enumerate(zip(self.up, self.decoder)):
            l = self.config.levels - 2 - i
            layers.append((f"dec{l}.up", up))
            layers.extend(stage.named_layers(f"dec{l}"))
        layers.append(("head", self.head))
        return layers

    def named_parameters(self):
        return [(f"{ln}.{pn}", t) for ln, layer in self.named_layers()
                for pn, t in layer.params()]

    def named_buffers(self):
        return [(f"{ln}.{bn}", b) for ln, layer in self.named_layers()
                for bn, b in layer.buffers()]

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def set_freeze_bn_stats(self, frozen: bool):
        for _, layer in self.named_layers():
            bn = getattr(layer, "bn", None)
            if bn is not None:
                bn.freeze_stats = frozen

    # -- compute -------------------------------------------------------------

    def check_input(self, x):
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ShapeMismatch(
                f"expected (N, {self.config.in_channels}, D, H, W), got {x.shape}"
            )
        factor = 2 ** (self.config.levels - 1)
        if any(s % factor for s in x.shape[2:]):
            raise IndivisibleDims(
                f"spatial dims {x.shape[2:]} must be divisible by {factor}"
            )

    def forward(self, x, train: bool = False):
        """Return class logits of shape (N, 2, D, H, W)."""
        self.check_input(x)
        x = np.asarray(x, dtype=self.dtype)
        skips = []
        for l, stage in enumerate(self.encoder):
            if l > 0:
                x = self.down[l - 1].forward(x, train)
            x = stage.forward(x, train)
            skips.append(x)
        self._skip_channels = []
        for i, (up, stage) in enumerate(zip(self.up, self.decoder)):
            skip = skips[self.config.levels - 2 - i]
            x = up.forward(x, train)
            self._skip_channels.append(x.shape[1])
            x = stage.forward(np.concatenate([x, skip], axis=1), train)
        return self.head.forward(x, train)

    def backward(self, grad_logits):
        """Backpropagate ``d loss / d logits``; parameter grads accumulate."""
        g = self.head.backward(np.asarray(grad_logits, dtype=self.dtype))
        levels = self.config.levels
        skip_grads = [None] * levels
        for i in reversed(range(len(self.up))):
            g = self.decoder[i].backward(g)
            c = self._skip_channels[i]
            skip_grads[levels - 2 - i] = g[:, c:]
            g = self.up[i].backward(g[:, :c])
        # g is now the gradient w.r.t. the bottom encoder output
        for l in reversed(range(levels)):
            if skip_grads[l] is not None:
                g = g + skip_grads[l]
            g = self.encoder[l].backward(g)
            if l > 0:
                g = self.down[l - 1].backward(g)
        return g

    def predict_proba(self, x):
        """Softmax class probabilities in inference mode."""
        return F.softmax(self.forward(x, train=False), axis=1)


def vnet_forward(model: VNetModel, x):
    return model.predict_proba(x)


def count_parameters(model: VNetModel) -> int:
    return sum(t.data.size for t in model.parameters())
