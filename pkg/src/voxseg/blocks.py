"""Composite network building blocks.

Conv3D block, attention gate, position/channel/dual attention, multi-scale
input pyramid, and deep-supervision heads. Blocks register their parameters
in a ParamStore under a scoped name prefix at construction time.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ConfigurationError


@dataclass
class ConvBlockSpec:
    in_channels: int
    out_channels: int
    convs_per_block: int = 1
    normalization: str = "instance"  # instance | none
    activation: str = "relu"

    def __post_init__(self):
        if self.out_channels <= 0 or self.convs_per_block < 1:
            raise ConfigurationError("invalid ConvBlockSpec")
        if self.normalization not in ("instance", "none"):
            raise ConfigurationError(f"unknown normalization: {self.normalization}")
        if self.activation != "relu":
            raise ConfigurationError(f"unknown activation: {self.activation}")


@dataclass
class AttentionGateSpec:
    skip_channels: int
    gating_channels: int
    inter_channels: int

    def __post_init__(self):
        if self.inter_channels < 1:
            raise ConfigurationError("inter_channels must be >= 1")


def instance_norm(x, gamma, beta, eps=1e-5):
    """Normalize over spatial dims per sample and channel."""
    mu = x.mean(axis=(2, 3, 4), keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=(2, 3, 4), keepdims=True)
    xhat = xc / ad.sqrt(var + eps)
    shape = (1, -1, 1, 1, 1)
    return xhat * gamma.reshape(shape) + beta.reshape(shape)


class ConvBlock:
    """convs_per_block x (3x3x3 conv, normalization, relu); spatial dims kept."""

    def __init__(self, store, prefix, spec):
        self.spec = spec
        self.kernels = []
        self.biases = []
        self.norms = []
        cin = spec.in_channels
        for i in range(spec.convs_per_block):
            k = store.param(f"{prefix}.conv{i}.kernel", (spec.out_channels, cin, 3, 3, 3),
                            init="he_uniform")
            b = store.param(f"{prefix}.conv{i}.bias", (spec.out_channels,))
            self.kernels.append(k)
            self.biases.append(b)
            if spec.normalization == "instance":
                g = store.param(f"{prefix}.norm{i}.gamma", (spec.out_channels,), init="ones")
                be = store.param(f"{prefix}.norm{i}.beta", (spec.out_channels,))
                self.norms.append((g, be))
            cin = spec.out_channels

    def __call__(self, x):
        if x.shape[1] != self.spec.in_channels:
            raise ConfigurationError(
                f"conv block expects {self.spec.in_channels} channels, got {x.shape[1]}")
        for i in range(self.spec.convs_per_block):
            x = ad.conv3d(x, self.kernels[i], self.biases[i], stride=1, padding=1)
            if self.spec.normalization == "instance":
                x = instance_norm(x, *self.norms[i])
            x = ad.relu(x)
        return x


class Upsampler:
    """3x3x3 transposed convolution doubling the spatial dims."""

    def __init__(self, store, prefix, in_channels, out_channels):
        self.kernel = store.param(f"{prefix}.kernel", (in_channels, out_channels, 3, 3, 3),
                                  init="he_uniform", fan_in=in_channels * 27)
        self.bias = store.param(f"{prefix}.bias", (out_channels,))

    def __call__(self, x):
        return ad.transpose_conv3d(x, self.kernel, self.bias,
                                   stride=2, padding=1, output_padding=1)


class AttentionGate:
    """Soft gate on skip features: alpha = sigmoid(psi(relu(Wx.x + Wg.g + b)))."""

    def __init__(self, store, prefix, spec):
        self.spec = spec
        ic = spec.inter_channels
        self.wx = store.param(f"{prefix}.wx.kernel", (ic, spec.skip_channels, 1, 1, 1),
                              init="he_uniform")
        self.wg = store.param(f"{prefix}.wg.kernel", (ic, spec.gating_channels, 1, 1, 1),
                              init="he_uniform")
        self.join_bias = store.param(f"{prefix}.join.bias", (ic,))
        self.psi = store.param(f"{prefix}.psi.kernel", (1, ic, 1, 1, 1), init="he_uniform")
        self.psi_bias = store.param(f"{prefix}.psi.bias", (1,))

    def __call__(self, skip, gating):
        if skip.shape[2:] != gating.shape[2:]:
            raise ConfigurationError(
                f"skip {skip.shape[2:]} and gating {gating.shape[2:]} spatial dims differ")
        joined = ad.relu(ad.conv3d(skip, self.wx) + ad.conv3d(gating, self.wg, self.join_bias))
        alpha = ad.sigmoid(ad.conv3d(joined, self.psi, self.psi_bias))
        return skip * alpha


class PositionAttention:
    """Spatial self-attention over all voxel positions with residual scalar."""

    reduction = 8

    def __init__(self, store, prefix, channels):
        inter = max(1, channels // self.reduction)
        self.query = store.param(f"{prefix}.query.kernel", (inter, channels, 1, 1, 1),
                                 init="he_uniform")
        self.key = store.param(f"{prefix}.key.kernel", (inter, channels, 1, 1, 1),
                               init="he_uniform")
        self.value = store.param(f"{prefix}.value.kernel", (channels, channels, 1, 1, 1),
                                 init="he_uniform")
        self.gamma = store.param(f"{prefix}.gamma", ())

    def affinity(self, x):
        B = x.shape[0]
        n = int(np.prod(x.shape[2:]))
        q = ad.conv3d(x, self.query).reshape((B, -1, n))
        k = ad.conv3d(x, self.key).reshape((B, -1, n))
        energy = ad.matmul(q.transpose((0, 2, 1)), k)  # (B, N, N)
        return ad.softmax(energy, axis=-1)

    def __call__(self, x):
        B, C = x.shape[:2]
        n = int(np.prod(x.shape[2:]))
        attn = self.affinity(x)
        v = ad.conv3d(x, self.value).reshape((B, C, n))
        out = ad.matmul(v, attn.transpose((0, 2, 1))).reshape(x.shape)
        return self.gamma * out + x


class ChannelAttention:
    """Channel self-attention from raw reshaped features; no projections."""

    def __init__(self, store, prefix):
        self.gamma = store.param(f"{prefix}.gamma", ())

    @staticmethod
    def affinity(x):
        B, C = x.shape[:2]
        n = int(np.prod(x.shape[2:]))
        xr = x.reshape((B, C, n))
        energy = ad.matmul(xr, xr.transpose((0, 2, 1)))  # (B, C, C)
        return ad.softmax(energy, axis=-1)

    def __call__(self, x):
        B, C = x.shape[:2]
        n = int(np.prod(x.shape[2:]))
        xr = x.reshape((B, C, n))
        out = ad.matmul(self.affinity(x), xr).reshape(x.shape)
        return self.gamma * out + x


class DualAttention:
    """Position + channel attention, spatial dropout, and a linear map (AFM)."""

    dropout_rate = 0.5

    def __init__(self, store, prefix, channels):
        self.position = PositionAttention(store, f"{prefix}.position", channels)
        self.channel = ChannelAttention(store, f"{prefix}.channel")
        self.out_kernel = store.param(f"{prefix}.out.kernel", (channels, channels, 1, 1, 1),
                                      init="he_uniform")
        self.out_bias = store.param(f"{prefix}.out.bias", (channels,))

    def __call__(self, x, training=False, rng=None):
        s = self.position(x) + self.channel(x)
        s = ad.spatial_dropout(s, self.dropout_rate, rng=rng, training=training)
        return ad.conv3d(s, self.out_kernel, self.out_bias)


def multiscale_inputs(volume, levels):
    """Progressively halved copies of the input, one per level below the top."""
    if levels < 1:
        raise ConfigurationError("levels must be >= 1")
    if levels > 1 and min(volume.shape[2:]) < 2 ** (levels - 1):
        raise ConfigurationError(
            f"volume {volume.shape[2:]} too small to halve {levels - 1} times")
    scales = []
    current = volume
    for _ in range(levels - 1):
        current = ad.avg_pool3d(current, kernel=3, stride=2, padding=1)
        scales.append(current)
    return scales


class DeepSupervisionHeads:
    """Per-level 1x1x1 conv to class logits followed by channel softmax."""

    def __init__(self, store, prefix, level_channels, classes):
        self.heads = []
        for i, ch in enumerate(level_channels):
            k = store.param(f"{prefix}.level{i}.kernel", (classes, ch, 1, 1, 1),
                            init="he_uniform")
            b = store.param(f"{prefix}.level{i}.bias", (classes,))
            self.heads.append((k, b))

    def __call__(self, features):
        if len(features) != len(self.heads):
            raise ConfigurationError(
                f"expected {len(self.heads)} decoder feature maps, got {len(features)}")
        return [ad.softmax_channel(ad.conv3d(f, k, b))
                for f, (k, b) in zip(features, self.heads)]
