"""
Building blocks inserted at the three detection heads.

All blocks take batched feature maps of shape (B, C, H, W). Every block
except the domain classifier preserves the input shape.
"""
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError, ShapeError


def _check_channels(x, channels, name):
    if x.dim() != 4:
        raise ShapeError(f"{name}: expected (B, C, H, W) input, got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ShapeError(f"{name}: expected {channels} channels, got {x.shape[1]}")


def _check_finite(x, name):
    if not torch.isfinite(x).all():
        raise NumericError(f"{name}: input contains non-finite values")


class ResidualBlock(nn.Module):
    """
    conv1x1 -> BN -> ReLU -> conv1x1 -> BN, added back onto the input.

    There is no activation after the addition, so a zeroed second conv with
    an identity batch norm makes the block an exact identity in eval mode.
    """

    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(channels, channels, kernel_size=1, bias=True)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size=1, bias=True)
        self.bn2 = nn.BatchNorm2d(channels)

    def branch(self, x):
        return self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))

    def forward(self, x):
        _check_channels(x, self.channels, "ResidualBlock")
        _check_finite(x, "ResidualBlock")
        return x + self.branch(x)


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation style per-channel gate.

    Args:
        channels: number of input/output channels.
        reduction: reduction ratio; the hidden width is ceil(channels / reduction).
    """

    def __init__(self, channels, reduction=16):
        super().__init__()
        if reduction < 1:
            raise ValueError("reduction ratio must be a positive integer")
        self.channels = channels
        self.reduction = reduction
        hidden = max(1, math.ceil(channels / reduction))
        self.reduce = nn.Conv2d(channels, hidden, kernel_size=1, bias=True)
        self.expand = nn.Conv2d(hidden, channels, kernel_size=1, bias=True)

    def gate(self, x):
        pooled = F.adaptive_avg_pool2d(x, 1)
        return torch.sigmoid(self.expand(F.relu(self.reduce(pooled))))

    def forward(self, x):
        _check_channels(x, self.channels, "ChannelAttention")
        return x * self.gate(x)


class MultiScaleAttention(nn.Module):
    """One independent 1x1 conv + sigmoid gate per detection scale.

    The gate is elementwise over channels and space, and each gate only
    touches its own scale.
    """

    def __init__(self, channels):
        super().__init__()
        channels = tuple(channels)
        if len(channels) != 3:
            raise ShapeError(f"MultiScaleAttention needs exactly 3 scales, got {len(channels)}")
        self.channels = channels
        self.gates = nn.ModuleList(nn.Conv2d(c, c, kernel_size=1, bias=True) for c in channels)

    def forward(self, maps):
        maps = list(maps)
        if len(maps) != 3:
            raise ShapeError(f"MultiScaleAttention expects 3 feature maps, got {len(maps)}")
        out = []
        for s, (x, gate) in enumerate(zip(maps, self.gates)):
            _check_channels(x, self.channels[s], f"MultiScaleAttention[{s}]")
            out.append(x * torch.sigmoid(gate(x)))
        return out


class ResidualAttentionBlock(nn.Module):
    """Residual block whose branch output is channel-gated before the skip add."""

    def __init__(self, channels, reduction=16):
        super().__init__()
        self.channels = channels
        self.residual = ResidualBlock(channels)
        self.attention = ChannelAttention(channels, reduction)

    def forward(self, x):
        _check_channels(x, self.channels, "ResidualAttentionBlock")
        _check_finite(x, "ResidualAttentionBlock")
        return x + self.attention(self.residual.branch(x))


class DomainClassifier(nn.Module):
    """
    Auxiliary head predicting which domain a feature map came from.

    A feature path (7x7 then 5x5 conv, ReLU after each) is average-pooled to a
    vector; an attention path applies another 7x7/5x5 conv pair to the same
    features and is pooled as well. The two pooled vectors are multiplied
    elementwise and passed to a linear head. All convs use stride 2 with
    "same"-style padding.

    forward returns softmax probabilities of shape (B, num_domains);
    ``logits`` exposes the pre-softmax scores.
    """

    def __init__(self, in_channels, num_domains=7, hidden=64):
        super().__init__()
        if num_domains < 1:
            raise ValueError("num_domains must be positive")
        self.in_channels = in_channels
        self.num_domains = num_domains
        self.hidden = hidden
        self.feat_conv7 = nn.Conv2d(in_channels, hidden, 7, stride=2, padding=3)
        self.feat_conv5 = nn.Conv2d(hidden, hidden, 5, stride=2, padding=2)
        self.attn_conv7 = nn.Conv2d(hidden, hidden, 7, stride=2, padding=3)
        self.attn_conv5 = nn.Conv2d(hidden, hidden, 5, stride=2, padding=2)
        self.head = nn.Linear(hidden, num_domains)

    def logits(self, x):
        _check_channels(x, self.in_channels, "DomainClassifier")
        h, w = x.shape[-2:]
        if min(h, w) + 2 * self.feat_conv7.padding[0] < self.feat_conv7.kernel_size[0]:
            raise ShapeError(f"DomainClassifier: spatial extent {h}x{w} too small for a 7x7 kernel")
        feats = F.relu(self.feat_conv5(F.relu(self.feat_conv7(x))))
        pooled = F.adaptive_avg_pool2d(feats, 1).flatten(1)
        attn = F.relu(self.attn_conv5(F.relu(self.attn_conv7(feats))))
        attn = F.adaptive_avg_pool2d(attn, 1).flatten(1)
        return self.head(pooled * attn)

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.scale * grad, None


def grad_reverse(x, scale=1.0):
    """Identity on the forward pass, multiplies the gradient by -scale."""
    return _GradientReversal.apply(x, scale)
