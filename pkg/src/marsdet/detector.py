"""
YOLOv3-style detector with optional residual / attention blocks at the three
head attachment sites and an auxiliary domain classifier per scale.

Scales are always ordered coarse to fine: stride 32, 16, 8.
"""
import math
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import (
    ChannelAttention,
    DomainClassifier,
    MultiScaleAttention,
    ResidualAttentionBlock,
    ResidualBlock,
    grad_reverse,
)
from .boxes import iou_matrix
from .errors import ConfigError, ShapeError

STRIDES = (32, 16, 8)

# canonical YOLOv3 anchors for a 416 input, small to large
YOLOV3_ANCHORS = (
    (10, 13), (16, 30), (33, 23),
    (30, 61), (62, 45), (59, 119),
    (116, 90), (156, 198), (373, 326),
)

URPC_CLASSES = ("echinus", "starfish", "holothurian", "scallop", "waterweeds")


@dataclass(frozen=True)
class ModelConfig:
    use_residual: bool = False
    use_channel_attention: bool = False
    use_residual_attention: bool = False
    use_multi_scale_attention: bool = False
    use_domain: bool = False
    num_classes: int = 5
    num_domains: int = 7
    input_size: int = 416
    backbone: str = "full"
    anchors: Tuple[Tuple[float, float], ...] = YOLOV3_ANCHORS
    attention_reduction: int = 16
    domain_hidden: int = 64

    def __post_init__(self):
        object.__setattr__(self, "anchors", tuple(tuple(float(v) for v in a) for a in self.anchors))

    def violations(self):
        out = []
        if not isinstance(self.input_size, int) or self.input_size <= 0 or self.input_size % 32:
            out.append(f"model.input_size must be a positive multiple of 32, got {self.input_size!r}")
        if len(self.anchors) != 9 or any(len(a) != 2 or min(a) <= 0 for a in self.anchors):
            out.append("model.anchors must be 9 positive (width, height) pairs")
        if self.backbone not in ("full", "toy"):
            out.append(f"model.backbone must be 'full' or 'toy', got {self.backbone!r}")
        if self.num_classes < 1:
            out.append("model.num_classes must be positive")
        if self.num_domains < 1:
            out.append("model.num_domains must be positive")
        if self.attention_reduction < 1:
            out.append("model.attention_reduction must be positive")
        if self.use_residual_attention and self.use_residual and self.use_channel_attention:
            out.append("model.use_residual_attention excludes the separate residual + channel attention pair")
        return out

    def validate(self):
        errs = self.violations()
        if errs:
            raise ConfigError("; ".join(errs), errs)
        return self

    def anchors_for_scale(self, s):
        """The three anchors used at scale s (0 = stride 32)."""
        start = 3 * (2 - s)
        return self.anchors[start:start + 3]

    def grid_sizes(self):
        return tuple(self.input_size // st for st in STRIDES)

    @property
    def outputs_per_anchor(self):
        return 5 + self.num_classes

    def to_dict(self):
        d = asdict(self)
        d["anchors"] = [list(a) for a in self.anchors]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("anchors") is None:
            d.pop("anchors", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}", [f"model.{k}: unknown key" for k in sorted(unknown)])
        return cls(**d)

    def with_flags(self, **flags):
        return replace(self, **flags)


def scaled_anchors(input_size, base=YOLOV3_ANCHORS, base_size=416):
    k = input_size / base_size
    return tuple((round(w * k, 3), round(h * k, 3)) for w, h in base)


def toy_config(input_size=96, **kw):
    """Desk-scale config: toy backbone with anchors rescaled to the input size."""
    kw.setdefault("anchors", scaled_anchors(input_size))
    return ModelConfig(backbone="toy", input_size=input_size, **kw)


def conv_bn(cin, cout, k, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.LeakyReLU(0.1),
    )


class DarknetUnit(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = conv_bn(channels, channels // 2, 1)
        self.conv2 = conv_bn(channels // 2, channels, 3)

    def forward(self, x):
        return x + self.conv2(self.conv1(x))


def _stage(cin, cout, units):
    layers = [conv_bn(cin, cout, 3, stride=2)]
    layers += [DarknetUnit(cout) for _ in range(units)]
    return nn.Sequential(*layers)


class Darknet53(nn.Module):
    out_channels = (256, 512, 1024)

    def __init__(self):
        super().__init__()
        self.stem = conv_bn(3, 32, 3)
        self.stage1 = _stage(32, 64, 1)
        self.stage2 = _stage(64, 128, 2)
        self.stage3 = _stage(128, 256, 8)
        self.stage4 = _stage(256, 512, 8)
        self.stage5 = _stage(512, 1024, 4)

    def forward(self, x):
        x = self.stage2(self.stage1(self.stem(x)))
        c3 = self.stage3(x)
        c4 = self.stage4(c3)
        c5 = self.stage5(c4)
        return c3, c4, c5


class ToyBackbone(nn.Module):
    """Six stages: a stride-1 stem followed by five stride-2 stages."""

    out_channels = (64, 96, 128)

    def __init__(self):
        super().__init__()
        self.stem = conv_bn(3, 16, 3)
        self.stage1 = _stage(16, 24, 0)
        self.stage2 = _stage(24, 32, 1)
        self.stage3 = _stage(32, 64, 1)
        self.stage4 = _stage(64, 96, 1)
        self.stage5 = _stage(96, 128, 1)

    def forward(self, x):
        x = self.stage2(self.stage1(self.stem(x)))
        c3 = self.stage3(x)
        c4 = self.stage4(c3)
        c5 = self.stage5(c4)
        return c3, c4, c5


def _conv_set(cin, width):
    return nn.Sequential(
        conv_bn(cin, width, 1),
        conv_bn(width, width * 2, 3),
        conv_bn(width * 2, width, 1),
        conv_bn(width, width * 2, 3),
        conv_bn(width * 2, width, 1),
    )


class SiteBlocks(nn.Module):
    """The per-site MARS blocks that precede one detection conv."""

    def __init__(self, channels, cfg):
        super().__init__()
        self.residual = ResidualBlock(channels) if cfg.use_residual else None
        self.channel_attention = (
            ChannelAttention(channels, cfg.attention_reduction) if cfg.use_channel_attention else None
        )
        self.residual_attention = (
            ResidualAttentionBlock(channels, cfg.attention_reduction) if cfg.use_residual_attention else None
        )

    def forward(self, x):
        if self.residual is not None:
            x = self.residual(x)
        if self.channel_attention is not None:
            x = self.channel_attention(x)
        if self.residual_attention is not None:
            x = self.residual_attention(x)
        return x


class MarsDetector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        if cfg.backbone == "full":
            self.backbone = Darknet53()
            widths = (512, 256, 128)
        else:
            self.backbone = ToyBackbone()
            widths = (64, 48, 32)
        c3, c4, c5 = self.backbone.out_channels
        self.site_channels = tuple(2 * w for w in widths)
        out_ch = 3 * cfg.outputs_per_anchor

        self.sets = nn.ModuleList([
            _conv_set(c5, widths[0]),
            _conv_set(c4 + widths[1], widths[1]),
            _conv_set(c3 + widths[2], widths[2]),
        ])
        self.routes = nn.ModuleList([conv_bn(widths[0], widths[1], 1), conv_bn(widths[1], widths[2], 1)])
        self.expand = nn.ModuleList(conv_bn(w, 2 * w, 3) for w in widths)
        self.detect = nn.ModuleList(nn.Conv2d(2 * w, out_ch, 1) for w in widths)

        self.sites = nn.ModuleList(SiteBlocks(c, cfg) for c in self.site_channels)
        self.msa = MultiScaleAttention(self.site_channels) if cfg.use_multi_scale_attention else None
        self.domain_heads = None
        if cfg.use_domain:
            self.domain_heads = nn.ModuleList(
                DomainClassifier(c, cfg.num_domains, cfg.domain_hidden) for c in self.site_channels
            )
        # gradient reversal scale for adversarial domain training; 0 disables reversal
        self.domain_grad_reversal = 0.0

    def num_parameters(self):
        return sum(p.numel() for p in self.parameters())

    def features(self, images):
        """Site feature maps right before the three detection convs."""
        size = self.cfg.input_size
        if images.dim() != 4 or images.shape[1] != 3 or tuple(images.shape[-2:]) != (size, size):
            raise ShapeError(f"expected images of shape (B, 3, {size}, {size}), got {tuple(images.shape)}")
        c3, c4, c5 = self.backbone(images)
        maps = []
        x = self.sets[0](c5)
        maps.append(self.sites[0](self.expand[0](x)))
        x = F.interpolate(self.routes[0](x), scale_factor=2, mode="nearest")
        x = self.sets[1](torch.cat([x, c4], dim=1))
        maps.append(self.sites[1](self.expand[1](x)))
        x = F.interpolate(self.routes[1](x), scale_factor=2, mode="nearest")
        x = self.sets[2](torch.cat([x, c3], dim=1))
        maps.append(self.sites[2](self.expand[2](x)))
        if self.msa is not None:
            maps = self.msa(maps)
        return maps

    def forward(self, images):
        """Returns (raw predictions per scale, domain probabilities per scale or None)."""
        maps = self.features(images)
        raw = [det(m) for det, m in zip(self.detect, maps)]
        domains = None
        if self.domain_heads is not None:
            if self.domain_grad_reversal:
                maps = [grad_reverse(m, self.domain_grad_reversal) for m in maps]
            domains = [head(m) for head, m in zip(self.domain_heads, maps)]
        return raw, domains


def build_model(cfg: ModelConfig, seed: int = 0) -> MarsDetector:
    """Construct a detector with initial weights fixed by ``seed``."""
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MarsDetector(cfg)
    return model


@dataclass
class Detection:
    box: Tuple[float, float, float, float]
    class_id: int
    confidence: float
    image_id: Optional[str] = None

    def sort_key(self):
        return (-self.confidence, self.class_id, tuple(self.box))


def split_raw(raw, cfg, s):
    """(B, 3*(5+nc), G, G) -> (B, 3, G, G, 5+nc)."""
    b, ch, g, g2 = raw.shape
    n = cfg.outputs_per_anchor
    expect = cfg.input_size // STRIDES[s]
    if ch != 3 * n or g != expect or g2 != expect:
        raise ShapeError(f"scale {s}: expected (B, {3 * n}, {expect}, {expect}), got {tuple(raw.shape)}")
    return raw.view(b, 3, n, g, g).permute(0, 1, 3, 4, 2)


def decode_boxes(raw, cfg):
    """Decode every anchor of every scale.

    Returns one (boxes, confidence, class_id) tuple per batch item: corner
    boxes (N, 4) clipped to the canvas, confidences (N,) and class ids (N,).
    """
    per_item = None
    for s, r in enumerate(raw):
        p = split_raw(r.detach().to(torch.float64), cfg, s)
        b, _, g, _, _ = p.shape
        stride = STRIDES[s]
        anchors = torch.tensor(cfg.anchors_for_scale(s), dtype=torch.float64)
        gy, gx = torch.meshgrid(torch.arange(g, dtype=torch.float64), torch.arange(g, dtype=torch.float64), indexing="ij")
        cx = (gx + torch.sigmoid(p[..., 0])) * stride
        cy = (gy + torch.sigmoid(p[..., 1])) * stride
        w = anchors[:, 0].view(1, 3, 1, 1) * torch.exp(p[..., 2])
        h = anchors[:, 1].view(1, 3, 1, 1) * torch.exp(p[..., 3])
        obj = torch.sigmoid(p[..., 4])
        cls_prob, cls_id = torch.sigmoid(p[..., 5:]).max(dim=-1)
        conf = obj * cls_prob
        size = float(cfg.input_size)
        boxes = torch.stack([
            (cx - w / 2).clamp(0, size), (cy - h / 2).clamp(0, size),
            (cx + w / 2).clamp(0, size), (cy + h / 2).clamp(0, size),
        ], dim=-1)
        if per_item is None:
            per_item = [[] for _ in range(b)]
        for i in range(b):
            per_item[i].append((boxes[i].reshape(-1, 4), conf[i].reshape(-1), cls_id[i].reshape(-1)))
    out = []
    for parts in per_item:
        out.append(tuple(torch.cat(t).numpy() for t in zip(*parts)))
    return out


def decode_predictions(raw, cfg: ModelConfig, conf_threshold: float = 0.05) -> List[List[Detection]]:
    """Turn raw head outputs into thresholded detections in canvas pixels."""
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError("conf_threshold must lie in [0, 1]")
    if len(raw) != 3:
        raise ShapeError(f"expected 3 scales of raw predictions, got {len(raw)}")
    results = []
    for boxes, conf, cls in decode_boxes(raw, cfg):
        keep = np.nonzero(conf >= conf_threshold)[0]
        dets = [
            Detection(tuple(float(v) for v in boxes[k]), int(cls[k]), float(conf[k]))
            for k in keep
        ]
        results.append(dets)
    return results


def non_max_suppression(dets: List[Detection], iou_threshold: float = 0.45) -> List[Detection]:
    """Greedy per-class NMS.

    Within a class, detections are visited by descending confidence (ties by
    box coordinates) and kept iff their IoU with every kept box of the same
    class is below ``iou_threshold``. Output is ordered by
    (-confidence, class_id, box).
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    kept = []
    by_class = {}
    for d in dets:
        by_class.setdefault(d.class_id, []).append(d)
    for cls_dets in by_class.values():
        cls_dets.sort(key=Detection.sort_key)
        boxes = np.array([d.box for d in cls_dets], dtype=np.float64)
        ious = iou_matrix(boxes, boxes)
        suppressed = np.zeros(len(cls_dets), dtype=bool)
        for i, d in enumerate(cls_dets):
            if suppressed[i]:
                continue
            kept.append(d)
            suppressed |= ious[i] >= iou_threshold
    kept.sort(key=Detection.sort_key)
    return kept
