"""
Target assignment, detection/domain losses and the optimisation loop.
"""
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .boxes import shape_iou
from .detector import STRIDES, ModelConfig, split_raw
from .errors import ConfigError, DataError, ShapeError, TrainingError

log = logging.getLogger(__name__)

LOGIT_CLAMP = 15.0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 300
    domain_loss_weight: float = 0.1
    seed: int = 0
    ignore_iou_threshold: float = 0.5
    adversarial: bool = False
    grad_clip: Optional[float] = None
    max_steps: Optional[int] = None
    checkpoint_every: int = 0
    eval_every: int = 0

    def violations(self):
        out = []
        if not self.learning_rate > 0:
            out.append("train.learning_rate must be > 0")
        if self.batch_size < 1:
            out.append("train.batch_size must be >= 1")
        if self.epochs < 1:
            out.append("train.epochs must be >= 1")
        if self.domain_loss_weight < 0:
            out.append("train.domain_loss_weight must be >= 0")
        if not 0 <= self.ignore_iou_threshold <= 1:
            out.append("train.ignore_iou_threshold must lie in [0, 1]")
        if self.grad_clip is not None and self.grad_clip <= 0:
            out.append("train.grad_clip must be positive when set")
        if self.max_steps is not None and self.max_steps < 1:
            out.append("train.max_steps must be >= 1 when set")
        if self.checkpoint_every < 0 or self.eval_every < 0:
            out.append("train.checkpoint_every and train.eval_every must be >= 0")
        return out

    def validate(self):
        errs = self.violations()
        if errs:
            raise ConfigError("; ".join(errs), errs)
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}", [f"train.{k}: unknown key" for k in sorted(unknown)])
        return cls(**d)


@dataclass
class TargetAssignment:
    """Per-scale training targets, shaped like the split raw predictions.

    obj_mask / ignore_mask: bool (B, 3, G, G)
    box: (B, 3, G, G, 4) holding (x offset in cell, y offset in cell, log w ratio, log h ratio)
    cls: (B, 3, G, G, num_classes) one-hot
    positives: (batch index, gt index, scale, anchor, row, col) per assigned box
    """

    obj_mask: List[torch.Tensor]
    ignore_mask: List[torch.Tensor]
    box: List[torch.Tensor]
    cls: List[torch.Tensor]
    positives: list = field(default_factory=list)

    @property
    def batch_size(self):
        return self.obj_mask[0].shape[0]

    @classmethod
    def stack(cls, items):
        positives = []
        for b, t in enumerate(items):
            positives += [(b,) + p[1:] for p in t.positives]
        return cls(
            obj_mask=[torch.cat([t.obj_mask[s] for t in items]) for s in range(3)],
            ignore_mask=[torch.cat([t.ignore_mask[s] for t in items]) for s in range(3)],
            box=[torch.cat([t.box[s] for t in items]) for s in range(3)],
            cls=[torch.cat([t.cls[s] for t in items]) for s in range(3)],
            positives=positives,
        )


def _empty_assignment(cfg, dtype=torch.float64):
    obj, ign, box, cls = [], [], [], []
    for g in cfg.grid_sizes():
        obj.append(torch.zeros(1, 3, g, g, dtype=torch.bool))
        ign.append(torch.zeros(1, 3, g, g, dtype=torch.bool))
        box.append(torch.zeros(1, 3, g, g, 4, dtype=dtype))
        cls.append(torch.zeros(1, 3, g, g, cfg.num_classes, dtype=dtype))
    return TargetAssignment(obj, ign, box, cls, [])


def _anchor_index(cfg, k):
    """Flat anchor index k in [0, 9) -> (scale, anchor slot)."""
    return 2 - k // 3, k % 3


def assign_targets(gt, cfg: ModelConfig, train_cfg: Optional[TrainConfig] = None, image_id=None):
    """Assign ground-truth boxes of one image to (scale, cell, anchor) triples.

    ``gt`` is a sequence of ((x_min, y_min, x_max, y_max), class_id) in canvas
    pixels. Each box goes to its best shape-IoU anchor; if that triple is
    already taken by an earlier box, the next best free anchor is used.
    Other anchors with shape-IoU above the ignore threshold are excluded from
    the objectness loss at the box's cell.
    """
    train_cfg = train_cfg or TrainConfig()
    t = _empty_assignment(cfg)
    size = cfg.input_size
    for n, (box, cls_id) in enumerate(gt):
        x0, y0, x1, y1 = (float(v) for v in box)
        w, h = x1 - x0, y1 - y0
        if not (w > 0 and h > 0):
            raise DataError(f"image {image_id!r}: degenerate box {tuple(box)} (zero width or height)")
        if x0 < 0 or y0 < 0 or x1 > size or y1 > size:
            raise DataError(f"image {image_id!r}: box {tuple(box)} outside the {size}x{size} canvas")
        if not 0 <= int(cls_id) < cfg.num_classes:
            raise DataError(f"image {image_id!r}: class id {cls_id} out of range")
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        ious = np.array([shape_iou((w, h), a) for a in cfg.anchors])
        order = sorted(range(9), key=lambda k: (-ious[k], k))

        def cell(s):
            g = size // STRIDES[s]
            return min(int(cy // STRIDES[s]), g - 1), min(int(cx // STRIDES[s]), g - 1)

        chosen = None
        for k in order:
            s, a = _anchor_index(cfg, k)
            i, j = cell(s)
            if not t.obj_mask[s][0, a, i, j]:
                chosen = (k, s, a, i, j)
                break
        if chosen is None:
            log.warning("image %r: no free anchor for box %s, dropped", image_id, tuple(box))
            continue
        k, s, a, i, j = chosen
        stride = STRIDES[s]
        aw, ah = cfg.anchors[k]
        t.obj_mask[s][0, a, i, j] = True
        t.box[s][0, a, i, j] = torch.tensor([cx / stride - j, cy / stride - i, math.log(w / aw), math.log(h / ah)], dtype=t.box[s].dtype)
        t.cls[s][0, a, i, j].zero_()
        t.cls[s][0, a, i, j, int(cls_id)] = 1.0
        t.positives.append((0, n, s, a, i, j))
        for k2 in order:
            if k2 != k and ious[k2] >= train_cfg.ignore_iou_threshold:
                s2, a2 = _anchor_index(cfg, k2)
                i2, j2 = cell(s2)
                t.ignore_mask[s2][0, a2, i2, j2] = True
    for s in range(3):
        t.ignore_mask[s] &= ~t.obj_mask[s]
    return t


def targets_to_raw(t: TargetAssignment, cfg: ModelConfig, saturation=LOGIT_CLAMP):
    """Raw prediction tensors that realise the assignment exactly.

    Offsets become logits (clamped to +-saturation), objectness and class
    logits are +-saturation. Decoding the result reproduces the assigned boxes.
    """
    lo, hi = 1 / (1 + math.exp(saturation)), 1 / (1 + math.exp(-saturation))
    raw = []
    n = cfg.outputs_per_anchor
    for s in range(3):
        obj = t.obj_mask[s]
        b, _, g, _ = obj.shape
        p = torch.full((b, 3, g, g, n), -saturation, dtype=torch.float64)
        off = t.box[s][..., :2].clamp(lo, hi)
        p[..., :2] = torch.log(off / (1 - off))
        p[..., 2:4] = t.box[s][..., 2:]
        p[..., 4] = torch.where(obj, saturation, -saturation)
        p[..., 5:] = torch.where(t.cls[s] > 0.5, saturation, -saturation)
        raw.append(p.permute(0, 1, 4, 2, 3).reshape(b, 3 * n, g, g).contiguous())
    return raw


@dataclass
class LossBreakdown:
    box: torch.Tensor
    objectness: torch.Tensor
    cls: torch.Tensor
    domain: torch.Tensor
    total: torch.Tensor
    domain_weight: float = 0.0

    def as_dict(self):
        return {
            "box_loss": self.box.item(),
            "objectness_loss": self.objectness.item(),
            "class_loss": self.cls.item(),
            "domain_loss": self.domain.item(),
            "total": self.total.item(),
        }


def detection_loss(raw, t: TargetAssignment, cfg: ModelConfig) -> LossBreakdown:
    """YOLOv3 loss: squared error on box terms, BCE on objectness and classes.

    Each component is summed over cells and divided by the batch size.
    """
    if len(raw) != 3:
        raise ShapeError(f"expected 3 scales of raw predictions, got {len(raw)}")
    batch = raw[0].shape[0]
    if t.batch_size != batch:
        raise ShapeError(f"targets have batch {t.batch_size}, predictions {batch}")
    zero = raw[0].new_zeros(())
    box_loss, obj_loss, cls_loss = zero, zero, zero
    for s in range(3):
        p = split_raw(raw[s], cfg, s)
        pos = t.obj_mask[s]
        if pos.shape != p.shape[:4]:
            raise ShapeError(f"scale {s}: target grid {tuple(pos.shape)} vs prediction {tuple(p.shape[:4])}")
        tb = t.box[s].to(p.dtype)
        pp = p[pos]
        if pp.numel():
            tp = tb[pos]
            box_loss = box_loss + ((torch.sigmoid(pp[:, :2]) - tp[:, :2]) ** 2).sum() + ((pp[:, 2:4] - tp[:, 2:]) ** 2).sum()
            cls_loss = cls_loss + F.binary_cross_entropy_with_logits(pp[:, 5:], t.cls[s][pos].to(p.dtype), reduction="sum")
        keep = ~t.ignore_mask[s]
        obj_loss = obj_loss + F.binary_cross_entropy_with_logits(p[..., 4][keep], pos[keep].to(p.dtype), reduction="sum")
    box_loss, obj_loss, cls_loss = box_loss / batch, obj_loss / batch, cls_loss / batch
    total = box_loss + obj_loss + cls_loss
    return LossBreakdown(box_loss, obj_loss, cls_loss, zero, total)


def domain_loss(domain_outputs, label):
    """Mean over scales (and batch) of -log p[label].

    ``domain_outputs`` holds one (B, K) probability tensor per scale; ``label``
    is an int or a (B,) integer tensor.
    """
    k = domain_outputs[0].shape[-1]
    labels = torch.as_tensor(label, dtype=torch.long).reshape(-1)
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"domain label out of range [0, {k}): {labels.tolist()}")
    losses = []
    for probs in domain_outputs:
        probs = probs.reshape(-1, k)
        lab = labels.expand(probs.shape[0]) if labels.numel() == 1 else labels
        if lab.shape[0] != probs.shape[0]:
            raise ShapeError(f"{lab.shape[0]} domain labels for a batch of {probs.shape[0]}")
        picked = probs.gather(1, lab.unsqueeze(1))
        tiny = torch.finfo(probs.dtype).tiny
        losses.append(-torch.log(picked.clamp_min(tiny)).mean())
    return torch.stack(losses).mean()


def compute_loss(model, images, targets, domain_labels, train_cfg: TrainConfig):
    raw, domains = model(images)
    parts = detection_loss(raw, targets, model.cfg)
    lam = train_cfg.domain_loss_weight
    if domains is not None:
        parts.domain = domain_loss(domains, domain_labels)
        if lam:
            parts.total = parts.total + lam * parts.domain
    parts.domain_weight = lam
    return parts


def batch_targets(items, cfg, train_cfg):
    return TargetAssignment.stack([
        assign_targets(list(zip(it["boxes"], it["labels"])), cfg, train_cfg, it["image_id"]) for it in items
    ])


def _prepare(dataset, cfg, train_cfg):
    """Materialise images and targets once; photometric content is fixed per record."""
    items = [dataset[i] for i in range(len(dataset))]
    targets = [assign_targets(list(zip(it["boxes"], it["labels"])), cfg, train_cfg, it["image_id"]) for it in items]
    return items, targets


def make_optimizer(model, train_cfg):
    return torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate)


def fit(model, dataset, train_cfg: TrainConfig, callbacks: Sequence[Callable] = (), out_dir=None,
        eval_dataset=None, log_every=0):
    """Train ``model`` with Adam at a fixed learning rate.

    ``dataset`` is indexable and yields dicts with keys image, boxes, labels,
    domain_id, image_id (see :class:`marsdet.data.DetectionDataset`). The batch
    order is a seeded permutation per epoch. Returns (model, history) where
    history has one record per epoch. With ``out_dir`` set, a line-delimited
    history log and checkpoints are written there.

    Callbacks are called as ``cb(epoch, record, model)`` after every epoch;
    a callback returning True ends training after that epoch.
    """
    from .checkpoint import save_checkpoint

    train_cfg.validate()
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    cfg = model.cfg
    model.domain_grad_reversal = 1.0 if train_cfg.adversarial else 0.0
    items, targets = _prepare(dataset, cfg, train_cfg)
    images = torch.stack([it["image"] for it in items])
    domain_ids = torch.tensor([it["domain_id"] for it in items], dtype=torch.long)
    optimizer = make_optimizer(model, train_cfg)
    gen = torch.Generator().manual_seed(train_cfg.seed)

    out = Path(out_dir) if out_dir is not None else None
    hist_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        hist_file = open(out / "history.jsonl", "w")

    history = []
    step = 0
    n = len(items)
    try:
        for epoch in range(train_cfg.epochs):
            t0 = time.perf_counter()
            model.train()
            perm = torch.randperm(n, generator=gen).tolist()
            sums = {}
            nb = 0
            for bi, start in enumerate(range(0, n, train_cfg.batch_size)):
                idx = perm[start:start + train_cfg.batch_size]
                tgt = TargetAssignment.stack([targets[i] for i in idx])
                parts = compute_loss(model, images[idx], tgt, domain_ids[idx], train_cfg)
                if not torch.isfinite(parts.total):
                    ids = [items[i]["image_id"] for i in idx]
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {bi} (step {step}); images {ids}; "
                        f"components {parts.as_dict()}"
                    )
                optimizer.zero_grad(set_to_none=True)
                parts.total.backward()
                if train_cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
                optimizer.step()
                step += 1
                nb += 1
                for key, v in parts.as_dict().items():
                    sums[key] = sums.get(key, 0.0) + v
                if log_every and step % log_every == 0:
                    log.info("step %d loss %.4f", step, float(parts.total))
                if train_cfg.max_steps is not None and step >= train_cfg.max_steps:
                    break
            record = {"epoch": epoch}
            record.update({k: v / nb for k, v in sums.items()})
            record["steps"] = step
            if train_cfg.eval_every and eval_dataset is not None and (epoch + 1) % train_cfg.eval_every == 0:
                from .evaluation import evaluate
                record["map"] = evaluate(model, eval_dataset).map
            record["wall_time"] = time.perf_counter() - t0
            history.append(record)
            if hist_file is not None:
                hist_file.write(json.dumps(record) + "\n")
                hist_file.flush()
            stop = False
            for cb in callbacks:
                stop = bool(cb(epoch, record, model)) or stop
            if out is not None and train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_epoch{epoch + 1}.mars", model, optimizer, epoch=epoch + 1)
            if stop or (train_cfg.max_steps is not None and step >= train_cfg.max_steps):
                break
    finally:
        if hist_file is not None:
            hist_file.close()
    model.eval()
    if out is not None:
        save_checkpoint(out / "checkpoint.mars", model, optimizer, epoch=len(history))
    return model, history
