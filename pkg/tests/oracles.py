"""Independent reference implementations used as test oracles.

Nothing here imports the code paths it checks; box overlap, matching,
loss terms and gradients are recomputed from scratch with plain loops.
"""
import math

import torch


def box_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def central_difference_grads(loss_fn, tensors, h=1e-5):
    """Numerical gradient of loss_fn() w.r.t. every element of each tensor."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + h
                up = loss_fn().item()
                flat[k] = orig - h
                down = loss_fn().item()
                flat[k] = orig
                gflat[k] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def relative_error(a, b):
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    num = (a - b).norm().item()
    den = max(a.norm().item(), b.norm().item())
    return 0.0 if den == 0 and num == 0 else num / max(den, 1e-300)


def brute_nms(dets, thr):
    """Per class: walk by (-conf, box); keep iff IoU < thr with every kept box of that class."""
    order = sorted(dets, key=lambda d: (-d.confidence, d.class_id, tuple(d.box)))
    kept = []
    for d in order:
        if all(k.class_id != d.class_id or box_iou(k.box, d.box) < thr for k in kept):
            kept.append(d)
    return kept


def _match_prefix(ranked, gt, thr):
    used = {k: [False] * len(v) for k, v in gt.items()}
    flags = []
    for d in ranked:
        boxes = gt.get(d.image_id, [])
        best, best_iou = None, -1.0
        for n, g in enumerate(boxes):
            o = box_iou(d.box, g)
            if o > best_iou:
                best, best_iou = n, o
        # best box over all ground truth; an already-claimed best is a duplicate
        if best is not None and best_iou >= thr and not used[d.image_id][best]:
            used[d.image_id][best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def brute_ap(dets, gt, thr=0.5):
    """AP by enumerating the ranked list: precision/recall at every prefix
    recomputed from scratch, precision envelope taken as the max over all
    later ranks, area summed over recall increments."""
    num_gt = sum(len(v) for v in gt.values())
    if num_gt == 0:
        return 0.0
    ranked = sorted(dets, key=lambda d: (-d.confidence, str(d.image_id), tuple(d.box)))
    precision, recall = [], []
    for k in range(1, len(ranked) + 1):
        flags = _match_prefix(ranked[:k], gt, thr)
        tp = sum(flags)
        precision.append(tp / k)
        recall.append(tp / num_gt)
    ap, prev_r = 0.0, 0.0
    for k in range(len(ranked)):
        if recall[k] > prev_r:
            ap += (recall[k] - prev_r) * max(precision[k:])
            prev_r = recall[k]
    return ap


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def _bce(z, y):
    p = _sig(z)
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def scalar_loop_loss(raw, obj, ignore, box, cls, num_classes):
    """Detection loss with one python loop per (batch, scale, anchor, cell).

    raw: list of 3 tensors (B, 3*(5+nc), G, G); obj/ignore: (B, 3, G, G)
    bool; box: (B, 3, G, G, 4); cls: (B, 3, G, G, nc).
    Returns (box, objectness, class) sums divided by batch size.
    """
    n = 5 + num_classes
    b_sz = raw[0].shape[0]
    lb = lo = lc = 0.0
    for s in range(3):
        r = raw[s]
        g = r.shape[-1]
        for b in range(b_sz):
            for a in range(3):
                for i in range(g):
                    for j in range(g):
                        v = [r[b, a * n + k, i, j].item() for k in range(n)]
                        pos = bool(obj[s][b, a, i, j])
                        if pos:
                            t = [box[s][b, a, i, j, k].item() for k in range(4)]
                            lb += (_sig(v[0]) - t[0]) ** 2 + (_sig(v[1]) - t[1]) ** 2
                            lb += (v[2] - t[2]) ** 2 + (v[3] - t[3]) ** 2
                            for c in range(num_classes):
                                lc += _bce(v[5 + c], cls[s][b, a, i, j, c].item())
                        if pos or not bool(ignore[s][b, a, i, j]):
                            lo += _bce(v[4], 1.0 if pos else 0.0)
    return lb / b_sz, lo / b_sz, lc / b_sz
