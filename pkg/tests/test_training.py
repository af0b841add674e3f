import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from marsdet.data import DetectionDataset, generate_synthetic_dataset
from marsdet.detector import ModelConfig, build_model, decode_predictions, toy_config
from marsdet.errors import DataError, TrainingError
from marsdet.training import (
    TargetAssignment,
    TrainConfig,
    assign_targets,
    batch_targets,
    compute_loss,
    detection_loss,
    domain_loss,
    fit,
    targets_to_raw,
)

from oracles import relative_error, scalar_loop_loss


def random_gt(rng, size, n, min_side=4):
    gt = []
    for _ in range(n):
        w, h = rng.uniform(min_side, size / 2, 2)
        x0, y0 = rng.uniform(0, size - w), rng.uniform(0, size - h)
        gt.append(((float(x0), float(y0), float(x0 + w), float(y0 + h)), int(rng.integers(5))))
    return gt


# --- assignment ---------------------------------------------------------------

def test_empty_ground_truth():
    t = assign_targets([], ModelConfig())
    assert not any(m.any() for m in t.obj_mask)
    assert t.positives == []


def test_anchor_matched_box_at_centre():
    t = assign_targets([((150, 163, 266, 253), 0)], ModelConfig())
    assert len(t.positives) == 1
    _, _, s, a, i, j = t.positives[0]
    assert (s, a, i, j) == (0, 0, 6, 6)
    assert t.box[0][0, 0, 6, 6].tolist() == pytest.approx([0.5, 0.5, 0.0, 0.0], abs=1e-12)
    assert t.cls[0][0, 0, 6, 6].tolist() == [1, 0, 0, 0, 0]


def test_degenerate_box_names_image():
    with pytest.raises(DataError, match="img_7"):
        assign_targets([((10, 10, 10, 30), 1)], ModelConfig(), image_id="img_7")


def test_box_outside_canvas_rejected():
    with pytest.raises(DataError):
        assign_targets([((-5, 0, 20, 20), 0)], toy_config(64))


def test_colliding_boxes_take_next_free_anchor():
    cfg = ModelConfig()
    box = ((150, 163, 266, 253), 0)
    t = assign_targets([box, box], cfg)
    assert len(t.positives) == 2
    assert len({p[2:] for p in t.positives}) == 2


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 9))
def test_assignment_completeness_and_disjoint_masks(seed, n):
    cfg = toy_config(64)
    gt = random_gt(np.random.default_rng(seed), 64, n, min_side=1)
    t = assign_targets(gt, cfg)
    assert sum(int(m.sum()) for m in t.obj_mask) == n
    for obj, ign in zip(t.obj_mask, t.ignore_mask):
        assert not (obj & ign).any()


def test_ignore_mask_marks_close_anchors():
    cfg = ModelConfig()
    # between two stride-8 anchors (10,13) and (16,30): several anchors overlap >= 0.5 in shape
    t = assign_targets([((100, 100, 113, 120), 0)], cfg, TrainConfig(ignore_iou_threshold=0.3))
    assert sum(int(m.sum()) for m in t.ignore_mask) >= 1


def test_encode_decode_round_trip():
    cfg = toy_config(96)
    rng = np.random.default_rng(0)
    for _ in range(50):
        (box, c), = random_gt(rng, 96, 1, min_side=2)
        t = assign_targets([(box, c)], cfg)
        (dets,) = decode_predictions(targets_to_raw(t, cfg), cfg, 0.5)
        assert len(dets) == 1 and dets[0].class_id == c
        err = np.linalg.norm(np.subtract(dets[0].box, box)) / np.linalg.norm(box)
        assert err < 1e-4


# --- detection loss -----------------------------------------------------------

def test_perfect_fit_limit():
    cfg = toy_config(64)
    t = assign_targets(random_gt(np.random.default_rng(1), 64, 3), cfg)
    parts = detection_loss(targets_to_raw(t, cfg), t, cfg)
    assert parts.box.item() == pytest.approx(0.0, abs=1e-12)
    assert 0 <= parts.cls.item() < 1e-4
    assert 0 <= parts.objectness.item() < 1e-4


def test_correct_rejection_limit():
    cfg = toy_config(64)
    t = assign_targets([], cfg)
    raw = [torch.full((1, 30, g, g), -15.0, dtype=torch.float64) for g in cfg.grid_sizes()]
    assert detection_loss(raw, t, cfg).total.item() < 1e-4


@pytest.mark.parametrize("seed", range(4))
def test_loss_matches_scalar_loop(seed):
    cfg = toy_config(64)
    rng = np.random.default_rng(seed)
    t = TargetAssignment.stack([assign_targets(random_gt(rng, 64, int(rng.integers(0, 4))), cfg) for _ in range(2)])
    g = torch.Generator().manual_seed(seed)
    raw = [torch.randn((2, 30, s, s), generator=g, dtype=torch.float64) * 2 for s in cfg.grid_sizes()]
    parts = detection_loss(raw, t, cfg)
    ref = scalar_loop_loss(raw, t.obj_mask, t.ignore_mask, t.box, t.cls, 5)
    assert parts.box.item() == pytest.approx(ref[0], abs=1e-6)
    assert parts.objectness.item() == pytest.approx(ref[1], abs=1e-6)
    assert parts.cls.item() == pytest.approx(ref[2], abs=1e-6)


# --- domain loss --------------------------------------------------------------

def test_domain_loss_uniform():
    u = [torch.full((1, 7), 1 / 7, dtype=torch.float64)] * 3
    assert domain_loss(u, 3).item() == pytest.approx(math.log(7), abs=1e-12)
    assert math.log(7) == pytest.approx(1.945910, abs=1e-6)


def test_domain_loss_perfect_classifier():
    p = torch.zeros(1, 7, dtype=torch.float64)
    p[0, 2] = 1.0
    assert domain_loss([p, p, p], 2).item() == pytest.approx(0.0, abs=1e-15)


def test_domain_loss_hand_value():
    p = torch.tensor([[0.7, 0.1, 0.05, 0.05, 0.05, 0.025, 0.025]], dtype=torch.float64)
    assert domain_loss([p], 0).item() == pytest.approx(0.356675, abs=1e-6)


def test_domain_loss_label_out_of_range():
    p = torch.full((1, 7), 1 / 7)
    with pytest.raises(DataError):
        domain_loss([p], 7)
    with pytest.raises(DataError):
        domain_loss([p], -1)


# --- whole-model properties ---------------------------------------------------

@pytest.fixture(scope="module")
def tiny_batch():
    ds = DetectionDataset(generate_synthetic_dataset(2, 64, seed=5), 64)
    items = [ds[0], ds[1]]
    return items


def _batch(items, cfg, dtype=torch.float32):
    images = torch.stack([it["image"] for it in items]).to(dtype)
    targets = batch_targets(items, cfg, TrainConfig())
    labels = torch.tensor([it["domain_id"] for it in items])
    return images, targets, labels


def test_breakdown_additivity(tiny_batch):
    cfg = toy_config(64, use_domain=True)
    model = build_model(cfg, 0)
    images, targets, labels = _batch(tiny_batch, cfg)
    parts = compute_loss(model, images, targets, labels, TrainConfig(domain_loss_weight=0.3))
    for v in (parts.box, parts.objectness, parts.cls, parts.domain):
        assert v.item() >= 0
    expected = parts.box + parts.objectness + parts.cls + 0.3 * parts.domain
    assert parts.total.item() == pytest.approx(expected.item(), abs=1e-6)


def test_total_loss_gradient_matches_finite_differences(tiny_batch):
    # a bias shifts every spatial position, so some pre-activation sits within
    # 1e-5 of a ReLU kink; a 1e-6 step stays on one linear piece
    h = 1e-6
    cfg = toy_config(64, use_residual=True, use_channel_attention=True, use_multi_scale_attention=True,
                     use_domain=True)
    model = build_model(cfg, 0).double().eval()
    images, targets, labels = _batch(tiny_batch, cfg, torch.float64)
    tc = TrainConfig(domain_loss_weight=0.5)

    def loss():
        return compute_loss(model, images, targets, labels, tc).total

    loss().backward()
    params = list(model.parameters())
    gen = torch.Generator().manual_seed(0)
    analytic, numeric = [], []
    for _ in range(10):
        p = params[int(torch.randint(len(params), (1,), generator=gen))]
        k = int(torch.randint(p.numel(), (1,), generator=gen))
        analytic.append(p.grad.view(-1)[k].item())
        with torch.no_grad():
            flat = p.view(-1)
            orig = flat[k].item()
            flat[k] = orig + h
            up = loss().item()
            flat[k] = orig - h
            down = loss().item()
            flat[k] = orig
        numeric.append((up - down) / (2 * h))
    assert relative_error(torch.tensor(analytic), torch.tensor(numeric)) < 1e-3


def test_single_step_descent(tiny_batch):
    cfg = toy_config(64)
    images, targets, labels = _batch(tiny_batch, cfg)
    tc = TrainConfig(learning_rate=1e-4)
    ok = 0
    for seed in range(20):
        model = build_model(cfg, seed).train()
        opt = torch.optim.Adam(model.parameters(), lr=tc.learning_rate)
        before = compute_loss(model, images, targets, labels, tc).total
        opt.zero_grad()
        before.backward()
        opt.step()
        with torch.no_grad():
            after = compute_loss(model, images, targets, labels, tc).total
        ok += after.item() <= before.item()
    assert ok >= 19


def test_zero_weight_domain_is_decoupled(tiny_batch):
    on = build_model(toy_config(64, use_domain=True), 0).train()
    off = build_model(toy_config(64), 1).train()
    off.load_state_dict(on.state_dict(), strict=False)
    images, targets, labels = _batch(tiny_batch, on.cfg)
    tc = TrainConfig(domain_loss_weight=0.0)
    compute_loss(on, images, targets, labels, tc).total.backward()
    compute_loss(off, images, targets, labels, tc).total.backward()
    on_params = dict(on.named_parameters())
    for name, p in off.named_parameters():
        assert torch.equal(p.grad, on_params[name].grad), name


# --- fit ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_set():
    return DetectionDataset(generate_synthetic_dataset(4, 64, seed=2), 64)


def test_fit_is_deterministic(small_set, tmp_path):
    tc = TrainConfig(batch_size=2, epochs=2, seed=4)
    a, ha = fit(build_model(toy_config(64, use_domain=True), 0), small_set, tc, out_dir=tmp_path / "a")
    b, hb = fit(build_model(toy_config(64, use_domain=True), 0), small_set, tc, out_dir=tmp_path / "b")
    for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(pa, pb)
    assert [h["total"] for h in ha] == [h["total"] for h in hb]
    assert (tmp_path / "a" / "checkpoint.mars").read_bytes() == (tmp_path / "b" / "checkpoint.mars").read_bytes()


def test_fit_history_and_checkpoints(small_set, tmp_path):
    tc = TrainConfig(batch_size=3, epochs=3, checkpoint_every=2, seed=0)
    _, hist = fit(build_model(toy_config(64), 0), small_set, tc, out_dir=tmp_path)
    assert [h["epoch"] for h in hist] == [0, 1, 2]
    assert hist[-1]["steps"] == 3 * math.ceil(4 / 3)
    lines = (tmp_path / "history.jsonl").read_text().splitlines()
    assert len(lines) == 3
    assert (tmp_path / "checkpoint_epoch2.mars").exists()
    assert (tmp_path / "checkpoint.mars").exists()
    for key in ("box_loss", "objectness_loss", "class_loss", "domain_loss", "total", "wall_time"):
        assert key in hist[0]


def test_fit_callback_can_stop(small_set):
    seen = []
    _, hist = fit(build_model(toy_config(64), 0), small_set, TrainConfig(batch_size=4, epochs=10),
                  callbacks=[lambda e, rec, m: seen.append(e) or e == 1])
    assert seen == [0, 1] and len(hist) == 2


def test_fit_non_finite_loss_names_batch(small_set):
    model = build_model(toy_config(64), 0)
    with torch.no_grad():
        model.detect[0].bias.fill_(float("nan"))
    with pytest.raises(TrainingError, match="batch 0"):
        fit(model, small_set, TrainConfig(batch_size=2, epochs=1))


def test_fit_rejects_empty_dataset():
    empty = DetectionDataset(generate_synthetic_dataset(1, 64, seed=0), 64)
    empty.manifest.records.clear()
    with pytest.raises(DataError):
        fit(build_model(toy_config(64), 0), empty, TrainConfig())
