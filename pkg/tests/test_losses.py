import math

import numpy as np
import pytest
import torch

from vismotor import losses as L
from vismotor.boxes import encode
from conftest import random_boxes
from test_boxes import iou_oracle

GRID_P = [1e-6, 0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 1 - 1e-6]
GRID_ALPHA = [0.0, 0.25, 0.5, 0.75, 1.0]
GRID_GAMMA = [0.0, 0.5, 1.0, 2.0, 5.0]


def focal_direct(p, y, alpha, gamma, balanced=False):
    p = min(max(p, 1e-7), 1 - 1e-7)
    pt = p if y == 1 else 1 - p
    a = alpha if (y == 1 or not balanced) else 1 - alpha
    return -a * (1 - pt) ** gamma * math.log(pt)


def test_focal_grid():
    for p in GRID_P:
        for y in (0, 1):
            for a in GRID_ALPHA:
                for g in GRID_GAMMA:
                    for bal in (False, True):
                        got = float(L.focal_loss(torch.tensor(p, dtype=torch.float64), torch.tensor(float(y)),
                                                 L.FocalParams(a, g, bal)))
                        assert abs(got - focal_direct(p, y, a, g, bal)) <= 1e-9


def test_focal_reference_value():
    v = float(L.focal_loss(torch.tensor(0.5, dtype=torch.float64), torch.tensor(1.0)))
    assert v == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-12)
    # gamma 0, alpha 1 reduces to cross entropy
    v = float(L.focal_loss(torch.tensor(0.3, dtype=torch.float64), torch.tensor(0.0), L.FocalParams(1.0, 0.0)))
    assert v == pytest.approx(-math.log(0.7), abs=1e-12)


def test_focal_params_validated():
    with pytest.raises(ValueError):
        L.FocalParams(alpha=1.5)
    with pytest.raises(ValueError):
        L.FocalParams(gamma=-1)


def test_smooth_l1_and_mse_hand_values():
    assert float(L.smooth_l1(torch.tensor(0.5))) == 0.125
    assert float(L.smooth_l1(torch.tensor(2.0))) == 1.5
    assert float(L.smooth_l1(torch.tensor(-2.0))) == 1.5
    mse = L.visuomotor_mse(torch.tensor([[0.0, 1.0, 0.5, 0.5, 0.5, 0.5]]), torch.full((1, 6), 0.5))
    assert float(mse) == pytest.approx(0.5 / 6)


def test_combined_loss_masking():
    sl1, fl, mse = torch.tensor(2.0), torch.tensor(3.0), torch.tensor(0.5)
    total, parts = L.combined_loss(sl1, fl, mse, L.CombinedLossWeights(2.0, 1.0, 4.0))
    assert float(total) == 2 * 2 + 3 + 4 * 0.5
    assert parts == {"sl1": 2.0, "fl": 3.0, "mse": 0.5}
    w = L.CombinedLossWeights.for_tasks(["vis"])
    total, parts = L.combined_loss(None, torch.tensor(float("nan")), mse, w)
    assert float(total) == 0.5 and set(parts) == {"mse"}
    total, parts = L.combined_loss(None, None, None, L.CombinedLossWeights(mask=(False, False, False)))
    assert float(total) == 0.0 and parts == {}
    with pytest.raises(ValueError):
        L.combined_loss(None, fl, mse)
    with pytest.raises(ValueError):
        L.combined_loss(torch.tensor(-1.0), fl, mse)
    with pytest.raises(ValueError):
        L.CombinedLossWeights(-1.0)
    with pytest.raises(ValueError):
        L.CombinedLossWeights.for_tasks(["vis", "depth"])


def assign_oracle(anchors, gts, classes):
    labels, deltas = [], []
    for a in anchors:
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            v = iou_oracle(a, g)
            if v > best:
                best, best_j = v, j
        if best >= 0.5:
            labels.append(classes[best_j])
            deltas.append(encode([gts[best_j]], [a])[0])
        elif best < 0.4:
            labels.append(L.NEGATIVE)
            deltas.append(np.zeros(4))
        else:
            labels.append(L.IGNORE)
            deltas.append(np.zeros(4))
    return np.array(labels), np.array(deltas)


def test_assignment_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(500):
        gts = random_boxes(rng, rng.integers(1, 6))
        anchors = np.vstack([random_boxes(rng, rng.integers(1, 6)), gts + rng.normal(0, 2, gts.shape)])
        anchors[:, 2:] = np.maximum(anchors[:, 2:], anchors[:, :2] + 1)
        classes = rng.integers(0, 16, len(gts))
        t = L.assign_targets(anchors, gts, classes)
        labels, deltas = assign_oracle(anchors, gts, classes)
        assert np.array_equal(t.labels, labels)
        assert np.allclose(t.deltas, deltas, atol=1e-12)
        assert t.num_positive == int((labels >= 0).sum())


def test_assignment_without_ground_truth():
    t = L.assign_targets(np.array([[0, 0, 10, 10.0]]), np.zeros((0, 4)), [])
    assert t.labels.tolist() == [L.NEGATIVE] and t.num_positive == 0


def test_classification_loss_normalization():
    scores = torch.tensor([[0.9, 0.2], [0.3, 0.1], [0.6, 0.6], [0.2, 0.7]], dtype=torch.float64)
    labels = torch.tensor([0, L.NEGATIVE, L.IGNORE, 1])
    p = L.FocalParams()
    expect = (focal_direct(0.9, 1, .25, 2) + focal_direct(0.2, 0, .25, 2)
              + focal_direct(0.3, 0, .25, 2) + focal_direct(0.1, 0, .25, 2)
              + focal_direct(0.2, 0, .25, 2) + focal_direct(0.7, 1, .25, 2)) / 2
    assert float(L.classification_loss(scores, labels, p)) == pytest.approx(expect, abs=1e-12)


def test_regression_loss_positive_only():
    pred = torch.tensor([[0.5, 0.0, 0.0, 0.0], [9.0, 9.0, 9.0, 9.0], [2.0, 0.0, 0.0, 0.0]])
    target = torch.zeros(3, 4)
    labels = torch.tensor([3, L.NEGATIVE, 5])
    assert float(L.regression_loss(pred, target, labels)) == pytest.approx((0.125 + 1.5) / 2)
    assert float(L.regression_loss(pred, target, torch.tensor([-1, -1, -2]))) == 0.0


# ---------------------------------------------------------------------------
# gradient checks in float64 against central differences

def _fd_check(fn, x, h=1e-6, rtol=1e-4):
    x = x.clone().double().requires_grad_(True)
    fn(x).sum().backward()
    analytic = x.grad.detach().clone()
    numeric = torch.zeros_like(analytic)
    flat = x.detach().clone().view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            up, dn = flat.clone(), flat.clone()
            up[i] += h
            dn[i] -= h
            numeric.view(-1)[i] = (fn(up.view_as(x)).sum() - fn(dn.view_as(x)).sum()) / (2 * h)
    err = (analytic - numeric).abs() / torch.clamp(numeric.abs(), min=1e-3)
    assert float(err.max()) <= rtol, float(err.max())
    return flat.numel()


def test_gradients_match_finite_differences():
    gen = torch.Generator().manual_seed(0)
    n = 0
    p = torch.rand(30, generator=gen, dtype=torch.float64) * 0.9 + 0.05
    y = (torch.rand(30, generator=gen) > 0.5).double()
    n += _fd_check(lambda v: L.focal_loss(v, y, L.FocalParams(0.25, 2.0)), p)
    n += _fd_check(lambda v: L.focal_loss(v, y, L.FocalParams(0.25, 2.0, True)), p)
    x = torch.rand(30, generator=gen, dtype=torch.float64) * 6 - 3
    x = x[(x.abs() - 1).abs() > 0.05]  # stay clear of the kinks
    n += _fd_check(L.smooth_l1, x)
    t = torch.rand(4, 6, generator=gen, dtype=torch.float64)
    n += _fd_check(lambda v: L.visuomotor_mse(v, t), torch.rand(4, 6, generator=gen, dtype=torch.float64))
    assert n >= 20


def test_visuomotor_head_input_gradients(tiny_config):
    from vismotor.model import VisuomotorHead

    torch.manual_seed(0)
    head = VisuomotorHead(tiny_config).double()
    gen = torch.Generator().manual_seed(1)
    pyramid = [torch.randn(1, tiny_config.fpn_channels, s, s, generator=gen, dtype=torch.float64) for s in (4, 2, 2, 1, 1)]
    goal = torch.randn(1, tiny_config.encoder_width, generator=gen, dtype=torch.float64)
    n = _fd_check(lambda g: head(pyramid, g), goal)
    n += _fd_check(lambda f: head([f, *pyramid[1:]], goal), pyramid[0][:, :, :2, :2])
    assert n >= 20
