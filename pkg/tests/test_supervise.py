import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from punet.supervise import class_weights, focal_loss, one_hot


def test_class_weights_rules():
    masks = np.zeros((2, 2, 2), int)
    masks[:, 0] = 1
    assert np.allclose(class_weights(masks, [0, 1]), [1.0, 1.0])
    m = np.zeros((1, 10, 10), int)
    m[0, :1] = 1  # 90% background, 10% foreground
    a = class_weights(m, [0, 1])
    assert a[1] / a[0] == pytest.approx(9.0)
    assert a.mean() == pytest.approx(1.0)
    with pytest.raises(ValueError, match="class 2"):
        class_weights(m, [0, 1, 2])


def test_class_weights_clip():
    m = np.zeros((1, 100, 100), int)
    m[0, 0, 0] = 1
    a = class_weights(m, [0, 1])
    assert a[1] / a[0] == pytest.approx(10.0)


def test_focal_perfect_is_zero():
    y = one_hot(torch.tensor([[[0, 1], [1, 0]]]), [0, 1])
    assert focal_loss(y.clone(), y, 4.0).item() == 0.0


def test_focal_hand_value():
    p = torch.tensor([[[[0.5, 0.5]]]], dtype=torch.float64)
    y = torch.tensor([[[[0.0, 1.0]]]], dtype=torch.float64)
    assert abs(focal_loss(p, y, 4.0).item() - 0.5**4 * math.log(2)) < 1e-12
    assert abs(focal_loss(p, y, 4.0).item() - 0.04332) < 1e-5


@given(seed=st.integers(0, 10_000))
def test_gamma_zero_is_cross_entropy(seed):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, 3, 4, 5, generator=g, dtype=torch.float64)
    labels = torch.randint(0, 5, (2, 3, 4), generator=g)
    probs = torch.softmax(logits, -1)
    ours = focal_loss(probs, one_hot(labels, range(5)).double(), 0.0).item()
    p = probs.numpy().reshape(-1, 5)
    oracle = -np.mean(np.log(p[np.arange(len(p)), labels.numpy().ravel()]))
    assert abs(ours - oracle) < 1e-8


@given(seed=st.integers(0, 10_000), gamma=st.floats(0.0, 5.0))
def test_nonnegative_and_monotone(seed, gamma):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(3))
    y = torch.tensor([[[[1.0, 0.0, 0.0]]]], dtype=torch.float64)
    prev = None
    for q in np.linspace(p[0], 1.0, 8):
        rest = p[1:] / p[1:].sum() * (1 - q)
        probs = torch.tensor([[[[q, *rest]]]], dtype=torch.float64)
        loss = focal_loss(probs, y, gamma).item()
        assert loss >= 0
        if prev is not None:
            assert loss <= prev + 1e-12
        prev = loss


def test_alpha_and_valid_and_shape():
    p = torch.tensor([[[[0.5, 0.5], [0.2, 0.8]]]])
    y = torch.tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
    base = focal_loss(p, y, 0.0, torch.tensor([2.0, 1.0]))
    assert base.item() == pytest.approx((2 * math.log(2) + -math.log(0.8)) / 2, rel=1e-6)
    only_first = focal_loss(p, y, 0.0, valid=torch.tensor([[[True, False]]]))
    assert only_first.item() == pytest.approx(math.log(2), rel=1e-6)
    with pytest.raises(ValueError):
        focal_loss(p, y[..., :1], 2.0)
