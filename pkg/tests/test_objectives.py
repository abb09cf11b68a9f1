import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from replaylab import autodiff as ad
from replaylab.autodiff import Graph, Tensor, backward, check_gradients
from replaylab.errors import DomainError, ShapeError
from replaylab.objectives import dice_loss, dice_score

EPS = 1e-5


def soft_dice_oracle(p, g, eps=EPS):
    p, g = np.ravel(p), np.ravel(g)
    num = 2.0 * sum(a * b for a, b in zip(p, g)) + eps
    den = sum(a * a for a in p) + sum(b * b for b in g) + eps
    return 1.0 - num / den


def test_perfect_overlap_loss_is_zero():
    g = np.random.default_rng(0).random((2, 1, 4, 4))
    assert dice_loss(Tensor(g), g).item() <= 1e-6


def test_disjoint_supports_loss_is_one():
    g = np.zeros((1, 1, 4, 4))
    g[..., :2, :] = 1.0
    assert dice_loss(Tensor(1.0 - g), g).item() == pytest.approx(1.0, abs=1e-6)


def test_half_prediction_worked_example():
    g = np.array([1, 1, 1, 1, 0, 0, 0, 0], dtype=float).reshape(1, 1, 2, 4)
    p = np.full_like(g, 0.5)
    # (2 * 2) / (2 + 4) = 2/3
    loss = dice_loss(Tensor(p), g).item()
    assert loss == pytest.approx(1.0 - (4.0 + EPS) / (6.0 + EPS), abs=1e-12)
    assert loss == pytest.approx(1.0 / 3.0, abs=1e-5)
    assert loss == pytest.approx(soft_dice_oracle(p, g), abs=1e-12)


def test_dice_loss_errors():
    with pytest.raises(ShapeError):
        dice_loss(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 2, 3)))
    with pytest.raises(DomainError):
        dice_loss(Tensor(np.full((1, 1, 2, 2), 1.5)), np.zeros((1, 1, 2, 2)))


def test_dice_loss_gradient_check():
    rng = np.random.default_rng(2)
    p = Tensor(rng.uniform(0.05, 0.95, size=(2, 1, 5, 5)), requires_grad=True)
    g = rng.random((2, 1, 5, 5))
    report = check_gradients(lambda: dice_loss(p, g), {"pred": p}, tolerance=1e-4)
    assert report.ok, report.max_rel_error


def test_score_worked_example():
    a = np.zeros(16)
    b = np.zeros(16)
    a[:4] = 0.9
    b[:8] = 0.8
    assert dice_score(a, b) == pytest.approx(2 * 4 / 12, abs=1e-12)


def test_score_identical_and_empty():
    m = (np.random.default_rng(0).random((8, 8)) > 0.5).astype(float)
    assert dice_score(m, m) == 1.0
    assert dice_score(np.zeros((4, 4)), np.full((4, 4), 0.3)) == 1.0


def test_score_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_score(np.zeros(3), np.zeros(4))


unit = arrays(np.float64, (3, 4), elements=st.floats(0.0, 1.0))


@settings(max_examples=60, deadline=None)
@given(a=unit, b=unit)
def test_score_symmetric_and_bounded(a, b):
    s = dice_score(a, b)
    assert s == dice_score(b, a)
    assert 0.0 <= s <= 1.0


@settings(max_examples=60, deadline=None)
@given(a=unit, b=unit)
def test_loss_bounded_and_matches_oracle(a, b):
    loss = dice_loss(Tensor(a), b).item()
    assert -1e-12 <= loss <= 1.0 + 1e-12
    assert loss == pytest.approx(soft_dice_oracle(a, b), abs=1e-10)


@settings(max_examples=60, deadline=None)
@given(p=unit, g=unit, idx=st.integers(0, 11), bump=st.floats(0.0, 1.0))
def test_raising_pred_on_foreground_never_increases_loss(p, g, idx, bump):
    g = g.copy()
    g.flat[idx] = 1.0
    q = p.copy()
    q.flat[idx] = p.flat[idx] + bump * (1.0 - p.flat[idx])
    assert dice_loss(Tensor(q), g).item() <= dice_loss(Tensor(p), g).item() + 1e-12
