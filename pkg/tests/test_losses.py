import math

import numpy as np
import pytest

from ufe import autodiff as ad
from ufe.losses import (LossConfig, bce_loss, dice_loss, make_pseudo_label, supervised_loss, total_loss,
                        unsup_loss)

T = ad.Tensor


def direct_bce(p, y):
    p, y = np.asarray(p, float), np.asarray(y, float)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def direct_dice(p, y, eps=1e-7):
    p, y = np.asarray(p, float), np.asarray(y, float)
    return 1 - 2 * (p * y).sum() / (p.sum() + y.sum() + eps)


# ---------------------------------------------------------------------- bce
def test_bce_half_is_ln2():
    y = (np.random.default_rng(0).random((4, 4)) > 0.5).astype(float)
    assert bce_loss(T(np.full((4, 4), 0.5)), y).item() == pytest.approx(math.log(2), abs=1e-6)


def test_bce_tabulated_example():
    value = bce_loss(T(np.array([0.9, 0.2])), np.array([1.0, 0.0])).item()
    assert value == pytest.approx(0.164252, abs=1e-6)
    assert value == pytest.approx(direct_bce([0.9, 0.2], [1, 0]), abs=1e-12)


def test_bce_perfect_prediction_hits_clamp_floor():
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert 0 <= bce_loss(T(y.copy()), y).item() < 1e-6


def test_bce_matches_direct_on_random():
    r = np.random.default_rng(1)
    p, y = r.uniform(0.01, 0.99, (3, 5, 5)), (r.random((3, 5, 5)) > 0.5).astype(float)
    assert bce_loss(T(p), y).item() == pytest.approx(direct_bce(p, y), abs=1e-12)


def test_bce_monotone_towards_target():
    ps = np.linspace(0.05, 0.95, 19)
    for y in (0.0, 1.0):
        vals = [bce_loss(T(np.array([p])), np.array([y])).item() for p in ps]
        diffs = np.diff(vals)
        assert np.all(diffs < 0) if y == 1 else np.all(diffs > 0)


def test_bce_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        bce_loss(T(np.full((2, 2), 0.5)), np.zeros((2, 3)))


# --------------------------------------------------------------------- dice
def test_dice_tabulated_example():
    p, y = np.array([[0.8, 0.6, 0.2, 0.1]]), np.array([[1.0, 1.0, 0.0, 0.0]])
    value = dice_loss(T(p), y).item()
    assert value == pytest.approx(1 - 2.8 / 3.7, abs=1e-6)
    assert value == pytest.approx(0.243243, abs=1e-6)
    assert value == pytest.approx(direct_dice(p, y), abs=1e-12)


def test_dice_perfect_overlap():
    y = np.zeros((4, 4))
    y[1:3, 1:3] = 1
    assert abs(dice_loss(T(y.copy()), y).item()) < 1e-6


def test_dice_empty_target():
    p = np.random.default_rng(2).uniform(0.1, 0.9, (4, 4))
    assert dice_loss(T(p), np.zeros((4, 4))).item() == pytest.approx(1.0)


def test_dice_batched_is_mean_of_items():
    r = np.random.default_rng(3)
    p, y = r.uniform(0.01, 0.99, (3, 4, 4)), (r.random((3, 4, 4)) > 0.5).astype(float)
    expected = np.mean([direct_dice(p[i], y[i]) for i in range(3)])
    assert dice_loss(T(p), y).item() == pytest.approx(expected, abs=1e-12)


def test_loss_bounds_random():
    r = np.random.default_rng(4)
    for _ in range(50):
        p, y = r.uniform(0, 1, (4, 4)), (r.random((4, 4)) > r.random()).astype(float)
        assert bce_loss(T(p), y).item() >= 0
        assert 0 <= dice_loss(T(p), y).item() <= 1 + 1e-6


def test_supervised_kinds():
    p, y = T(np.array([[0.8, 0.6, 0.2, 0.1]])), np.array([[1.0, 1.0, 0.0, 0.0]])
    b, d = bce_loss(p, y).item(), dice_loss(p, y).item()
    assert supervised_loss(p, y, LossConfig(sup_kind="bce")).item() == b
    assert supervised_loss(p, y, LossConfig(sup_kind="dice")).item() == d
    assert supervised_loss(p, y, LossConfig(sup_kind="bce+dice")).item() == pytest.approx(b + d)


@pytest.mark.parametrize("kwargs", [dict(sup_kind="l2"), dict(lam=-1), dict(pseudo_threshold=1.0),
                                    dict(confidence_floor=1.0), dict(unsup_target="fuzzy")])
def test_config_bounds(kwargs):
    with pytest.raises(ValueError):
        LossConfig(**kwargs)


# ------------------------------------------------------------ pseudo labels
def test_pseudo_label_conventions():
    pseudo, valid = make_pseudo_label(np.full((2, 2), 0.5), 0.5)
    np.testing.assert_array_equal(pseudo, 1)
    np.testing.assert_array_equal(valid, 1)
    pseudo, _ = make_pseudo_label(np.array([0.9, 0.1]), 0.5)
    np.testing.assert_array_equal(pseudo, [1, 0])
    _, valid = make_pseudo_label(np.array([0.9, 0.6]), 0.5, confidence_floor=0.8)
    np.testing.assert_array_equal(valid, [1, 0])


# ------------------------------------------------------------------- unsup
def test_unsup_perfect_consistency():
    pw = np.array([[[0.9, 0.2], [0.7, 0.4]]])
    pseudo, _ = make_pseudo_label(pw)
    assert unsup_loss(pw, T(pseudo), LossConfig()).item() < 1e-6


def test_unsup_reuses_bce_arithmetic():
    value = unsup_loss(np.array([[[0.8, 0.3]]]), T(np.array([[[0.9, 0.2]]])), LossConfig()).item()
    assert value == pytest.approx(0.164252, abs=1e-6)


def test_unsup_all_invalid_is_zero():
    pw = np.full((2, 3, 3), 0.6)
    ps = T(np.random.default_rng(0).uniform(0.1, 0.9, (2, 3, 3)), requires_grad=True)
    loss = unsup_loss(pw, ps, LossConfig(confidence_floor=1 - 1e-9))
    assert loss.item() == 0.0
    ad.backward(loss)
    np.testing.assert_array_equal(ps.grad, 0.0)


def test_unsup_empty_batch_is_zero():
    assert unsup_loss(np.zeros((0, 4, 4)), T(np.zeros((0, 4, 4)))).item() == 0.0


def test_unsup_permutation_invariant():
    r = np.random.default_rng(5)
    pw, ps = r.random((4, 5, 5)), r.uniform(0.05, 0.95, (4, 5, 5))
    perm = [2, 0, 3, 1]
    cfg = LossConfig(confidence_floor=0.6)
    a = unsup_loss(pw, T(ps), cfg).item()
    b = unsup_loss(pw[perm], T(ps[perm]), cfg).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_unsup_per_item_average_with_floor():
    r = np.random.default_rng(6)
    pw, ps = r.random((3, 4, 4)), r.uniform(0.05, 0.95, (3, 4, 4))
    cfg = LossConfig(confidence_floor=0.7)
    expected = 0.0
    for i in range(3):
        valid = np.maximum(pw[i], 1 - pw[i]) >= 0.7
        if valid.any():
            expected += direct_bce(ps[i][valid], (pw[i] >= 0.5)[valid].astype(float))
    assert unsup_loss(pw, T(ps), cfg).item() == pytest.approx(expected / 3, abs=1e-12)


def test_unsup_soft_target():
    pw, ps = np.array([[[0.7, 0.2]]]), np.array([[[0.6, 0.3]]])
    value = unsup_loss(pw, T(ps), LossConfig(unsup_target="soft")).item()
    assert value == pytest.approx(direct_bce(ps, pw), abs=1e-12)


def test_unsup_rejects_teacher_with_grad():
    pw = T(np.full((1, 2, 2), 0.7), requires_grad=True)
    with pytest.raises(ValueError):
        unsup_loss(pw, T(np.full((1, 2, 2), 0.5)))


def test_unsup_no_gradient_through_teacher():
    # a teacher built from the same parameter, detached, gives the same student gradient
    r = np.random.default_rng(7)
    w0, x = r.standard_normal((4, 4)), r.standard_normal((1, 4, 4))

    def student_grad(teacher_probs):
        w = T(w0.copy(), requires_grad=True)
        ps = ad.sigmoid(ad.mul(T(x), ad.reshape(w, (1, 4, 4))))
        ad.backward(unsup_loss(teacher_probs, ps))
        return w.grad

    with ad.no_grad():
        tp = ad.sigmoid(ad.mul(T(x), T(w0.reshape(1, 4, 4)))).data
    np.testing.assert_array_equal(student_grad(tp), student_grad(tp.copy()))


# ------------------------------------------------------------------- total
def test_total_loss_examples():
    assert total_loss(0.4, 0.2, 0.5) == pytest.approx(0.5)
    assert total_loss(0.4, 0.2, 0.0) == 0.4
    assert LossConfig().lam == 0.5


def test_total_gradient_is_linear_combination():
    r = np.random.default_rng(8)
    w0, x, y = r.standard_normal((3, 3)), r.standard_normal((3, 3)), (r.random((3, 3)) > 0.5).astype(float)
    pw = r.random((1, 3, 3))

    def grads(which):
        w = T(w0.copy(), requires_grad=True)
        p = ad.sigmoid(w * T(x))
        ls = bce_loss(p, y)
        lu = unsup_loss(pw, ad.reshape(p, (1, 3, 3)))
        ad.backward({"sup": ls, "unsup": lu, "total": total_loss(ls, lu, 0.5)}[which])
        return w.grad

    np.testing.assert_allclose(grads("total"), grads("sup") + 0.5 * grads("unsup"), rtol=1e-12, atol=1e-15)
