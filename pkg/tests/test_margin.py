import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmdgm import numgrid as ng
from mmdgm.margin import (ClassifierWeights, LossMatrix, balance_penalty, batch_hinge,
                          discriminant, grad_lambda, hard_balance_violation, hat_loss, hinge,
                          l2_reg, pegasos_fit, pegasos_objective, predict, scores)
from mmdgm.numgrid import ContractError, DimensionError, Tape, Tensor
from oracles import central_diff, perceptron_separable, rel_err

ZERO_ONE3 = LossMatrix.zero_one(3)


def _w_for_scores(s):
    """Weights whose discriminant on feature [1] equals ``s``."""
    return ClassifierWeights(np.asarray(s, dtype=float).reshape(-1, 1))


def test_discriminant_examples():
    assert not discriminant(ClassifierWeights.zeros(3, 4), np.ones(4)).any()
    w = ClassifierWeights(np.eye(2))
    assert discriminant(w, [3.0, 4.0]).tolist() == [3.0, 4.0]
    with pytest.raises(DimensionError):
        discriminant(w, np.ones(3))


def test_discriminant_matches_loop():
    rng = np.random.default_rng(0)
    lam, f = rng.standard_normal((4, 6)), rng.standard_normal(6)
    ref = [sum(lam[y, j] * f[j] for j in range(6)) for y in range(4)]
    np.testing.assert_allclose(discriminant(ClassifierWeights(lam), f), ref, rtol=1e-13)


def test_predict_examples():
    assert predict(ClassifierWeights.zeros(3, 2), np.ones(2)) == 0
    assert predict(ClassifierWeights(np.eye(2)), [3.0, 4.0]) == 1
    w = ClassifierWeights(np.array([[1.0], [1.0], [0.0]]))
    assert predict(w, [2.0]) == 0  # tie between 0 and 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_predict_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    lam, f = rng.standard_normal((5, 3)), rng.standard_normal((7, 3))
    assert np.array_equal(predict(ClassifierWeights(lam), f), predict(ClassifierWeights(c * lam), f))


def test_hinge_examples():
    assert hinge(_w_for_scores([2.0, 0.5, 0.3]), [[1.0]], 0, ZERO_ONE3) == (0.0, 0)
    v, ya = hinge(_w_for_scores([0.2, 0.5, 0.3]), [[1.0]], 0, ZERO_ONE3)
    assert v == pytest.approx(1.3) and ya == 1
    assert hinge(_w_for_scores([0.7]), [[1.0]], 0, LossMatrix.zero_one(1)) == (0.0, 0)
    with pytest.raises(ValueError):
        hinge(_w_for_scores([0.2, 0.5, 0.3]), [[1.0]], 3, ZERO_ONE3)


def test_hinge_averages_feature_samples():
    w = ClassifierWeights(np.array([[1.0, 0.0], [0.0, 1.0]]))
    samples = np.array([[1.0, 3.0], [3.0, 1.0]])
    v, ya = hinge(w, samples, 0, LossMatrix.zero_one(2))
    assert (v, ya) == (1.0, 1)  # averaged scores tie at 2, so the margin term is 0


def _enumerate_hinge(s, y, delta):
    vals = [delta[y, c] + s[c] - s[y] for c in range(len(s))]
    best = max(vals)
    return best, vals.index(best)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 10))
def test_loss_augmented_label_is_brute_force_maximizer(seed, M):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(M)
    s[rng.integers(M)] = s[0]  # encourage ties
    delta = rng.random((M, M)) * 2
    np.fill_diagonal(delta, 0.0)
    y = int(rng.integers(M))
    v, ya = batch_hinge(Tensor(s[None, :]), [y], LossMatrix(delta))
    ref_v, ref_ya = _enumerate_hinge(s, y, delta)
    assert float(v.value[0]) == pytest.approx(ref_v, abs=1e-12)
    assert int(ya[0]) == ref_ya


def test_hinge_upper_bounds_training_error_property():
    rng = np.random.default_rng(123)
    for _ in range(2000):
        M, F = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        w = ClassifierWeights(rng.standard_normal((M, F)))
        feats = rng.standard_normal((int(rng.integers(1, 4)), F))
        y = int(rng.integers(M))
        loss = LossMatrix.zero_one(M)
        v, _ = hinge(w, feats, y, loss)
        yp = int(predict(w, feats.mean(axis=0)))
        assert v >= loss.delta[y, yp] - 1e-12
        assert v >= 0.0


def test_grad_lambda_examples():
    assert not grad_lambda(1, 1, [[1.0, 2.0]], 3).any()
    g = grad_lambda(1, 0, [[1.0, 2.0]], 2)
    assert g.tolist() == [[-1.0, -2.0], [1.0, 2.0]]


def test_grad_lambda_matches_finite_differences():
    rng = np.random.default_rng(4)
    lam = rng.standard_normal((4, 3))
    feats = rng.standard_normal((5, 3))
    loss = LossMatrix.zero_one(4)
    for y in range(4):
        v, ya = hinge(ClassifierWeights(lam), feats, y, loss)
        fd = central_diff(lambda: hinge(ClassifierWeights(lam), feats, y, loss)[0], lam, h=1e-7)
        np.testing.assert_allclose(grad_lambda(ya, y, feats, 4), fd, atol=1e-6)


def test_batch_hinge_tensor_gradient():
    rng = np.random.default_rng(5)
    lam = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    f = rng.standard_normal((6, 4))
    y = rng.integers(0, 3, size=6)
    with Tape() as tape:
        rows, ya = batch_hinge(scores(lam, f), y, ZERO_ONE3)
        tape.backward(ng.reduce_sum(rows))
    ref = sum(grad_lambda(int(a), int(t), f[i:i + 1], 3) for i, (a, t) in enumerate(zip(ya, y)))
    np.testing.assert_allclose(lam.grad, ref, atol=1e-14)


def test_hat_loss_examples():
    v, yh, ya = hat_loss(_w_for_scores([2.0, 0.5, 0.3]), [[1.0]], ZERO_ONE3)
    assert (v, yh, ya) == (0.0, 0, 0)
    v, yh, ya = hat_loss(_w_for_scores([0.6, 0.5, 0.3]), [[1.0]], ZERO_ONE3)
    assert yh == 0 and ya == 1 and v == pytest.approx(0.9)
    v, yh, _ = hat_loss(ClassifierWeights.zeros(3, 2), [[1.0, 1.0]], ZERO_ONE3)
    assert (v, yh) == (1.0, 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8))
def test_hat_loss_range_and_margin_property(s):
    v, yh, _ = hat_loss(_w_for_scores(s), [[1.0]], LossMatrix.zero_one(len(s)))
    assert 0.0 <= v <= 1.0 + 1e-12
    top, runner = sorted(s, reverse=True)[:2]
    if top - runner >= 1.0:
        assert v == 0.0


def test_balance_penalty_cases():
    rng = np.random.default_rng(6)
    w = ClassifierWeights(rng.standard_normal((2, 3)))
    feats = rng.standard_normal((4, 3))
    labels = [0, 1, 1, 0]
    labeled = list(zip(feats, labels))
    assert balance_penalty(w, labeled, labeled[::-1]) == pytest.approx(0.0, abs=1e-15)
    assert balance_penalty(ClassifierWeights.zeros(2, 3), labeled, labeled[:2]) == 0.0
    with pytest.raises(ContractError):
        balance_penalty(w, [], labeled)


def test_balance_penalty_two_class_accumulation():
    lam = np.array([[1.0, -1.0], [0.5, 2.0]])
    labeled = [(np.array([1.0, 0.0]), 0), (np.array([0.0, 1.0]), 1), (np.array([2.0, 1.0]), 1)]
    unlabeled = [(np.array([1.0, 1.0]), 1), (np.array([3.0, 0.0]), 0)]
    acc_l, acc_u = [0.0, 0.0], [0.0, 0.0]
    for f, y in labeled:
        acc_l[y] += sum(lam[y, j] * f[j] for j in range(2))
    for f, y in unlabeled:
        acc_u[y] += sum(lam[y, j] * f[j] for j in range(2))
    ref = sum((acc_u[y] / 2 - acc_l[y] / 3) ** 2 for y in range(2)) ** 0.5
    assert balance_penalty(ClassifierWeights(lam), labeled, unlabeled) == pytest.approx(ref, abs=1e-14)


def test_hard_balance_violation():
    assert hard_balance_violation([0, 1], [1, 0, 0, 1], 2) == 0.0
    assert hard_balance_violation([0, 1], [0, 0], 2) == pytest.approx(np.sqrt(0.5))


def test_l2_reg():
    assert l2_reg(ClassifierWeights.zeros(2, 2)) == 0.0
    assert l2_reg(ClassifierWeights([[1.0, 1.0]], sigma_sq=1.0)) == 1.0
    rng = np.random.default_rng(7)
    lam = rng.standard_normal((3, 2))
    ref = sum(v * v for v in lam.ravel()) / (2 * 0.3)
    assert l2_reg(ClassifierWeights(lam, 0.3)) == pytest.approx(ref, rel=1e-13)


def test_loss_matrix_validation():
    with pytest.raises(ValueError):
        LossMatrix(np.ones((2, 2)))
    with pytest.raises(ValueError):
        LossMatrix(np.array([[0.0, -1.0], [1.0, 0.0]]))
    with pytest.raises(DimensionError):
        LossMatrix(np.zeros((2, 3)))


def _sign_toy(n=200, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(n, 2))
    x[:, 1] += np.sign(x[:, 1]) * 0.1
    y = (x[:, 1] > 0).astype(int)
    return x, y


def test_pegasos_separable_toy_reaches_zero_error():
    x, y = _sign_toy()
    assert perceptron_separable(x, y)
    w = pegasos_fit(x, y, reg=1e-3, epochs=20, seed=0)
    assert np.mean(predict(w, x) != y) == 0.0


def test_pegasos_single_point_and_objective():
    w = pegasos_fit(np.array([[1.0, -2.0]]), np.array([1]), reg=0.1, epochs=5, n_classes=3)
    assert predict(w, [1.0, -2.0]) == 1
    x, y = _sign_toy(seed=1)
    w = pegasos_fit(x, y, reg=0.01, epochs=10, seed=3)
    assert pegasos_objective(w, x, y, 0.01) <= pegasos_objective(ClassifierWeights.zeros(2, 2), x, y, 0.01)


def test_pegasos_is_deterministic():
    x, y = _sign_toy(seed=2)
    a = pegasos_fit(x, y, reg=0.01, epochs=3, seed=9).lam
    b = pegasos_fit(x, y, reg=0.01, epochs=3, seed=9).lam
    assert np.array_equal(a, b)
