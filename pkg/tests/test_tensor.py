import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evlume import tensor as T
from evlume.checks import grad_cases, run_grad_suite
from evlume.optim import ParamTree, finite_diff_check
from evlume.tensor import ContractError, NumericError, Tensor

GRAD_TOL = 1e-4


def test_square_gradient():
    x = Tensor(np.array(3.0), requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_relu_inactive_gradient():
    x = Tensor(np.array(-1.0), requires_grad=True)
    T.relu(x).backward()
    assert x.grad == pytest.approx(0.0)


def test_backward_rejects_nonscalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        (x * x).backward()


def test_gradient_accumulates_on_reuse():
    x = Tensor(np.array(2.0), requires_grad=True)
    # f = x*x + 3x -> f' = 2x + 3 = 7
    y = x * x + 3.0 * x
    y.backward()
    assert x.grad == pytest.approx(7.0)


@pytest.mark.parametrize("case", list(grad_cases(np.random.default_rng(0))), ids=lambda c: c[0])
def test_primitive_gradients(case):
    name, arrays, fn = case
    params = ParamTree()
    for pname, arr in arrays.items():
        params.add(pname, Tensor(np.asarray(arr, dtype=np.float64)))
    report = finite_diff_check(fn, params, eps=1e-5, seed=0)
    worst = max(report.values())
    assert worst < GRAD_TOL, f"{name}: worst relative error {worst:.3e}"


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    s = T.softmax(Tensor(rng.normal(size=(7, 9)) * 5), axis=1)
    np.testing.assert_allclose(s.data.sum(axis=1), 1.0, atol=1e-6)


def test_sigmoid_bounded_and_monotone():
    s = T.sigmoid(Tensor(np.array([-50.0, -1.0, 0.0, 1.0, 50.0])))
    assert np.all(s.data >= 0) and np.all(s.data <= 1)
    assert np.all(np.diff(s.data) > 0)
    assert s.data[2] == pytest.approx(0.5)


def test_adaptive_pool_identity():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(3, 5, 7)))
    out = T.adaptive_avg_pool(x, (5, 7))
    np.testing.assert_array_equal(out.data, x.data)


def test_adaptive_pool_rejects_degenerate_target():
    with pytest.raises(ContractError):
        T.adaptive_avg_pool(Tensor(np.ones((1, 4, 4))), (0, 4))


def test_conv2d_same_size_stride1():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(2, 6, 6)))
    w = Tensor(rng.normal(size=(4, 2, 3, 3)))
    assert T.conv2d(x, w, None).shape == (4, 6, 6)


def test_conv2d_halves_at_stride2():
    x = Tensor(np.ones((1, 8, 8)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    assert T.conv2d(x, w, None, stride=2).shape == (1, 4, 4)


def test_conv2d_matches_direct_computation():
    # 1x1 input, 3x3 kernel: only the center tap sees the pixel
    x = Tensor(np.array([[[2.0]]]))
    w = Tensor(np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3))
    out = T.conv2d(x, w, None)
    assert out.data[0, 0, 0] == pytest.approx(2.0 * w.data[0, 0, 1, 1])


def test_conv2d_shape_mismatch():
    with pytest.raises(ContractError):
        T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), None)


def test_determinism_identical_runs():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(3, 8, 8)))
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        loss = T.mean(T.sigmoid(T.conv2d(x, w, None)))
        loss.backward()
        return loss.data.copy(), w.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2) and np.array_equal(g1, g2)


def test_nan_gradient_identifies_op():
    x = Tensor(np.array([np.nan, 1.0]), requires_grad=True)
    with pytest.raises(NumericError, match="op"):
        T.mean(x * x).backward()


def test_bce_clamps_extreme_probabilities():
    p = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    loss = T.bce_loss(p, T.constant(np.array([0.0, 1.0])))
    assert np.isfinite(loss.data)
    loss.backward()
    assert np.all(np.isfinite(p.grad))


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=6), st.integers(min_value=1, max_value=6))
def test_softmax_normalization_property(rows, cols):
    rng = np.random.default_rng(rows * 31 + cols)
    s = T.softmax(Tensor(rng.normal(size=(rows, cols)) * 10), axis=1)
    np.testing.assert_allclose(s.data.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=1, max_value=8), st.integers(min_value=1, max_value=8))
def test_adaptive_pool_mean_preserving_property(h, w):
    # pooling to 1x1 equals the global mean for any input size
    rng = np.random.default_rng(h * 17 + w)
    x = Tensor(rng.normal(size=(2, h, w)))
    out = T.adaptive_avg_pool(x, (1, 1))
    np.testing.assert_allclose(out.data[:, 0, 0], x.data.mean(axis=(1, 2)), atol=1e-12)


def test_grad_suite_all_pass():
    results = run_grad_suite(include_full_forward=False)
    failures = [(n, d) for n, ok, d in results if not ok]
    assert not failures, failures
