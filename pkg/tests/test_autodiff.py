import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dreamaug import autodiff as ad
from dreamaug.errors import ContractError, DimensionError, NumericError
from dreamaug.model import Arch, init_model

from helpers import analytic_grad, conv_oracle, numeric_grad, rel_error


def test_tensor_rejects_non_finite():
    with pytest.raises(NumericError):
        ad.Tensor([1.0, np.nan])
    with pytest.raises(NumericError):
        ad.log(ad.Tensor([0.0]))


def test_tensor_data_is_read_only():
    t = ad.Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


# -- conv2d ------------------------------------------------------------------
def test_conv2d_all_ones():
    out = ad.conv2d(ad.Tensor(np.ones((1, 1, 3, 3))), ad.Tensor(np.ones((1, 1, 3, 3))), ad.Tensor([0.0]))
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 9.0


def test_conv2d_zero_kernel_gives_bias(rng):
    x = ad.Tensor(rng.normal(size=(2, 3, 5, 5)))
    out = ad.conv2d(x, ad.Tensor(np.zeros((4, 3, 3, 3))), ad.Tensor([1.0, -2.0, 0.5, 3.0]), padding=1)
    assert np.array_equal(out.data, np.broadcast_to(np.array([1.0, -2.0, 0.5, 3.0])[None, :, None, None], (2, 4, 5, 5)))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_nested_loops(rng, stride, padding):
    x = rng.uniform(-10, 10, size=(1, 2, 4, 4))
    k = rng.uniform(-10, 10, size=(3, 2, 3, 3))
    b = rng.uniform(-10, 10, size=3)
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(k), ad.Tensor(b), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, conv_oracle(x, k, b, stride, padding), rtol=0, atol=1e-12)


def test_conv2d_output_size_formula(rng):
    x = ad.Tensor(rng.normal(size=(1, 1, 7, 6)))
    out = ad.conv2d(x, ad.Tensor(rng.normal(size=(2, 1, 3, 2))), ad.Tensor(np.zeros(2)), stride=2, padding=1)
    assert out.shape == (1, 2, (7 + 2 - 3) // 2 + 1, (6 + 2 - 2) // 2 + 1)


def test_conv2d_shape_errors(rng):
    x = ad.Tensor(rng.normal(size=(1, 2, 4, 4)))
    with pytest.raises(DimensionError):
        ad.conv2d(x, ad.Tensor(np.zeros((1, 3, 3, 3))), ad.Tensor([0.0]))
    with pytest.raises(DimensionError):
        ad.conv2d(x, ad.Tensor(np.zeros((1, 2, 5, 5))), ad.Tensor([0.0]))
    with pytest.raises(DimensionError):
        ad.conv2d(x, ad.Tensor(np.zeros((1, 2, 3, 3))), ad.Tensor([0.0, 1.0]))


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1)])
def test_conv2d_gradients(rng, stride, padding):
    x = rng.normal(size=(2, 2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    w = rng.normal(size=(2, 3, (5 + 2 * padding - 3) // stride + 1, (5 + 2 * padding - 3) // stride + 1))

    def loss(xv, kv, bv):
        return ad.tsum(ad.conv2d(xv, kv, bv, stride, padding) * ad.Tensor(w))

    def f_np(which):
        def f(v):
            args = [x, k, b]
            args[which] = v
            return loss(*(ad.Tensor(a) for a in args)).item()
        return f

    xt, kt, bt = (ad.Tensor(a, requires_grad=True) for a in (x, k, b))
    loss(xt, kt, bt).backward()
    for which, (t, v) in enumerate([(xt, x), (kt, k), (bt, b)]):
        assert rel_error(t.grad, numeric_grad(f_np(which), v)) < 1e-6


# -- relu / pooling / linear -----------------------------------------------
def test_relu_values():
    assert np.array_equal(ad.relu(ad.Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_relu_all_negative_has_zero_gradient():
    x = ad.Tensor([-1.0, -3.0, -0.5], requires_grad=True)
    out = ad.relu(x)
    ad.tsum(out).backward()
    assert np.array_equal(out.data, np.zeros(3))
    assert np.array_equal(x.grad, np.zeros(3))


def test_relu_subgradient_at_zero_is_zero():
    x = ad.Tensor([0.0, 1.0], requires_grad=True)
    ad.tsum(ad.relu(x)).backward()
    assert np.array_equal(x.grad, [0.0, 1.0])


def test_relu_finite_differences(rng):
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 1e-3] = 0.5
    w = rng.normal(size=(3, 4))
    g = analytic_grad(lambda t: ad.tsum(ad.relu(t) * ad.Tensor(w)), x)
    n = numeric_grad(lambda v: float(np.sum(np.maximum(v, 0) * w)), x)
    assert rel_error(g, n) < 1e-6


def test_avg_pool_values():
    out = ad.avg_pool2d(ad.Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2)
    assert out.data.reshape(-1).tolist() == [2.5]
    const = ad.avg_pool2d(ad.Tensor(np.full((1, 2, 4, 4), 0.7)), 2)
    np.testing.assert_allclose(const.data, 0.7, rtol=0, atol=1e-15)


def test_avg_pool_matches_nested_loops(rng):
    x = rng.uniform(-10, 10, size=(2, 3, 6, 6))
    out = ad.avg_pool2d(ad.Tensor(x), 3).data
    ref = np.zeros((2, 3, 2, 2))
    for a in range(2):
        for c in range(3):
            for i in range(2):
                for j in range(2):
                    s = 0.0
                    for p in range(3):
                        for q in range(3):
                            s += x[a, c, 3 * i + p, 3 * j + q]
                    ref[a, c, i, j] = s / 9
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_avg_pool_gradient_is_uniform():
    x = ad.Tensor(np.arange(16.0).reshape(1, 1, 4, 4), requires_grad=True)
    ad.tsum(ad.avg_pool2d(x, 2)).backward()
    assert np.array_equal(x.grad, np.full((1, 1, 4, 4), 0.25))


def test_pool_indivisible_raises():
    with pytest.raises(DimensionError):
        ad.avg_pool2d(ad.Tensor(np.zeros((1, 1, 5, 4))), 2)
    with pytest.raises(DimensionError):
        ad.max_pool2d(ad.Tensor(np.zeros((1, 1, 4, 3))), 2)


def test_max_pool_values_and_gradient(rng):
    x = rng.normal(size=(2, 2, 4, 4))
    out = ad.max_pool2d(ad.Tensor(x), 2).data
    ref = x.reshape(2, 2, 2, 2, 2, 2).max(axis=(3, 5))
    assert np.array_equal(out, ref)
    w = rng.normal(size=out.shape)
    g = analytic_grad(lambda t: ad.tsum(ad.max_pool2d(t, 2) * ad.Tensor(w)), x)
    n = numeric_grad(lambda v: float(np.sum(v.reshape(2, 2, 2, 2, 2, 2).max(axis=(3, 5)) * w)), x)
    assert rel_error(g, n) < 1e-6


def test_linear_identity_and_bias(rng):
    x = rng.normal(size=(3, 4))
    out = ad.linear(ad.Tensor(x), ad.Tensor(np.eye(4)), ad.Tensor(np.zeros(4)))
    assert np.array_equal(out.data, x)
    b = np.array([1.0, -2.0])
    out = ad.linear(ad.Tensor(x), ad.Tensor(np.zeros((2, 4))), ad.Tensor(b))
    assert np.array_equal(out.data, np.tile(b, (3, 1)))


def test_linear_matches_nested_loops(rng):
    x = rng.uniform(-10, 10, size=(3, 5))
    w = rng.uniform(-10, 10, size=(4, 5))
    b = rng.uniform(-10, 10, size=4)
    ref = np.zeros((3, 4))
    for i in range(3):
        for j in range(4):
            s = b[j]
            for k in range(5):
                s += x[i, k] * w[j, k]
            ref[i, j] = s
    np.testing.assert_allclose(ad.linear(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b)).data, ref, rtol=0, atol=1e-12)


def test_linear_shape_error():
    with pytest.raises(DimensionError):
        ad.linear(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 2))), ad.Tensor(np.zeros(4)))


def test_linear_gradients(rng):
    x, w, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=4)
    up = rng.normal(size=(3, 4))
    xt, wt, bt = (ad.Tensor(a, requires_grad=True) for a in (x, w, b))
    ad.tsum(ad.linear(xt, wt, bt) * ad.Tensor(up)).backward()
    assert rel_error(xt.grad, numeric_grad(lambda v: float(np.sum((v @ w.T + b) * up)), x)) < 1e-6
    assert rel_error(wt.grad, numeric_grad(lambda v: float(np.sum((x @ v.T + b) * up)), w)) < 1e-6
    assert rel_error(bt.grad, numeric_grad(lambda v: float(np.sum((x @ w.T + v) * up)), b)) < 1e-6


# -- norm and cross-entropy --------------------------------------------------
def test_frobenius_norm_values():
    assert ad.frobenius_norm(ad.Tensor([3.0, 4.0])).item() == 5.0
    z = ad.Tensor(np.zeros((2, 3)), requires_grad=True)
    n = ad.frobenius_norm(z)
    assert n.item() == 0.0
    n.backward()
    assert np.array_equal(z.grad, np.zeros((2, 3)))


def test_frobenius_norm_matches_direct_sum(rng):
    x = rng.uniform(-10, 10, size=(2, 3, 4))
    s = 0.0
    for v in x.reshape(-1):
        s += v * v
    assert abs(ad.frobenius_norm(ad.Tensor(x)).item() - math.sqrt(s)) < 1e-12
    per = ad.frobenius_norm(ad.Tensor(x), axis=(1, 2)).data
    np.testing.assert_allclose(per, np.sqrt((x ** 2).sum(axis=(1, 2))), rtol=0, atol=1e-12)


def test_frobenius_gradient(rng):
    x = rng.normal(size=(2, 3))
    g = analytic_grad(lambda t: ad.frobenius_norm(t), x)
    np.testing.assert_allclose(g, x / np.linalg.norm(x), rtol=1e-14)


def test_softmax_ce_uniform_logits():
    loss = ad.softmax_ce(ad.Tensor(np.zeros((3, 4))), np.array([0, 1, 3]))
    assert abs(loss.item() - math.log(4)) < 1e-15
    assert abs(loss.item() - 1.386294) < 1e-6


def test_softmax_ce_saturated():
    logits = np.zeros((2, 3))
    logits[0, 1] = 1000.0
    logits[1, 2] = 1000.0
    assert ad.softmax_ce(ad.Tensor(logits), np.array([1, 2])).item() < 1e-12


def test_softmax_ce_matches_high_precision(rng):
    logits = rng.normal(scale=5.0, size=(6, 5))
    labels = rng.integers(0, 5, size=6)
    mpmath.mp.dps = 50
    total = mpmath.mpf(0)
    for row, y in zip(logits, labels):
        z = sum(mpmath.exp(mpmath.mpf(float(v))) for v in row)
        total += mpmath.log(z) - mpmath.mpf(float(row[y]))
    expected = float(total / len(labels))
    assert abs(ad.softmax_ce(ad.Tensor(logits), labels).item() - expected) < 1e-10


def test_softmax_ce_gradient(rng):
    logits = rng.normal(size=(4, 3))
    labels = np.array([0, 2, 1, 2])

    def f(v):
        m = v.max(axis=1, keepdims=True)
        lse = np.log(np.exp(v - m).sum(axis=1)) + m[:, 0]
        return float(np.mean(lse - v[np.arange(4), labels]))

    g = analytic_grad(lambda t: ad.softmax_ce(t, labels), logits)
    assert rel_error(g, numeric_grad(f, logits)) < 1e-7


def test_softmax_ce_label_out_of_range():
    with pytest.raises(IndexError):
        ad.softmax_ce(ad.Tensor(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(IndexError):
        ad.softmax_ce(ad.Tensor(np.zeros((2, 3))), np.array([-1, 0]))


# -- elementwise ops used by the losses -------------------------------------
ELEMENTWISE = {
    "add": (lambda a, b: a + b, lambda a, b: a + b),
    "sub": (lambda a, b: a - b, lambda a, b: a - b),
    "mul": (lambda a, b: a * b, lambda a, b: a * b),
    "div": (lambda a, b: a / (ad.exp(b) + 1.0), lambda a, b: a / (np.exp(b) + 1.0)),
    "log_mean_exp2": (ad.log_mean_exp2, lambda a, b: np.log((np.exp(a) + np.exp(b)) / 2)),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_elementwise_gradients(rng, name):
    f_t, f_np = ELEMENTWISE[name]
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    at, bt = ad.Tensor(a, requires_grad=True), ad.Tensor(b, requires_grad=True)
    ad.tsum(f_t(at, bt) * ad.Tensor(w)).backward()
    assert rel_error(at.grad, numeric_grad(lambda v: float(np.sum(f_np(v, b) * w)), a)) < 1e-6
    assert rel_error(bt.grad, numeric_grad(lambda v: float(np.sum(f_np(a, v) * w)), b)) < 1e-6


def test_broadcast_gradient_reduces_to_operand_shape(rng):
    a = ad.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = ad.Tensor(rng.normal(size=(3, 1)), requires_grad=True)
    ad.tsum(a * b).backward()
    assert b.grad.shape == (3, 1)
    np.testing.assert_allclose(b.grad[:, 0], a.data.sum(axis=(0, 2)), rtol=1e-13)


def test_log_mean_exp2_exact_on_equal_inputs(rng):
    a = rng.normal(size=10)
    assert np.array_equal(ad.log_mean_exp2(ad.Tensor(a), ad.Tensor(a)).data, a)


@pytest.mark.parametrize("op", ["sqrt", "exp", "log", "softmax", "log_softmax", "mean", "power"])
def test_unary_gradients(rng, op):
    x = rng.uniform(0.5, 2.0, size=(3, 4))
    w = rng.normal(size=(3, 4))
    fns = {
        "sqrt": (ad.sqrt, np.sqrt),
        "exp": (ad.exp, np.exp),
        "log": (ad.log, np.log),
        "softmax": (ad.softmax, lambda v: np.exp(v) / np.exp(v).sum(axis=1, keepdims=True)),
        "log_softmax": (ad.log_softmax, lambda v: v - np.log(np.exp(v).sum(axis=1, keepdims=True))),
        "mean": (lambda t: ad.mean(t, axis=1, keepdims=True) * t, lambda v: v.mean(axis=1, keepdims=True) * v),
        "power": (lambda t: t ** 3.0, lambda v: v ** 3.0),
    }
    f_t, f_np = fns[op]
    g = analytic_grad(lambda t: ad.tsum(f_t(t) * ad.Tensor(w)), x)
    assert rel_error(g, numeric_grad(lambda v: float(np.sum(f_np(v) * w)), x)) < 1e-6


# -- backward ----------------------------------------------------------------
def test_backward_sum_gives_ones():
    x = ad.Tensor(np.zeros((2, 3, 4)), requires_grad=True)
    ad.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_squared_norm():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    (ad.frobenius_norm(x) ** 2.0).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0], rtol=1e-14)


def test_backward_accumulates_until_cleared():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    ad.tsum(x * 3.0).backward()
    ad.tsum(x * 3.0).backward()
    assert np.array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    ad.tsum(x * 3.0).backward()
    assert np.array_equal(x.grad, [3.0, 3.0])


def test_backward_requires_scalar():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_shared_subexpression_visited_once():
    x = ad.Tensor([2.0], requires_grad=True)
    y = x * x
    z = y + y
    ad.tsum(z * y).backward()
    # d/dx (2 x^4) = 8 x^3
    np.testing.assert_allclose(x.grad, [64.0])
    order = ad.topological_order(ad.tsum(z * y))
    assert len(order) == len({id(n) for n in order})


def _tiny_cnn_loss(params, x, y, model):
    return ad.softmax_ce(model.predict_logits(x, params), y)


def test_small_cnn_gradient_matches_finite_differences(rng):
    model = init_model(3, Arch(input_size=8, widths=(3, 4), num_classes=3))
    x = ad.Tensor(rng.normal(size=(2, 3, 8, 8)))
    y = np.array([0, 2])
    params = model.tensors(requires_grad=True)
    _tiny_cnn_loss(params, x, y, model).backward()
    for name, arr in model.params.items():
        def f(v, name=name):
            p = model.tensors()
            p[name] = ad.Tensor(v)
            return _tiny_cnn_loss(p, x, y, model).item()
        assert rel_error(params[name].grad, numeric_grad(f, arr)) < 1e-4, name


def test_forward_backward_bit_identical_twice(rng):
    model = init_model(0, Arch(input_size=8, widths=(4, 4), num_classes=3))
    x = rng.normal(size=(3, 3, 8, 8))
    y = np.array([0, 1, 2])
    results = []
    for _ in range(2):
        params = model.tensors(requires_grad=True)
        loss = _tiny_cnn_loss(params, ad.Tensor(x), y, model)
        loss.backward()
        results.append((loss.data.tobytes(), [params[k].grad.tobytes() for k in params]))
    assert results[0] == results[1]


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (1, 2, 4, 4), elements=st.floats(-10, 10)))
def test_conv_and_pool_finite_for_finite_inputs(x):
    k = np.linspace(-1, 1, 2 * 2 * 9).reshape(2, 2, 3, 3)
    h = ad.conv2d(ad.Tensor(x), ad.Tensor(k), ad.Tensor([0.1, -0.1]), padding=1)
    out = ad.avg_pool2d(ad.relu(h), 2)
    assert np.isfinite(out.data).all()
    np.testing.assert_allclose(h.data, conv_oracle(x, k, np.array([0.1, -0.1]), 1, 1), rtol=0, atol=1e-12)
