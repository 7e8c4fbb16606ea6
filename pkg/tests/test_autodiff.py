import math

import numpy as np
import pytest

import bevadapt.numerics as N
from bevadapt.numerics import Graph, ParameterSet, TensorRecord

from helpers import grad_rel_err, naive_avg_pool3d, params_of, rel_err


def square_sum_graph():
    return Graph(lambda p, x, seed: N.tsum(N.mul(p["w"], p["w"])), name="square_sum")


def test_evaluate_linear_identity():
    g = Graph(lambda p, x, seed: N.linear(x[0], p["w"], p["b"]))
    params = params_of(w=np.eye(2), b=np.zeros(2))
    out = N.evaluate(g, params, [TensorRecord.of([[1.0, 2.0]])])
    assert np.array_equal(out.array, [[1.0, 2.0]])


def test_evaluate_relu_definition():
    g = Graph(lambda p, x, seed: N.relu(x[0]))
    out = N.evaluate(g, ParameterSet(), [TensorRecord.of([-1.0, 0.0, 3.0])])
    assert np.array_equal(out.array, [0.0, 0.0, 3.0])


def test_evaluate_softmax_hand_value():
    g = Graph(lambda p, x, seed: N.softmax(x[0], axis=0))
    out = N.evaluate(g, ParameterSet(), [TensorRecord.of([0.0, math.log(2.0)])])
    assert np.allclose(out.array, [1.0 / 3.0, 2.0 / 3.0], atol=1e-12)


def test_evaluate_rejects_shape_mismatch_before_compute():
    g = Graph(lambda p, x, seed: N.linear(x[0], p["w"]))
    params = params_of(w=np.eye(3))
    with pytest.raises(N.ShapeError):
        N.evaluate(g, params, [TensorRecord.of([[1.0, 2.0]])])


def test_non_finite_intermediate_names_the_node():
    def overflow(p, x, seed):
        big = N.mul(x[0], x[0], name="boom")
        return N.tsum(big)

    with pytest.raises(N.NumericsError, match="boom"):
        N.evaluate(Graph(overflow), ParameterSet(), [TensorRecord.of([1e200, 1e200])])


def test_differentiate_quadratic():
    params = params_of(w=np.array([1.0, 2.0]))
    loss = N.evaluate(square_sum_graph(), params, [])
    grads = N.differentiate(loss, params)
    assert np.array_equal(grads["w"].array, [2.0, 4.0])


def test_differentiate_unreachable_parameter_is_zero():
    params = params_of(w=np.array([1.0, 2.0]), unused=np.array([[5.0]]))
    loss = N.evaluate(square_sum_graph(), params, [])
    grads = N.differentiate(loss, params)
    assert np.array_equal(grads["unused"].array, [[0.0]])
    assert grads.names() == params.names()


def test_differentiate_without_forward_is_usage_error():
    with pytest.raises(N.UsageError):
        N.differentiate(TensorRecord.of([1.0]), ParameterSet())


def test_differentiate_requires_scalar_loss():
    params = params_of(w=np.array([1.0, 2.0]))
    g = Graph(lambda p, x, seed: N.mul(p["w"], p["w"]))
    out = N.evaluate(g, params, [])
    with pytest.raises(N.UsageError):
        N.differentiate(out, params)


def test_two_layer_perceptron_matches_finite_differences():
    # 17 parameters: (2x4 + 4) hidden layer, (4x1 + 1) output head.
    rng = np.random.default_rng(11)
    params = params_of(
        w1=rng.standard_normal((2, 4)),
        b1=rng.standard_normal(4),
        w2=rng.standard_normal((4, 1)),
        b2=rng.standard_normal(1),
    )
    assert params.n_scalars() == 17
    x = TensorRecord.of(rng.standard_normal((3, 2)))

    def fn(p, inputs, seed):
        h = N.relu(N.linear(inputs[0], p["w1"], p["b1"]))
        return N.mean(N.linear(h, p["w2"], p["b2"]))

    g = Graph(fn, name="mlp17")
    loss = N.evaluate(g, params, [x])
    got = N.differentiate(loss, params)
    want = N.finite_difference_gradient(g, params, [x], step=1e-5)
    assert grad_rel_err(got, want) < 1e-4


def test_fd_linear_function_exact_for_any_step():
    params = params_of(w=np.array([1.5, -2.0, 0.5]))
    g = Graph(lambda p, x, seed: N.tsum(N.mul(p["w"], N.constant([2.0, 3.0, -1.0]))))
    for step in (1e-2, 1e-6):
        fd = N.finite_difference_gradient(g, params, [], step=step)
        assert np.allclose(fd["w"].array, [2.0, 3.0, -1.0], atol=1e-7)


def test_fd_quadratic_second_order_accuracy():
    params = params_of(w=np.array([1.0, 2.0]))
    fd = N.finite_difference_gradient(square_sum_graph(), params, [], step=1e-4)
    assert np.allclose(fd["w"].array, [2.0, 4.0], atol=1e-7)


def test_mlp_with_softmax_head_fd_agreement():
    rng = np.random.default_rng(5)
    params = params_of(
        w1=0.7 * rng.standard_normal((4, 5)),
        b1=0.3 * rng.standard_normal(5),
        w2=0.7 * rng.standard_normal((5, 3)),
        b2=0.3 * rng.standard_normal(3),
    )
    x = TensorRecord.of(rng.standard_normal((3, 4)))
    target = rng.random((3, 3))

    def fn(p, inputs, seed):
        h = N.relu(N.linear(inputs[0], p["w1"], p["b1"]))
        probs = N.softmax(N.linear(h, p["w2"], p["b2"]), axis=1)
        return N.mse(probs, N.constant(target))

    g = Graph(fn)
    loss = N.evaluate(g, params, [x])
    got = N.differentiate(loss, params)
    want = N.finite_difference_gradient(g, params, [x], step=1e-5)
    assert grad_rel_err(got, want) < 1e-4


def test_determinism_bit_identical():
    rng = np.random.default_rng(2)
    params = params_of(w=rng.standard_normal((6, 6)))
    x = TensorRecord.of(rng.standard_normal((2, 6)))

    def fn(p, inputs, seed):
        h = N.relu(N.linear(inputs[0], p["w"]))
        h = N.dropout(h, 0.4, seed)
        return N.tsum(h)

    g = Graph(fn)
    a = N.evaluate(g, params, [x], seed=99)
    b = N.evaluate(g, params, [x], seed=99)
    assert a.array.tobytes() == b.array.tobytes()
    c = N.evaluate(g, params, [x], seed=100)
    assert a.array.tobytes() != c.array.tobytes()


def test_dropout_mask_rate_zero_all_ones():
    mask = N.dropout_mask((7, 3), 0.0, 123)
    assert np.array_equal(mask.array, np.ones((7, 3)))


def test_dropout_mask_deterministic_and_seed_sensitive():
    a = N.dropout_mask((100,), 0.5, 7)
    b = N.dropout_mask((100,), 0.5, 7)
    c = N.dropout_mask((100,), 0.5, 8)
    assert np.array_equal(a.array, b.array)
    assert not np.array_equal(a.array, c.array)


def test_dropout_mask_zero_fraction_concentrates():
    mask = N.dropout_mask((10000,), 0.5, 21)
    frac = float((mask.array == 0).mean())
    assert 0.47 <= frac <= 0.53  # 3 sigma of Binomial(1e4, 0.5)


def test_dropout_mask_mean_within_three_sigma_of_one():
    # Entries are 0 or 1/(1-r): variance r/(1-r) per entry.
    for rate, seed in [(0.2, 1), (0.5, 2), (0.8, 3)]:
        n = 10000
        mask = N.dropout_mask((n,), rate, seed)
        sigma = math.sqrt(rate / (1.0 - rate) / n)
        assert abs(mask.array.mean() - 1.0) <= 3.0 * sigma


def test_dropout_mask_rejects_rate_one():
    with pytest.raises(N.UsageError):
        N.dropout_mask((3,), 1.0, 0)


def test_avg_pool3d_matches_naive_and_rejects_oversize_kernel():
    rng = np.random.default_rng(17)
    x = rng.standard_normal((2, 6, 5, 7))
    node = N.avg_pool3d(N.constant(x), (2, 3, 2), (2, 1, 3))
    assert rel_err(node.array, naive_avg_pool3d(x, (2, 3, 2), (2, 1, 3))) < 1e-12
    with pytest.raises(N.ShapeError):
        N.avg_pool3d(N.constant(x), (7, 1, 1), (1, 1, 1))


def test_sgd_step_moves_against_gradient():
    params = params_of(w=np.array([1.0, 2.0]))
    loss = N.evaluate(square_sum_graph(), params, [])
    grads = N.differentiate(loss, params)
    after = N.sgd_step(params, grads, lr=0.1)
    assert np.allclose(after["w"].array, [0.8, 1.6])


PRIMITIVE_CASES = {}


def primitive_case(name):
    def register(fn):
        PRIMITIVE_CASES[name] = fn
        return fn

    return register


@primitive_case("linear")
def _case_linear(rng):
    params = params_of(
        x=rng.standard_normal((3, 4)),
        w=rng.standard_normal((4, 2)),
        b=rng.standard_normal(2),
    )
    weights = rng.standard_normal((3, 2))
    fn = lambda p, i, s: N.tsum(N.mul(N.linear(p["x"], p["w"], p["b"]), N.constant(weights)))
    return params, fn


@primitive_case("relu")
def _case_relu(rng):
    vals = rng.standard_normal((4, 3))
    vals += np.sign(vals) * 0.05  # keep away from the kink
    params = params_of(x=vals)
    weights = rng.standard_normal((4, 3))
    fn = lambda p, i, s: N.tsum(N.mul(N.relu(p["x"]), N.constant(weights)))
    return params, fn


@primitive_case("sigmoid")
def _case_sigmoid(rng):
    params = params_of(x=rng.standard_normal((5,)))
    weights = rng.standard_normal((5,))
    fn = lambda p, i, s: N.tsum(N.mul(N.sigmoid(p["x"]), N.constant(weights)))
    return params, fn


@primitive_case("softmax")
def _case_softmax(rng):
    params = params_of(x=rng.standard_normal((3, 5)))
    weights = rng.standard_normal((3, 5))
    fn = lambda p, i, s: N.tsum(N.mul(N.softmax(p["x"], axis=1), N.constant(weights)))
    return params, fn


@primitive_case("log")
def _case_log(rng):
    params = params_of(x=0.1 + rng.random((4,)))
    weights = rng.standard_normal((4,))
    fn = lambda p, i, s: N.tsum(N.mul(N.log(p["x"]), N.constant(weights)))
    return params, fn


@primitive_case("add")
def _case_add(rng):
    params = params_of(a=rng.standard_normal((3, 3)), b=rng.standard_normal((3, 3)))
    weights = rng.standard_normal((3, 3))
    fn = lambda p, i, s: N.tsum(N.mul(N.add(p["a"], p["b"]), N.constant(weights)))
    return params, fn


@primitive_case("add_scalar_broadcast")
def _case_add_scalar(rng):
    params = params_of(a=rng.standard_normal((3, 3)), c=rng.standard_normal((1,)))
    weights = rng.standard_normal((3, 3))
    fn = lambda p, i, s: N.tsum(N.mul(N.add(p["a"], p["c"]), N.constant(weights)))
    return params, fn


@primitive_case("mul")
def _case_mul(rng):
    params = params_of(a=rng.standard_normal((2, 4)), b=rng.standard_normal((2, 4)))
    weights = rng.standard_normal((2, 4))
    fn = lambda p, i, s: N.tsum(N.mul(N.mul(p["a"], p["b"]), N.constant(weights)))
    return params, fn


@primitive_case("sum_axis")
def _case_sum(rng):
    params = params_of(x=rng.standard_normal((3, 4, 2)))
    weights = rng.standard_normal((3, 2))
    fn = lambda p, i, s: N.tsum(N.mul(N.tsum(p["x"], axis=1), N.constant(weights)))
    return params, fn


@primitive_case("mean_axis")
def _case_mean(rng):
    params = params_of(x=rng.standard_normal((3, 4, 2)))
    weights = rng.standard_normal((4,))
    fn = lambda p, i, s: N.tsum(N.mul(N.mean(p["x"], axis=(0, 2)), N.constant(weights)))
    return params, fn


@primitive_case("mse")
def _case_mse(rng):
    params = params_of(a=rng.standard_normal((3, 3)))
    target = rng.standard_normal((3, 3))
    fn = lambda p, i, s: N.mse(p["a"], N.constant(target))
    return params, fn


@primitive_case("bce_sum")
def _case_bce(rng):
    params = params_of(p=0.05 + 0.9 * rng.random((6,)))
    target = (rng.random(6) > 0.5).astype(float)
    fn = lambda p, i, s: N.bce(p["p"], target, reduction="sum")
    return params, fn


@primitive_case("bce_logits")
def _case_bce_logits(rng):
    params = params_of(z=2.0 * rng.standard_normal((6,)))
    target = (rng.random(6) > 0.5).astype(float)
    fn = lambda p, i, s: N.bce_logits(p["z"], target, reduction="sum")
    return params, fn


@primitive_case("log_softmax")
def _case_log_softmax(rng):
    params = params_of(x=rng.standard_normal((3, 4)))
    weights = rng.standard_normal((3, 4))
    fn = lambda p, i, s: N.tsum(N.mul(N.log_softmax(p["x"], axis=1), N.constant(weights)))
    return params, fn


@primitive_case("bce_mean")
def _case_bce_mean(rng):
    params = params_of(p=0.05 + 0.9 * rng.random((6,)))
    target = rng.random(6)
    fn = lambda p, i, s: N.bce(p["p"], target, reduction="mean")
    return params, fn


@primitive_case("pixel_outer")
def _case_pixel_outer(rng):
    params = params_of(a=rng.standard_normal((2, 3, 4)), b=rng.standard_normal((3, 3, 4)))
    weights = rng.standard_normal((2, 3, 3, 4))
    fn = lambda p, i, s: N.tsum(N.mul(N.pixel_outer(p["a"], p["b"]), N.constant(weights)))
    return params, fn


@primitive_case("avg_pool3d")
def _case_pool(rng):
    params = params_of(x=rng.standard_normal((2, 6, 6, 6)))
    weights = rng.standard_normal((2, 3, 5, 2))
    fn = lambda p, i, s: N.tsum(
        N.mul(N.avg_pool3d(p["x"], (2, 2, 3), (2, 1, 3)), N.constant(weights))
    )
    return params, fn


@primitive_case("avg_pool3d_overlapping")
def _case_pool_overlap(rng):
    params = params_of(x=rng.standard_normal((1, 5, 5, 5)))
    weights = rng.standard_normal((1, 4, 4, 4))
    fn = lambda p, i, s: N.tsum(
        N.mul(N.avg_pool3d(p["x"], (2, 2, 2), (1, 1, 1)), N.constant(weights))
    )
    return params, fn


@primitive_case("reshape_moveaxis")
def _case_structural(rng):
    params = params_of(x=rng.standard_normal((2, 3, 4)))
    weights = rng.standard_normal((4, 6))
    fn = lambda p, i, s: N.tsum(
        N.mul(N.reshape(N.moveaxis(p["x"], 0, 2), (4, 6)), N.constant(weights))
    )
    return params, fn


@primitive_case("concat")
def _case_concat(rng):
    params = params_of(a=rng.standard_normal((2, 3)), b=rng.standard_normal((2, 2)))
    weights = rng.standard_normal((2, 5))
    fn = lambda p, i, s: N.tsum(N.mul(N.concat([p["a"], p["b"]], axis=1), N.constant(weights)))
    return params, fn


@primitive_case("dropout")
def _case_dropout(rng):
    params = params_of(x=rng.standard_normal((4, 4)))
    weights = rng.standard_normal((4, 4))
    fn = lambda p, i, s: N.tsum(N.mul(N.dropout(p["x"], 0.35, s), N.constant(weights)))
    return params, fn


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
@pytest.mark.parametrize("seed", range(5))
def test_every_primitive_matches_finite_differences(name, seed):
    rng = np.random.default_rng(1000 + seed)
    params, fn = PRIMITIVE_CASES[name](rng)
    g = Graph(fn, name=name)
    loss = N.evaluate(g, params, [], seed=seed)
    got = N.differentiate(loss, params)
    want = N.finite_difference_gradient(g, params, [], step=1e-5, seed=seed)
    assert grad_rel_err(got, want) < 1e-4, f"primitive {name} failed FD check"
