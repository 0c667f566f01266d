import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leukomil import tensor as T


def _rng(seed=0):
    return np.random.default_rng(seed)


# scalar-valued wrappers around each differentiable op; weights are fixed
# random projections so every output element reaches the loss
def _op_cases(rng, dtype):
    w_conv = rng.normal(size=(3, 2, 3, 3)).astype(dtype)
    b_conv = rng.normal(size=3).astype(dtype)
    proj_conv = rng.normal(size=(3, 5, 5)).astype(dtype)
    proj_pool = rng.normal(size=(2, 3, 3)).astype(dtype)
    proj_vec = rng.normal(size=4).astype(dtype)
    W = rng.normal(size=(6, 4)).astype(dtype)
    x_aff = rng.normal(size=6).astype(dtype)
    b = rng.normal(size=4).astype(dtype)
    other = rng.normal(size=(4,)).astype(dtype)

    def conv_x(x):
        y = T.conv2d(x, T.Tensor(w_conv), T.Tensor(b_conv), padding=1)
        return T.reduce_sum(T.mul(y, T.Tensor(proj_conv)))

    def conv_w(k):
        x = T.Tensor(proj_conv[:2].copy())
        y = T.conv2d(x, k, T.Tensor(b_conv), padding=1)
        return T.reduce_sum(T.mul(y, T.Tensor(proj_conv)))

    def conv_b(bb):
        x = T.Tensor(proj_conv[:2].copy())
        y = T.conv2d(x, T.Tensor(w_conv), bb, padding=1)
        return T.reduce_sum(T.mul(y, T.Tensor(proj_conv)))

    def pool(x):
        return T.reduce_sum(T.mul(T.max_pool2d(x, 2), T.Tensor(proj_pool)))

    def gpool(x):
        return T.reduce_sum(T.mul(T.global_max_pool(x), T.Tensor(proj_vec[:2])))

    def relu(x):
        return T.reduce_sum(T.mul(T.relu(x), T.Tensor(other)))

    def aff_x(x):
        return T.reduce_sum(T.mul(T.affine(x, T.Tensor(W), T.Tensor(b)), T.Tensor(other)))

    def aff_w(w):
        x = T.Tensor(x_aff)
        return T.reduce_sum(T.mul(T.affine(x, w, T.Tensor(b)), T.Tensor(other)))

    def soft_ce(z):
        return T.cross_entropy(T.softmax(z), 2)

    def soft(z):
        return T.reduce_sum(T.mul(T.softmax(z), T.Tensor(other)))

    def fuse(f):
        fused, _ = T.max_reduce_instances(f)
        return T.reduce_sum(T.mul(fused, T.Tensor(other)))

    def add(x):
        return T.reduce_sum(T.mul(T.add(x, T.Tensor(other)), T.add(x, x)))

    return {
        "conv2d/input": (conv_x, (2, 5, 5)),
        "conv2d/kernels": (conv_w, (3, 2, 3, 3)),
        "conv2d/bias": (conv_b, (3,)),
        "max_pool2d": (pool, (2, 6, 6)),
        "global_max_pool": (gpool, (2, 4, 4)),
        "relu": (relu, (4,)),
        "affine/input": (aff_x, (6,)),
        "affine/weight": (aff_w, (6, 4)),
        "softmax+cross_entropy": (soft_ce, (4,)),
        "softmax": (soft, (4,)),
        "max_reduce_instances": (fuse, (5, 4)),
        "add/mul": (add, (4,)),
    }


def _random_point(rng, shape, dtype):
    # magnitudes at least 0.05 keep relu kinks out of reach; magnitudes spread
    # 1e-3 apart mean no max or pooling window changes winner under perturbation
    mag = 0.05 + np.abs(rng.normal(size=int(np.prod(shape))))
    mag[np.argsort(mag, kind="stable")] += 1e-3 * np.arange(mag.size)
    x = np.where(rng.random(mag.size) < 0.5, -mag, mag)
    return x.reshape(shape).astype(dtype)


def gradient_suite(points=10, seed=0):
    """Worst relative error per op in 64-bit shadow mode and in 32-bit mode."""
    worst = {}
    rng = _rng(seed)
    with T.float64_mode():
        for name, (fn, shape) in _op_cases(_rng(seed + 1), np.float64).items():
            errs = [T.finite_diff_check(fn, _random_point(rng, shape, np.float64), epsilon=1e-5)
                    for _ in range(points)]
            worst[(name, 64)] = max(errs)
    for name, (fn, shape) in _op_cases(_rng(seed + 1), np.float32).items():
        errs = [T.finite_diff_check(fn, _random_point(rng, shape, np.float32), epsilon=1e-4,
                                    numeric_dtype=np.float64) for _ in range(points)]
        worst[(name, 32)] = max(errs)
    return worst


def test_gradient_suite_tolerances():
    worst = gradient_suite(points=3)
    for (name, bits), err in worst.items():
        assert err <= (1e-6 if bits == 64 else 1e-3), (name, bits, err)


def test_tensor_rejects_zero_dimension():
    with pytest.raises(T.DimensionError):
        T.Tensor(np.zeros((0, 3)))


def test_default_dtype_and_shadow_mode():
    assert T.Tensor([1.0]).dtype == np.float32
    with T.float64_mode():
        assert T.Tensor([1.0]).dtype == np.float64
    assert T.default_dtype() == np.float32


def test_no_tape_no_record():
    p = T.Parameter(np.ones(3))
    y = T.reduce_sum(T.mul(p, p))
    assert p.grad is not None and np.all(p.grad == 0)
    with T.Tape() as tape:
        y = T.reduce_sum(T.mul(p, p))
    assert len(tape) == 2
    tape.backward(y)
    np.testing.assert_array_equal(p.grad, np.full(3, 2.0, np.float32))


def test_gradients_accumulate_until_sgd_step():
    p = T.Parameter(np.array([1.0, -2.0]))
    for _ in range(2):
        with T.Tape() as tape:
            y = T.reduce_sum(T.mul(p, T.Tensor([3.0, 4.0])))
        tape.backward(y)
    np.testing.assert_array_equal(p.grad, [6.0, 8.0])
    T.sgd_step([p], 0.5)
    np.testing.assert_array_equal(p.data, np.array([-2.0, -6.0], np.float32))
    assert np.all(p.grad == 0)


def test_sgd_step_rejects_non_finite_gradient():
    p = T.Parameter(np.ones(2), name="fc1.weight")
    p.grad[:] = [np.nan, 0]
    before = p.data.copy()
    with pytest.raises(T.TrainingError, match="fc1.weight"):
        T.sgd_step([p], 0.1)
    np.testing.assert_array_equal(p.data, before)


def test_conv2d_rejects_channel_mismatch():
    x = T.Tensor(np.zeros((2, 5, 5)))
    k = T.Tensor(np.zeros((3, 4, 3, 3)))
    with pytest.raises(T.DimensionError, match="channel"):
        T.conv2d(x, k, T.Tensor(np.zeros(3)))


def test_conv2d_matches_direct_sum():
    rng = _rng(3)
    x = rng.normal(size=(2, 6, 7))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    with T.float64_mode():
        y = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b), padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 6, 7))
    for o in range(3):
        for i in range(6):
            for j in range(7):
                ref[o, i, j] = np.sum(xp[:, i:i + 3, j:j + 3] * k[o]) + b[o]
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


def test_conv2d_stride():
    x = T.Tensor(np.arange(2 * 5 * 5, dtype=float).reshape(1, 2, 5, 5))
    k = T.Tensor(np.ones((1, 2, 3, 3)))
    y = T.conv2d(x, k, T.Tensor(np.zeros(1)), stride=2)
    assert y.shape == (1, 1, 2, 2)


def test_max_pool_ties_route_to_first():
    x = T.Tensor(np.ones((1, 2, 2)), requires_grad=True)
    with T.Tape() as tape:
        y = T.reduce_sum(T.max_pool2d(x, 2))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad[0], [[1, 0], [0, 0]])


def test_softmax_needs_two_classes():
    with pytest.raises(T.DimensionError):
        T.softmax(T.Tensor([1.0]))


def test_softmax_is_shift_invariant_and_sums_to_one():
    z = np.array([1000.0, 1001.0, 999.0])
    p = T.softmax(T.Tensor(z)).data
    assert np.isfinite(p).all()
    assert abs(float(p.sum()) - 1.0) < 1e-6


def test_cross_entropy_clamps_and_checks_target():
    p = T.Tensor(np.array([1.0, 0.0]))
    assert T.cross_entropy(p, 1).item() == pytest.approx(-np.log(T.CE_EPSILON), rel=1e-5)
    with pytest.raises(IndexError):
        T.cross_entropy(p, 2)


def test_max_reduce_provenance_and_empty_bag():
    f = np.array([[1.0, 5.0, 2.0], [3.0, 5.0, 0.0]])
    fused, arg = T.max_reduce_instances(f)
    np.testing.assert_array_equal(fused.data, [3, 5, 2])
    np.testing.assert_array_equal(arg, [1, 0, 0])
    with pytest.raises(T.EmptyBagError):
        T.max_reduce_instances(np.zeros((0, 3)))


def test_fusion_gradient_only_on_argmax_rows():
    rng = _rng(5)
    f = T.Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    with T.Tape() as tape:
        fused, arg = T.max_reduce_instances(f)
        loss = T.reduce_sum(T.mul(fused, T.Tensor(np.ones(4))))
    tape.backward(loss)
    mask = np.zeros((6, 4), bool)
    mask[arg, np.arange(4)] = True
    assert np.all(f.grad[~mask] == 0)
    assert np.all(f.grad[mask] == 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-100, 100, width=32), min_size=3, max_size=3), min_size=1, max_size=8),
       st.lists(st.floats(-100, 100, width=32), min_size=3, max_size=3))
def test_fusion_monotone_under_extension(rows, extra):
    before = T.max_reduce_instances(np.array(rows))[0].data
    after = T.max_reduce_instances(np.array(rows + [extra]))[0].data
    assert np.all(after >= before)


def test_finite_diff_check_requires_scalar():
    with pytest.raises(T.DimensionError):
        T.finite_diff_check(lambda x: T.relu(x), np.ones(3))


def test_sgd_converges_on_quadratic():
    with T.float64_mode():
        v = T.Parameter(np.array([0.0]))
        for _ in range(1000):
            with T.Tape() as tape:
                d = T.add(v, T.Tensor([-3.0]))
                loss = T.reduce_sum(T.mul(d, d))
            tape.backward(loss)
            T.sgd_step([v], 0.1)
    assert abs(float(v.data[0]) - 3) <= 1e-4


def test_softmax_cross_entropy_gradient_is_probs_minus_one_hot():
    rng = _rng(11)
    with T.float64_mode():
        for target in range(4):
            z = T.Tensor(rng.normal(size=4), requires_grad=True)
            with T.Tape() as tape:
                probs = T.softmax(z)
                loss = T.cross_entropy(probs, target)
            tape.backward(loss)
            expected = probs.data - np.eye(4)[target]
            np.testing.assert_allclose(z.grad, expected, atol=1e-12)
            assert T.finite_diff_check(lambda t, c=target: T.cross_entropy(T.softmax(t), c), z.data,
                                       epsilon=1e-5) <= 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.data())
def test_fused_softmax_cross_entropy_matches_two_step(values, data):
    target = data.draw(st.integers(0, len(values) - 1))
    with T.float64_mode():
        z = T.Tensor(np.array(values), requires_grad=True)
        with T.Tape() as tape:
            loss, probs = T.softmax_cross_entropy(z, target)
        tape.backward(loss)
        reference = T.softmax(T.Tensor(np.array(values)))
        two_step = T.cross_entropy(reference, target)
    np.testing.assert_allclose(probs, reference.data, rtol=1e-12, atol=1e-300)
    if probs[target] > T.CE_EPSILON:
        assert abs(float(loss.data) - float(two_step.data)) <= 1e-9 * max(1.0, float(two_step.data))
    np.testing.assert_allclose(z.grad, probs - np.eye(len(values))[target], atol=1e-12)


def test_fused_softmax_cross_entropy_keeps_gradient_when_saturated():
    # in float32 the target probability e^-200 underflows to zero; the
    # two-step route then loses its gradient, the fused one does not
    z = T.Tensor(np.array([0.0, 200.0, 0.0], np.float32), requires_grad=True)
    with T.Tape() as tape:
        loss, _ = T.softmax_cross_entropy(z, 0)
    tape.backward(loss)
    assert float(loss.data) == pytest.approx(200.0)
    np.testing.assert_allclose(z.grad, [-1.0, 1.0, 0.0], atol=1e-6)
    with T.float64_mode():
        assert T.finite_diff_check(lambda t: T.softmax_cross_entropy(t, 2)[0], np.array([0.3, -1.2, 2.0]),
                                   epsilon=1e-5) <= 1e-6


def test_relu_gradient_is_positive_indicator():
    x = T.Tensor(_random_point(_rng(12), (20,), np.float32), requires_grad=True)
    with T.Tape() as tape:
        y = T.reduce_sum(T.relu(x))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, (x.data > 0).astype(np.float32))


def test_checker_examples_in_32_bit():
    rng = _rng(13)
    eps = 1e-4
    x = rng.normal(size=12)
    x = np.where(np.abs(x) < 10 * eps, 20 * eps, x).astype(np.float32)

    def relu_fn(t):
        return T.reduce_sum(T.mul(T.relu(t), T.Tensor(np.arange(12.0))))

    def ce_fn(t):
        return T.cross_entropy(T.softmax(t), 1)

    assert T.finite_diff_check(relu_fn, x, epsilon=eps, numeric_dtype=np.float64) <= 1e-4
    z = rng.normal(size=5).astype(np.float32)
    assert T.finite_diff_check(ce_fn, z, epsilon=eps, numeric_dtype=np.float64) <= 1e-4
