import numpy as np
import pytest

from pvcrack import nn


def _conv(kh, kw, cin, cout, stride=1, padding=0, dtype=np.float64, rng=None):
    layer = nn.Conv2D(kh, kw, cin, cout, stride, padding, dtype=dtype)
    rng = rng or np.random.default_rng(0)
    layer.w[:] = rng.standard_normal(layer.w.shape)
    layer.b[:] = rng.standard_normal(layer.b.shape)
    return layer


def test_conv_direct_summation():
    layer = nn.Conv2D(2, 2, 1, 1, dtype=np.float64)
    layer.w[:] = 1.0
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
    y = layer.forward(x)
    assert y.shape == (1, 1, 1)
    assert y[0, 0, 0] == 10.0


def test_conv_identity_kernel():
    layer = nn.Conv2D(1, 1, 1, 1, dtype=np.float64)
    layer.w[0, 0, 0, 0] = 1.0
    x = np.random.default_rng(0).standard_normal((5, 7, 1))
    assert np.allclose(layer.forward(x), x)


def test_conv_zero_input_gives_bias():
    layer = _conv(3, 3, 2, 4, padding=1)
    x = np.zeros((6, 6, 2))
    y = layer.forward(x)
    assert np.allclose(y, layer.b)


def test_conv_output_shape_formula():
    rng = np.random.default_rng(1)
    for _ in range(30):
        h = int(rng.integers(4, 12))
        k = int(rng.integers(1, min(h, 5) + 1))
        s = int(rng.integers(1, 4))
        p = int(rng.integers(0, 3))
        layer = _conv(k, k, 1, 2, stride=s, padding=p, rng=rng)
        expect = (h + 2 * p - k) // s + 1
        if expect < 1:
            with pytest.raises(nn.ShapeError):
                layer.forward(rng.standard_normal((h, h, 1)))
        else:
            y = layer.forward(rng.standard_normal((h, h, 1)))
            assert y.shape == (expect, expect, 2)


def test_conv_linearity_in_input():
    rng = np.random.default_rng(2)
    layer = _conv(3, 3, 2, 3, padding=1, rng=rng)
    layer.b[:] = 0
    x1 = rng.standard_normal((6, 6, 2))
    x2 = rng.standard_normal((6, 6, 2))
    lhs = layer.forward(2.5 * x1 - 0.5 * x2)
    rhs = 2.5 * layer.forward(x1) - 0.5 * layer.forward(x2)
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_conv_channel_mismatch():
    layer = _conv(3, 3, 2, 3)
    with pytest.raises(nn.ShapeError):
        layer.forward(np.zeros((6, 6, 5)))


def test_conv_deterministic():
    rng = np.random.default_rng(3)
    layer = _conv(3, 3, 2, 4, rng=rng)
    x = rng.standard_normal((7, 7, 2))
    assert layer.forward(x).tobytes() == layer.forward(x).tobytes()


def test_maxpool_basic():
    pool = nn.MaxPool2D(2, 2)
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
    assert pool.forward(x)[0, 0, 0] == 4.0


def test_maxpool_window_one_identity():
    pool = nn.MaxPool2D(1, 1)
    x = np.random.default_rng(0).standard_normal((5, 5, 3))
    assert np.array_equal(pool.forward(x), x)


def test_maxpool_window_too_large():
    with pytest.raises(nn.ShapeError):
        nn.MaxPool2D(4, 1).forward(np.zeros((3, 3, 1)))


def test_maxpool_tie_break_spreads_one_per_window():
    pool = nn.MaxPool2D(2, 2)
    x = np.ones((4, 4, 1))
    y = pool.forward(x)
    dx = pool.backward(np.ones_like(y))
    assert dx.sum() == y.size
    # first element of each window in row-major order
    assert np.array_equal(dx[:, :, 0],
                          np.array([[1, 0, 1, 0], [0, 0, 0, 0],
                                    [1, 0, 1, 0], [0, 0, 0, 0]], dtype=float))


def test_dense_examples():
    layer = nn.Dense(2, 2, dtype=np.float64)
    layer.w[:] = np.eye(2)
    layer.b[:] = [1.0, 1.0]
    assert np.allclose(layer.forward(np.array([1.0, 2.0])), [2.0, 3.0])
    layer.b[:] = 0
    x = np.random.default_rng(0).standard_normal(2)
    assert np.allclose(layer.forward(x), x)
    layer.b[:] = [5.0, -1.0]
    assert np.allclose(layer.forward(np.zeros(2)), layer.b)


def test_dense_shape_mismatch():
    with pytest.raises(nn.ShapeError):
        nn.Dense(3, 2).forward(np.zeros(4))


def test_relu():
    out = nn.ReLU().forward(np.array([-1.0, 2.0]))
    assert np.array_equal(out, [0.0, 2.0])


def test_softmax_symmetry_and_shift_invariance():
    s = nn.softmax(np.array([3.3, 3.3, 3.3]))
    assert np.allclose(s, 1 / 3)
    x = np.random.default_rng(0).standard_normal(5)
    assert abs(nn.softmax(x).sum() - 1.0) < 1e-6
    assert np.allclose(nn.softmax(x), nn.softmax(x + 100.0))


def test_global_avg_pool_value():
    gap = nn.GlobalAvgPool()
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
    assert np.allclose(gap.forward(x), [2.5])


def test_concat_and_mismatch():
    cat = nn.ConcatChannels()
    a = np.ones((4, 4, 2))
    b = np.zeros((4, 4, 3))
    y = cat.forward([a, b])
    assert y.shape == (4, 4, 5)
    da, db = cat.backward(np.ones_like(y))
    assert da.shape == a.shape and db.shape == b.shape
    with pytest.raises(nn.ShapeError):
        cat.forward([a, np.zeros((3, 3, 1))])


def test_cross_entropy_uniform():
    loss, grad = nn.cross_entropy(np.array([0.0, 0.0]), 0)
    assert abs(loss - np.log(2)) < 1e-12
    assert np.allclose(grad, [-0.5, 0.5])


def test_cross_entropy_stability():
    loss, grad = nn.cross_entropy(np.array([1000.0, 0.0]), 0)
    assert loss < 1e-6
    assert np.all(np.isfinite(grad))


def test_cross_entropy_nonfinite_rejected():
    with pytest.raises(ValueError):
        nn.cross_entropy(np.array([np.inf, 0.0]), 0)


def test_cross_entropy_gradient_finite_difference():
    rng = np.random.default_rng(4)
    for _ in range(10):
        logits = rng.standard_normal(4)
        target = int(rng.integers(4))
        _, grad = nn.cross_entropy(logits, target)
        eps = 1e-6
        for i in range(4):
            bumped = logits.copy()
            bumped[i] += eps
            up, _ = nn.cross_entropy(bumped, target)
            bumped[i] -= 2 * eps
            down, _ = nn.cross_entropy(bumped, target)
            assert abs((up - down) / (2 * eps) - grad[i]) < 1e-6


def test_sgd_single_step():
    p = np.array([1.0])
    opt = nn.Optimizer(nn.OptimConfig(kind="sgd", learning_rate=0.1))
    opt.step([p], [np.array([1.0])])
    assert np.allclose(p, 0.9)


def test_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0])
    before = p.copy()
    for kind in ("sgd", "adam"):
        opt = nn.Optimizer(nn.OptimConfig(kind=kind, learning_rate=0.5))
        opt.step([p], [np.zeros_like(p)])
        assert np.allclose(p, before)


def test_adam_first_step_magnitude():
    lr = 1e-3
    for scale in (1e-4, 1.0, 1e4):
        p = np.array([0.0])
        opt = nn.Optimizer(nn.OptimConfig(kind="adam", learning_rate=lr))
        opt.step([p], [np.array([scale])])
        assert abs(abs(p[0]) - lr) < lr * 1e-3


def test_optimizer_shape_mismatch():
    opt = nn.Optimizer(nn.OptimConfig(kind="sgd", learning_rate=0.1))
    with pytest.raises(ValueError):
        opt.step([np.zeros(2)], [np.zeros(3)])


def test_optim_config_validation():
    with pytest.raises(ValueError):
        nn.OptimConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        nn.OptimConfig(momentum=1.0)
    with pytest.raises(ValueError):
        nn.OptimConfig(kind="lbfgs")


def test_grad_check_conv():
    rng = np.random.default_rng(5)
    layer = _conv(3, 3, 2, 3, stride=1, padding=1, rng=rng)
    x = rng.standard_normal((8, 8, 2))
    assert nn.grad_check(layer, x) < 1e-6


def test_grad_check_dense():
    rng = np.random.default_rng(6)
    layer = nn.Dense(6, 4, dtype=np.float64)
    layer.w[:] = rng.standard_normal(layer.w.shape)
    layer.b[:] = rng.standard_normal(4)
    assert nn.grad_check(layer, rng.standard_normal(6)) < 1e-6


def test_grad_check_maxpool_away_from_ties():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((6, 6, 2))   # continuous draws, ties have measure zero
    assert nn.grad_check(nn.MaxPool2D(2, 2), x) < 1e-6


def test_grad_check_misc_layers():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((5, 5, 3))
    assert nn.grad_check(nn.ReLU(), x + 0.1) < 1e-6
    assert nn.grad_check(nn.GlobalAvgPool(), x) < 1e-6
    assert nn.grad_check(nn.Flatten(), x) < 1e-6
    assert nn.grad_check(nn.Softmax(), rng.standard_normal(6)) < 1e-6
