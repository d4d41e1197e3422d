import numpy as np
import pytest

import nestslice.netgraph as ng
from conftest import fd_gradient_check, random_grad_store
from nestslice.autograd import (Adam, TrainConfig,
                                accumulate_importance_grads, backward,
                                sgd_step)
from nestslice.errors import DataError, NumericError, ShapeMismatchError
from nestslice.netgraph import LayerSpec, ModelGraph, build_reference
from nestslice.tensor import Tensor


def scalar_net(w0=3.0):
    layers = [LayerSpec("dense", 1, activation="none")]
    weights = [{
        "kernel": Tensor.from_array(np.array([[w0]], dtype=np.float32)),
        "bias": Tensor.from_array(np.zeros(1, dtype=np.float32)),
    }]
    return ModelGraph(layers, weights, 1, encoder_end=0)


def test_scalar_chain_rule():
    # half squared error of w*x at w=3, x=1, target 0: d/dw = 3
    g = scalar_net(3.0)
    loss, grads = backward(g, (np.array([[1.0]]), np.array([[0.0]])),
                           loss="half_sse")
    assert loss == pytest.approx(4.5)
    assert grads[(0, "kernel")][0, 0] == pytest.approx(3.0)
    # matches a finite difference
    h = 1e-3
    g.weights[0]["kernel"].writable_array()[0, 0] = 3.0 + h
    lp, _ = backward(g, (np.array([[1.0]]), np.array([[0.0]])),
                     loss="half_sse")
    g.weights[0]["kernel"].writable_array()[0, 0] = 3.0 - h
    lm, _ = backward(g, (np.array([[1.0]]), np.array([[0.0]])),
                     loss="half_sse")
    # float32 weight storage quantizes the +-h points
    assert (lp - lm) / (2 * h) == pytest.approx(3.0, rel=1e-3)


def one_block_net(rng, relu=True):
    """conv+bn, dw+bn, pw+bn, dense: every layer kind in one small graph."""
    act = "relu" if relu else "none"

    def t(shape):
        return Tensor.from_array(rng.standard_normal(shape).astype(np.float32))

    def bn(u):
        return {"gamma": t(u), "beta": t(u),
                "mean": Tensor.from_array(
                    (rng.standard_normal(u) * 0.1).astype(np.float32)),
                "var": Tensor.from_array(
                    (np.abs(rng.standard_normal(u)) + 1).astype(np.float32))}

    layers = [
        LayerSpec("conv2d", 5, kernel=(3, 3), activation=act, sliceable=True),
        LayerSpec("batchnorm", 5),
        LayerSpec("depthwise", 5, kernel=(3, 3), activation=act),
        LayerSpec("batchnorm", 5),
        LayerSpec("pointwise", 6, kernel=(1, 1), activation=act,
                  sliceable=True),
        LayerSpec("batchnorm", 6),
        LayerSpec("flatten"),
        LayerSpec("dense", 4, activation="none"),
    ]
    weights = [
        {"kernel": t((5, 3, 3, 2)), "bias": t(5)}, bn(5),
        {"kernel": t((5, 3, 3)), "bias": t(5)}, bn(5),
        {"kernel": t((6, 1, 1, 5)), "bias": t(6)}, bn(6),
        None,
        {"kernel": t((6 * 6 * 6, 4)), "bias": t(4)},
    ]
    return ModelGraph(layers, weights, (6, 6, 2), encoder_end=5)


@pytest.mark.parametrize("case", ["dnn", "block", "block_relu", "dnn_sliced"])
def test_gradcheck_vs_finite_differences(case, rng):
    if case.startswith("dnn"):
        g = build_reference("dnn", "S", 16, classes=4, seed=5)
        g = ng.truncate(g, [24, 24])
        sl = [20, 12] if case == "dnn_sliced" else None
        x = rng.standard_normal((4, 16))
    else:
        g = one_block_net(rng, relu=(case == "block_relu"))
        sl = None
        x = rng.standard_normal((4, 6, 6, 2))
    y = rng.integers(0, 4, 4)
    worst = fd_gradient_check(g, x, y, slicing=sl)
    assert worst < 1e-4


def test_sliced_backward_equals_truncated_backward(rng):
    g = build_reference("dscnn", "S", (6, 6, 1), classes=4, seed=7)
    sl = [10, 40, 12, 20, 9]
    x = rng.standard_normal((4, 6, 6, 1))
    y = rng.integers(0, 4, 4)
    loss_s, grads_s = backward(g, (x, y), slicing=sl)
    gt = ng.truncate(g, sl)
    loss_t, grads_t = backward(gt, (x, y))
    assert loss_s == pytest.approx(loss_t, abs=1e-12)
    act = ng.resolve_widths(g, sl)
    # compare the active region of a few layers
    for i in [0, 2, 4]:  # conv, dw, pw
        gs = grads_s[(i, "kernel")]
        gtv = grads_t[(i, "kernel")]
        sl_idx = tuple(slice(0, s) for s in gtv.shape)
        np.testing.assert_allclose(gs[sl_idx], gtv, atol=1e-10)


def test_gradcheck_transposed_dense_store(rng):
    # the cache-friendly layout stores dense kernels transposed; backward
    # must scatter into the stored orientation
    from nestslice.nest import _transpose_dense_store
    g = build_reference("dnn", "S", 12, classes=4, seed=6)
    g = ng.truncate(g, [20, 16])
    gt = _transpose_dense_store(g)
    assert gt.transposed_dense == {0, 1, 2}
    x = rng.standard_normal((4, 12))
    y = rng.integers(0, 4, 4)
    worst = fd_gradient_check(gt, x, y)
    assert worst < 1e-4
    # same gradients as the row-major store, transposed
    _, ga = backward(g, (x, y))
    _, gb = backward(gt, (x, y))
    for i in (0, 1, 2):
        np.testing.assert_allclose(gb[(i, "kernel")],
                                   ga[(i, "kernel")].T, atol=1e-12)


def test_sliced_classifier_gradients_channel_grouped(rng):
    # the classifier after a flatten sees channel-grouped rows; with the
    # last conv sliced, gradients land only on the active channel groups
    g = build_reference("dscnn", "S", (6, 6, 1), classes=4, seed=7)
    sl = [10, 40, 12, 20, 9]
    x = rng.standard_normal((4, 6, 6, 1))
    y = rng.integers(0, 4, 4)
    _, grads_s = backward(g, (x, y), slicing=sl)
    cls = g.classifier_index()
    gk = grads_s[(cls, "kernel")].reshape(6 * 6, 64, 4)
    assert np.all(gk[:, 9:, :] == 0.0)  # inactive channel groups untouched
    gt = ng.truncate(g, sl)
    _, grads_t = backward(gt, (x, y))
    np.testing.assert_allclose(
        gk[:, :9, :].reshape(-1, 4),
        grads_t[(cls, "kernel")], atol=1e-10)


def test_gradient_locality_under_slicing(rng):
    g = build_reference("dnn", "S", 10, classes=3, seed=8)
    sl = [50, 70]
    x = rng.standard_normal((6, 10))
    y = rng.integers(0, 3, 6)
    _, grads = backward(g, (x, y), slicing=sl)
    assert np.all(grads[(0, "kernel")][:, 50:] == 0.0)
    assert np.all(grads[(0, "bias")][50:] == 0.0)
    assert np.all(grads[(1, "kernel")][50:, :] == 0.0)
    assert np.all(grads[(1, "kernel")][:, 70:] == 0.0)
    assert np.all(grads[(2, "kernel")][70:, :] == 0.0)


def test_nan_loss_raises_numeric_error(rng):
    g = build_reference("dnn", "S", 8, classes=3)
    g.weights[0]["kernel"].writable_array()[0, 0] = np.float32("nan")
    with pytest.raises(NumericError, match="loss"):
        backward(g, (rng.standard_normal((2, 8)), np.array([0, 1])))


def test_empty_batch_rejected():
    g = build_reference("dnn", "S", 8, classes=3)
    with pytest.raises(DataError):
        backward(g, (np.zeros((0, 8)), np.zeros(0)))


# -- accumulation -----------------------------------------------------------


def batches_of(rng, g, n, batch=4):
    for _ in range(n):
        yield rng.standard_normal((batch, 8)), rng.integers(0, 3, batch)


def test_accumulate_single_batch_equals_backward(rng):
    g = build_reference("dnn", "S", 8, classes=3, seed=9)
    x = rng.standard_normal((4, 8))
    y = rng.integers(0, 3, 4)
    store = accumulate_importance_grads(g, iter([(x, y)]), n_batches=1)
    _, grads = backward(g, (x, y))
    for key in grads:
        np.testing.assert_array_equal(store.grads[key], grads[key])
    assert store.minibatch_count == 1


def test_accumulate_is_additive(rng):
    g = build_reference("dnn", "S", 8, classes=3, seed=9)
    b1 = (rng.standard_normal((4, 8)), rng.integers(0, 3, 4))
    b2 = (rng.standard_normal((4, 8)), rng.integers(0, 3, 4))
    store = accumulate_importance_grads(g, iter([b1, b2]), n_batches=2)
    _, g1 = backward(g, b1)
    _, g2 = backward(g, b2)
    for key in g1:
        np.testing.assert_allclose(store.grads[key], g1[key] + g2[key],
                                   atol=1e-12)


def test_accumulate_default_is_100_batches(rng):
    g = build_reference("dnn", "S", 8, classes=3, seed=9)
    import inspect
    sig = inspect.signature(accumulate_importance_grads)
    assert sig.parameters["n_batches"].default == 100
    store = accumulate_importance_grads(
        g, batches_of(rng, g, 100), n_batches=100)
    assert store.minibatch_count == 100


def test_accumulate_exhausted_stream_names_count(rng):
    g = build_reference("dnn", "S", 8, classes=3, seed=9)
    with pytest.raises(DataError, match="3"):
        accumulate_importance_grads(g, batches_of(rng, g, 3), n_batches=10)


# -- optimizer steps ----------------------------------------------------------


def test_sgd_zero_gradient_no_change():
    g = build_reference("dnn", "S", 8, classes=3, seed=1)
    before = {k: np.array(t.flat) for i, p in enumerate(g.weights)
              for k, t in [((i, n), t) for n, t in p.items()]}
    zero = {(i, n): np.zeros(t.shape) for i, p in enumerate(g.weights)
            for n, t in p.items() if n not in ("mean", "var")}
    sgd_step(g, zero, lr=0.5)
    after = {k: np.array(t.flat) for i, p in enumerate(g.weights)
             for k, t in [((i, n), t) for n, t in p.items()]}
    for key in before:
        np.testing.assert_array_equal(before[key], after[key])


def test_sgd_quadratic_descent_trace():
    # loss = 0.5 (w x + b)^2 at x=1, target 0: the output s = w + b decays
    # by (1 - 2 lr) per step and both parameters move by lr*s
    g = scalar_net(1.0)
    batch = (np.array([[1.0]]), np.array([[0.0]]))
    lr = 0.25
    w, b, s = 1.0, 0.0, 1.0
    for _ in range(6):
        _, grads = backward(g, batch, loss="half_sse")
        sgd_step(g, grads, lr=lr)
        w, b = w - lr * s, b - lr * s
        s = w + b
        assert g.weights[0]["kernel"].array[0, 0] == pytest.approx(w, rel=1e-5)
        assert g.weights[0]["bias"].array[0] == pytest.approx(b, rel=1e-5)


def test_sliced_sgd_leaves_inactive_weights_bit_identical(rng):
    g = build_reference("dnn", "S", 10, classes=3, seed=2)
    sl = [40, 60]
    before0 = np.array(g.weights[0]["kernel"].array)
    before1 = np.array(g.weights[1]["kernel"].array)
    x = rng.standard_normal((5, 10))
    y = rng.integers(0, 3, 5)
    _, grads = backward(g, (x, y), slicing=sl)
    sgd_step(g, grads, lr=0.1, slicing=sl)
    after0 = g.weights[0]["kernel"].array
    after1 = g.weights[1]["kernel"].array
    np.testing.assert_array_equal(after0[:, 40:], before0[:, 40:])
    np.testing.assert_array_equal(after1[40:, :], before1[40:, :])
    np.testing.assert_array_equal(after1[:, 60:], before1[:, 60:])
    assert not np.array_equal(after0[:, :40], before0[:, :40])


def test_loss_decreases_on_separable_problem(rng):
    # sanity: 50 steps of SGD fit a linearly separable 2-class problem
    g = build_reference("dnn", "S", 4, classes=2, seed=3)
    n = 64
    y = rng.integers(0, 2, n)
    x = rng.standard_normal((n, 4)) + np.where(y[:, None] == 1, 3.0, -3.0)
    losses = []
    for _ in range(50):
        loss, grads = backward(g, (x, y))
        sgd_step(g, grads, lr=0.05)
        losses.append(loss)
    assert losses[-1] < 0.2 * losses[0]


def test_adam_reduces_loss(rng):
    g = build_reference("dnn", "S", 4, classes=2, seed=3)
    adam = Adam(g)
    n = 64
    y = rng.integers(0, 2, n)
    x = rng.standard_normal((n, 4)) + np.where(y[:, None] == 1, 3.0, -3.0)
    first, _ = backward(g, (x, y))
    for _ in range(30):
        loss, grads = backward(g, (x, y))
        adam.step(g, grads, lr=1e-3)
    assert loss < first


# -- train config ---------------------------------------------------------------


def test_train_config_schedule():
    tc = TrainConfig(batch_size=100, epochs=2,
                     learning_rate_schedule=[(0, 1e-3), (100, 1e-4)])
    assert tc.lr_at(0) == 1e-3
    assert tc.lr_at(99) == 1e-3
    assert tc.lr_at(100) == 1e-4
    assert tc.lr_at(10_000) == 1e-4


def test_train_config_validation():
    with pytest.raises(ShapeMismatchError):
        TrainConfig(learning_rate_schedule=[(0, -1.0)])
    with pytest.raises(ShapeMismatchError):
        TrainConfig(learning_rate_schedule=[(10, 1e-3), (0, 1e-4)])


def test_grad_store_shapes_and_reset():
    g = build_reference("cnn", "S", (8, 8, 1), classes=3)
    store = random_grad_store(g)
    store.check_shapes(g)
    assert all(name not in ("mean", "var") for _, name in store.grads)
    store.reset()
    assert store.minibatch_count == 0
    assert all(np.all(v == 0) for v in store.grads.values())
