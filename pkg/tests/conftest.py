"""Shared test helpers: independent oracles and small graph builders."""

import numpy as np
import pytest

import nestslice.netgraph as ng
from nestslice.autograd import GradStore, backward


def random_grad_store(g, seed=0):
    """Gradient store filled with seeded noise (stands in for accumulation)."""
    rng = np.random.default_rng(seed)
    store = GradStore(g)
    for key in store.grads:
        store.grads[key] = rng.standard_normal(store.grads[key].shape)
    store.minibatch_count = 100
    return store


def matmul_triple_loop(xa, wa):
    """Naive triple-loop oracle for x^T . w (independent of the library)."""
    m, b = xa.shape
    n = wa.shape[1]
    out = np.zeros((b, n))
    for i in range(b):
        for j in range(n):
            for k in range(m):
                out[i, j] += xa[k, i] * wa[k, j]
    return out


def relu_mask_signature(g, x):
    _, cache, _ = ng.run_forward(g, x, want_cache=True)
    return [(e["layer"], e["pre_act"] > 0) for e in cache if "pre_act" in e]


def masks_equal(a, b):
    return all(
        la == lb and np.array_equal(ma, mb)
        for (la, ma), (lb, mb) in zip(a, b)
    )


def fd_gradient_check(g, x, y, n_checks=5, h=2.0 ** -10, seed=11,
                      loss="ce", slicing=None):
    """Worst relative error of backprop vs central finite differences.

    Central differences are only valid where the loss is differentiable,
    so perturbations that flip any relu sign between the two evaluations
    are resampled. The step is the realized float32 step, which removes
    weight-storage quantization from the comparison.
    """
    _, grads = backward(g, (x, y), loss=loss, slicing=slicing)
    base = relu_mask_signature(g, x)
    worst = 0.0

    def probe(flat, j, step):
        old = flat[j]
        flat[j] = old + step
        hp = float(flat[j])
        okp = masks_equal(base, relu_mask_signature(g, x))
        lp, _ = backward(g, (x, y), loss=loss, slicing=slicing)
        flat[j] = old - step
        hm = float(flat[j])
        okm = masks_equal(base, relu_mask_signature(g, x))
        lm, _ = backward(g, (x, y), loss=loss, slicing=slicing)
        flat[j] = old
        if not (okp and okm) or hp == hm:
            return None
        return (lp - lm) / (hp - hm)

    for (i, name), garr in grads.items():
        flat = g.weights[i][name].writable_array().reshape(-1)
        gflat = garr.reshape(-1)
        rng = np.random.default_rng(seed)
        checked = tries = 0
        while checked < n_checks and tries < 300:
            tries += 1
            j = int(rng.integers(flat.size))
            fd = None
            for step in (h, h / 4, h / 16):  # shrink past relu kinks
                fd = probe(flat, j, step)
                if fd is not None:
                    break
            if fd is None or abs(fd) < 1e-5:
                continue
            worst = max(worst, abs(gflat[j] - fd) / (abs(fd) + 1e-8))
            checked += 1
        assert checked == n_checks, f"could not sample layer {i} {name}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)
