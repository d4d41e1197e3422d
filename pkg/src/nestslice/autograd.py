"""Reverse-mode differentiation for the fixed layer vocabulary.

This is not a general tape autodiff: each supported layer kind has a
hand-written backward rule driven by the cache that ``run_forward``
produces. That is enough to (a) accumulate the gradient sums used for
importance scoring and (b) run (joint) fine-tuning.

Batchnorm running statistics are treated as constants (inference-mode
statistics), which matches scoring and tuning of an already-trained
model. With slicing active, weights outside the active slice receive an
exactly-zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import netgraph as ng
from .errors import DataError, NumericError, ShapeMismatchError


def _one_hot(labels, classes):
    labels = np.asarray(labels)
    if labels.ndim == 2:  # already one-hot
        return labels.astype(np.float64)
    out = np.zeros((labels.shape[0], classes))
    out[np.arange(labels.shape[0]), labels.astype(int)] = 1.0
    return out


def _loss_and_dlogits(logits, labels, loss):
    n = logits.shape[0]
    if loss == "ce":
        y = _one_hot(labels, logits.shape[1])
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        value = float(-(y * logp).sum() / n)
        dlogits = (np.exp(logp) - y) / n
    elif loss == "half_sse":
        # test hook: 0.5 * mean squared error against raw target vectors
        t = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
        diff = logits - t
        value = float(0.5 * (diff * diff).sum() / n)
        dlogits = diff / n
    else:
        raise ShapeMismatchError(f"unknown loss {loss!r}")
    return value, dlogits


class GradStore:
    """Accumulated gradient sums, one array per weight tensor.

    Keys are (layer_index, param_name); shapes mirror the model weights
    exactly. Accumulation is additive across minibatches; ``reset``
    zeroes all entries and the counter.
    """

    def __init__(self, g: ng.ModelGraph):
        self.grads = {}
        for i, params in enumerate(g.weights):
            if params is None:
                continue
            for name, t in params.items():
                if name in ("mean", "var"):
                    continue  # not learnable
                self.grads[(i, name)] = np.zeros(t.shape, dtype=np.float64)
        self.minibatch_count = 0

    def add(self, delta: dict) -> None:
        for key, arr in delta.items():
            self.grads[key] += arr
        self.minibatch_count += 1

    def reset(self) -> None:
        for arr in self.grads.values():
            arr[...] = 0.0
        self.minibatch_count = 0

    def check_shapes(self, g: ng.ModelGraph) -> None:
        for (i, name), arr in self.grads.items():
            if arr.shape != g.weights[i][name].shape:
                raise ShapeMismatchError(
                    f"gradient shape {arr.shape} != weight shape "
                    f"{g.weights[i][name].shape} for layer {i} {name}"
                )


def backward(g: ng.ModelGraph, batch, slicing=None, loss="ce", bn_stats=None):
    """Gradients of the mean loss over one minibatch.

    batch: (inputs, labels). Returns (loss_value, grads) where grads maps
    (layer, param) to a full-shape float64 array; sliced-off weights get
    exactly zero.
    """
    x, labels = batch
    if len(np.asarray(labels).reshape(-1)) == 0:
        raise DataError("empty minibatch")
    logits, cache, _ = ng.run_forward(g, x, slicing=slicing, bn_stats=bn_stats,
                                      want_cache=True)
    value, dlogits = _loss_and_dlogits(logits, labels, loss)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value}; logits range "
                           f"[{np.min(logits)}, {np.max(logits)}]")

    act = ng.resolve_widths(g, slicing)
    grads = {}
    d = dlogits
    for entry in reversed(cache):
        i = entry["layer"]
        spec = g.layers[i]
        if "pre_act" in entry:
            d = d * (entry["pre_act"] > 0)
        if spec.kind == ng.DENSE:
            k = entry["kernel"]
            xin = entry["input"]
            u = int(act[i])
            dk_active = xin.T @ d
            db = d.sum(axis=0)
            full = g.weights[i]["kernel"]
            dk_full = np.zeros(
                (int(np.prod(full.shape)) // spec.units, spec.units)
                if i not in g.transposed_dense else
                (full.shape[1], full.shape[0]))
            # scatter active rows/cols back into the full logical kernel
            feed, info = ng.dense_feed_structure(g, i)
            if feed == "spatial":
                h, w, cfull = info
                cact = entry["act_in"]
                view = dk_full.reshape(h * w, cfull, spec.units)
                view[:, :cact, :u] = dk_active.reshape(h * w, cact, u)
            else:
                dk_full[: dk_active.shape[0], :u] = dk_active
            if i in g.transposed_dense:
                dk_full = dk_full.T
            grads[(i, "kernel")] = dk_full.reshape(full.shape)
            db_full = np.zeros(spec.units)
            db_full[:u] = db
            grads[(i, "bias")] = db_full
            d = d @ k.T
        elif spec.kind == ng.CONV2D:
            cols = entry["cols"]
            k2 = entry["k2"]
            u, kk = k2.shape
            kh, kw = spec.kernel
            cin = kk // (kh * kw)
            dk2 = np.tensordot(d, cols, axes=([0, 1, 2], [0, 1, 2]))
            full = g.weights[i]["kernel"]
            dk_full = np.zeros(full.shape)
            dk_full[:u, :, :, :cin] = dk2.reshape(u, kh, kw, cin)
            grads[(i, "kernel")] = dk_full
            db_full = np.zeros(spec.units)
            db_full[:u] = d.sum(axis=(0, 1, 2))
            grads[(i, "bias")] = db_full
            dcols = d @ k2  # (N, ho, wo, kh*kw*cin)
            d = _col2im(dcols, entry["input"].shape, kh, kw, spec.stride)
        elif spec.kind == ng.DEPTHWISE:
            win = entry["win"]
            kd = entry["kd"]
            cin = kd.shape[0]
            dkd = np.einsum("nhwc,nhwckl->ckl", d, win)
            full = g.weights[i]["kernel"]
            dk_full = np.zeros(full.shape)
            dk_full[:cin] = dkd
            grads[(i, "kernel")] = dk_full
            db_full = np.zeros(spec.units)
            db_full[:cin] = d.sum(axis=(0, 1, 2))
            grads[(i, "bias")] = db_full
            d = _depthwise_dx(d, kd, entry["input"].shape, spec.kernel,
                              spec.stride)
        elif spec.kind == ng.POINTWISE:
            kp = entry["kp"]
            u, cin = kp.shape
            xin = entry["input"]
            dkp = np.einsum("nhwu,nhwc->uc", d, xin)
            full = g.weights[i]["kernel"]
            dk_full = np.zeros(full.shape)
            dk_full[:u, 0, 0, :cin] = dkp
            grads[(i, "kernel")] = dk_full
            db_full = np.zeros(spec.units)
            db_full[:u] = d.sum(axis=(0, 1, 2))
            grads[(i, "bias")] = db_full
            d = d @ kp
        elif spec.kind == ng.BATCHNORM:
            xhat = entry["xhat"]
            inv = entry["inv"]
            gamma = entry["gamma"]
            cw = xhat.shape[-1]
            axes = tuple(range(d.ndim - 1))
            dgamma = (d * xhat).sum(axis=axes)
            dbeta = d.sum(axis=axes)
            dg_full = np.zeros(spec.units)
            dg_full[:cw] = dgamma
            db_full = np.zeros(spec.units)
            db_full[:cw] = dbeta
            grads[(i, "gamma")] = dg_full
            grads[(i, "beta")] = db_full
            d = d * gamma * inv
        elif spec.kind == ng.FLATTEN:
            d = d.reshape(entry["input"].shape)
    # layers without parameters contribute nothing; fill missing keys with
    # zeros so GradStore addition stays total
    for i, params in enumerate(g.weights):
        if params is None:
            continue
        for name in params:
            if name in ("mean", "var"):
                continue
            if (i, name) not in grads:
                grads[(i, name)] = np.zeros(params[name].shape)
    return value, grads


def _col2im(dcols, in_shape, kh, kw, stride):
    n, h, w, c = in_shape
    sh, sw = stride
    ho = -(-h // sh)
    wo = -(-w // sw)
    dc = dcols.reshape(n, ho, wo, kh, kw, c)
    dxp = np.zeros((n, h + 2 * (kh // 2), w + 2 * (kw // 2), c))
    for a in range(kh):
        for b in range(kw):
            dxp[:, a:a + ho * sh:sh, b:b + wo * sw:sw, :] += dc[:, :, :, a, b, :]
    ph, pw = kh // 2, kw // 2
    return dxp[:, ph:ph + h, pw:pw + w, :]


def _depthwise_dx(d, kd, in_shape, kernel, stride):
    kh, kw = kernel
    n, h, w, c = in_shape
    sh, sw = stride
    ho = -(-h // sh)
    wo = -(-w // sw)
    dxp = np.zeros((n, h + 2 * (kh // 2), w + 2 * (kw // 2), c))
    for a in range(kh):
        for b in range(kw):
            dxp[:, a:a + ho * sh:sh, b:b + wo * sw:sw, :] += d * kd[:, a, b]
    ph, pw = kh // 2, kw // 2
    return dxp[:, ph:ph + h, pw:pw + w, :]


def accumulate_importance_grads(g: ng.ModelGraph, stream,
                                n_batches: int = 100) -> GradStore:
    """Sum per-batch gradients over exactly ``n_batches`` minibatches."""
    store = GradStore(g)
    it = iter(stream)
    for b in range(n_batches):
        try:
            batch = next(it)
        except StopIteration:
            raise DataError(
                f"minibatch stream exhausted after {b} of {n_batches} batches"
            ) from None
        _, grads = backward(g, batch)
        store.add(grads)
    return store


def sgd_step(g: ng.ModelGraph, grads: dict, lr: float, slicing=None) -> None:
    """In-place SGD update on the active weights.

    ``slicing`` is accepted for symmetry with backward; gradients produced
    under slicing are already exactly zero outside the active slice, so a
    full-array update leaves inactive weights bit-identical.
    """
    if lr <= 0:
        raise ShapeMismatchError("learning rate must be positive")
    for (i, name), grad in grads.items():
        arr = g.weights[i][name].writable_array()
        arr -= (lr * grad).astype(np.float32)


class Adam:
    """Adam with the common defaults; meant for full-width pretraining.

    Moment state does not track slicing masks, so use SGD when alternating
    sliced updates must keep inactive weights untouched.
    """

    def __init__(self, g: ng.ModelGraph, beta1=0.9, beta2=0.999, eps=1e-7):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in GradStore(g).grads.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.m.items()}

    def step(self, g: ng.ModelGraph, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for key, grad in grads.items():
            self.m[key] = b1 * self.m[key] + (1 - b1) * grad
            self.v[key] = b2 * self.v[key] + (1 - b2) * grad * grad
            mhat = self.m[key] / (1 - b1 ** self.t)
            vhat = self.v[key] / (1 - b2 ** self.t)
            i, name = key
            arr = g.weights[i][name].writable_array()
            arr -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(np.float32)


@dataclass
class TrainConfig:
    """Training hyper-parameters.

    The learning-rate schedule is piecewise constant: a list of
    (step, rate) pairs with increasing steps; the rate of the last pair
    whose step is <= the global step applies.
    """

    batch_size: int = 100
    epochs: int = 10
    learning_rate_schedule: list = field(
        default_factory=lambda: [(0, 1e-3), (10_000, 1e-4)]
    )
    loss: str = "ce"

    def __post_init__(self):
        steps = [s for s, _ in self.learning_rate_schedule]
        if any(r <= 0 for _, r in self.learning_rate_schedule):
            raise ShapeMismatchError("learning rates must be positive")
        if sorted(steps) != steps or len(set(steps)) != len(steps):
            raise ShapeMismatchError("schedule steps must be increasing")

    def lr_at(self, step: int) -> float:
        rate = self.learning_rate_schedule[0][1]
        for s, r in self.learning_rate_schedule:
            if step >= s:
                rate = r
        return rate

    def to_json(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "learning_rate_schedule": [
                [int(s), float(r)] for s, r in self.learning_rate_schedule
            ],
            "loss": self.loss,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        kw = dict(d)
        if "learning_rate_schedule" in kw:
            kw["learning_rate_schedule"] = [
                (int(s), float(r)) for s, r in kw["learning_rate_schedule"]
            ]
        return cls(**kw)
