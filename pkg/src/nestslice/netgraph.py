"""Layer and model definitions plus exact MAC accounting.

Supports the three benchmark families (dense, convolutional, and
depthwise-separable convolutional, each in sizes S and L) built from a
fixed layer vocabulary: dense, conv2d, depthwise, pointwise, batchnorm,
flatten. Convolutions default to 3x3 kernels, stride 1 and 'same'
padding; pooling is omitted. The final classifier layer is never
sliceable.

Width bookkeeping is central: every sliceable layer has an *active width*
(leading units that participate in compute). ``forward`` accepts a width
vector aligned with ``sliceable_indices``; depthwise and batchnorm layers
inherit the width of the layer they are bound to. MAC counts come in two
flavors: per-unit costs at full model widths (knapsack item weights) and
exact width-aware totals (``plan_macs``), which the instrumented forward
pass must reproduce multiplication for multiplication.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ExtentError, IntegrityError, ShapeMismatchError
from .tensor import Tensor, read_blobs, write_blob

BN_EPS = 1e-3

DENSE = "dense"
CONV2D = "conv2d"
DEPTHWISE = "depthwise"
POINTWISE = "pointwise"
BATCHNORM = "batchnorm"
FLATTEN = "flatten"

COMPUTE_KINDS = (DENSE, CONV2D, DEPTHWISE, POINTWISE)

# Hidden dense widths for the CNN family (the reference description names
# only the conv widths).
CNN_DENSE_WIDTHS = {"S": (64, 32), "L": (128, 64)}

DNN_WIDTH = {"S": 144, "L": 436}
CNN_CONV_WIDTHS = {"S": (28, 30), "L": (60, 76)}
DSCNN_WIDTH = {"S": 64, "L": 276}
DSCNN_BLOCKS = {"S": 4, "L": 5}


@dataclass
class LayerSpec:
    kind: str
    units: int = 0
    kernel: tuple | None = None
    stride: tuple = (1, 1)
    activation: str = "none"  # relu | none | softmax
    sliceable: bool = False

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "units": self.units,
            "kernel": list(self.kernel) if self.kernel else None,
            "stride": list(self.stride),
            "activation": self.activation,
            "sliceable": self.sliceable,
        }

    @classmethod
    def from_json(cls, d: dict) -> "LayerSpec":
        return cls(
            kind=d["kind"],
            units=int(d["units"]),
            kernel=tuple(d["kernel"]) if d.get("kernel") else None,
            stride=tuple(d.get("stride", (1, 1))),
            activation=d.get("activation", "none"),
            sliceable=bool(d.get("sliceable", False)),
        )


@dataclass
class UnitCost:
    layer: int
    unit: int
    macs: int


@dataclass
class ModelGraph:
    layers: list
    weights: list  # per layer: dict name -> Tensor, or None
    input_shape: tuple | int
    encoder_end: int
    # Dense layers whose kernel is stored transposed (units x fan_in) for
    # the cache-friendly multiply order; one flag bit per layer.
    transposed_dense: set = field(default_factory=set)

    def sliceable_indices(self) -> list:
        return [i for i, l in enumerate(self.layers) if l.sliceable]

    def compute_indices(self) -> list:
        return [i for i, l in enumerate(self.layers) if l.kind in COMPUTE_KINDS]

    def encoder_indices(self) -> list:
        return [i for i in self.compute_indices() if i <= self.encoder_end]

    def classifier_index(self) -> int:
        return self.compute_indices()[-1]

    def attached_batchnorm(self, i: int):
        j = i + 1
        if j < len(self.layers) and self.layers[j].kind == BATCHNORM:
            return j
        return None

    def next_compute_layer(self, i: int):
        for j in range(i + 1, len(self.layers)):
            if self.layers[j].kind in COMPUTE_KINDS:
                return j
        return None

    def prev_compute_layer(self, i: int):
        for j in range(i - 1, -1, -1):
            if self.layers[j].kind in COMPUTE_KINDS:
                return j
        return None

    def copy(self) -> "ModelGraph":
        ws = []
        for entry in self.weights:
            if entry is None:
                ws.append(None)
            else:
                ws.append(
                    {
                        k: Tensor(t.shape, np.array(t.flat), t.order)
                        for k, t in entry.items()
                    }
                )
        return ModelGraph(
            layers=[LayerSpec(**vars(l)) for l in self.layers],
            weights=ws,
            input_shape=self.input_shape,
            encoder_end=self.encoder_end,
            transposed_dense=set(self.transposed_dense),
        )


# -- reference architectures -------------------------------------------------


def _he_init(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / max(1, fan_in))).astype(
        np.float32
    )


def _dense_params(rng, fan_in, units):
    return {
        "kernel": Tensor.from_array(_he_init(rng, (fan_in, units), fan_in)),
        "bias": Tensor.from_array(np.zeros(units, dtype=np.float32)),
    }


def _bn_params(units):
    return {
        "gamma": Tensor.from_array(np.ones(units, dtype=np.float32)),
        "beta": Tensor.from_array(np.zeros(units, dtype=np.float32)),
        "mean": Tensor.from_array(np.zeros(units, dtype=np.float32)),
        "var": Tensor.from_array(np.ones(units, dtype=np.float32)),
    }


def build_reference(arch, size, input_shape=None, classes=10, seed=0):
    """Construct one of the reference models with seeded random weights.

    arch: 'dnn' | 'cnn' | 'dscnn'; size: 'S' | 'L'. ``input_shape`` is a
    flat length for dnn and (h, w, c) otherwise; defaults are 100 and
    (10, 10, 1).
    """
    arch = arch.lower()
    size = size.upper()
    if classes < 2:
        raise ConfigError("classes must be >= 2")
    if size not in ("S", "L"):
        raise ConfigError(f"unsupported size {size!r}")
    if arch not in ("dnn", "cnn", "dscnn"):
        raise ConfigError(f"unsupported architecture {arch!r}")
    rng = np.random.default_rng(seed)

    layers = []
    weights = []

    def add(spec, params):
        layers.append(spec)
        weights.append(params)

    if arch == "dnn":
        if input_shape is None:
            input_shape = 100
        if not np.isscalar(input_shape):
            input_shape = int(np.prod(input_shape))
        w = DNN_WIDTH[size]
        add(LayerSpec(DENSE, w, activation="relu", sliceable=True),
            _dense_params(rng, int(input_shape), w))
        add(LayerSpec(DENSE, w, activation="relu", sliceable=True),
            _dense_params(rng, w, w))
        add(LayerSpec(DENSE, classes, activation="softmax", sliceable=False),
            _dense_params(rng, w, classes))
        g = ModelGraph(layers, weights, int(input_shape), encoder_end=1)
    elif arch == "cnn":
        if input_shape is None:
            input_shape = (10, 10, 1)
        h, w_, c = input_shape
        w1, w2 = CNN_CONV_WIDTHS[size]
        add(LayerSpec(CONV2D, w1, kernel=(3, 3), activation="relu", sliceable=True),
            {"kernel": Tensor.from_array(_he_init(rng, (w1, 3, 3, c), 9 * c)),
             "bias": Tensor.from_array(np.zeros(w1, dtype=np.float32))})
        add(LayerSpec(BATCHNORM, w1), _bn_params(w1))
        add(LayerSpec(CONV2D, w2, kernel=(3, 3), activation="relu", sliceable=True),
            {"kernel": Tensor.from_array(_he_init(rng, (w2, 3, 3, w1), 9 * w1)),
             "bias": Tensor.from_array(np.zeros(w2, dtype=np.float32))})
        add(LayerSpec(BATCHNORM, w2), _bn_params(w2))
        add(LayerSpec(FLATTEN), None)
        d1, d2 = CNN_DENSE_WIDTHS[size]
        flat = h * w_ * w2
        add(LayerSpec(DENSE, d1, activation="relu", sliceable=True),
            _dense_params(rng, flat, d1))
        add(LayerSpec(DENSE, d2, activation="relu", sliceable=True),
            _dense_params(rng, d1, d2))
        add(LayerSpec(DENSE, classes, activation="softmax", sliceable=False),
            _dense_params(rng, d2, classes))
        g = ModelGraph(layers, weights, tuple(input_shape),
                       encoder_end=len(layers) - 2)
    else:  # dscnn
        if input_shape is None:
            input_shape = (10, 10, 1)
        h, w_, c = input_shape
        width = DSCNN_WIDTH[size]
        blocks = DSCNN_BLOCKS[size]
        add(LayerSpec(CONV2D, width, kernel=(3, 3), activation="relu", sliceable=True),
            {"kernel": Tensor.from_array(_he_init(rng, (width, 3, 3, c), 9 * c)),
             "bias": Tensor.from_array(np.zeros(width, dtype=np.float32))})
        add(LayerSpec(BATCHNORM, width), _bn_params(width))
        for _ in range(blocks):
            add(LayerSpec(DEPTHWISE, width, kernel=(3, 3), activation="relu"),
                {"kernel": Tensor.from_array(_he_init(rng, (width, 3, 3), 9)),
                 "bias": Tensor.from_array(np.zeros(width, dtype=np.float32))})
            add(LayerSpec(BATCHNORM, width), _bn_params(width))
            add(LayerSpec(POINTWISE, width, kernel=(1, 1), activation="relu",
                          sliceable=True),
                {"kernel": Tensor.from_array(
                    _he_init(rng, (width, 1, 1, width), width)),
                 "bias": Tensor.from_array(np.zeros(width, dtype=np.float32))})
            add(LayerSpec(BATCHNORM, width), _bn_params(width))
        add(LayerSpec(FLATTEN), None)
        add(LayerSpec(DENSE, classes, activation="softmax", sliceable=False),
            _dense_params(rng, h * w_ * width, classes))
        g = ModelGraph(layers, weights, tuple(input_shape),
                       encoder_end=len(layers) - 3)
    validate_graph(g)
    return g


def validate_graph(g: ModelGraph) -> None:
    cls = g.classifier_index()
    if g.layers[cls].sliceable:
        raise IntegrityError("classifier layer must not be sliceable")
    for i, spec in enumerate(g.layers):
        if spec.kind == POINTWISE and spec.kernel != (1, 1):
            raise IntegrityError(f"pointwise layer {i} must have 1x1 kernel")
        if spec.kind == BATCHNORM:
            prev = g.prev_compute_layer(i)
            if prev is None or g.layers[prev].units != spec.units:
                raise IntegrityError(
                    f"batchnorm layer {i} width must match preceding layer"
                )
    _check_weight_shapes(g)


def _input_dims(g):
    if np.isscalar(g.input_shape):
        return (int(g.input_shape),)
    return tuple(g.input_shape)


def _in_dims_at(g, i, dims):
    return dims[i - 1] if i > 0 else _input_dims(g)


def _check_weight_shapes(g):
    dims = layer_output_dims(g)
    for i, spec in enumerate(g.layers):
        params = g.weights[i]
        if spec.kind == FLATTEN:
            continue
        in_dim = _in_dims_at(g, i, dims)
        if spec.kind == DENSE:
            fan_in = int(np.prod(in_dim))
            want = ((spec.units, fan_in) if i in g.transposed_dense
                    else (fan_in, spec.units))
            if params["kernel"].shape != want:
                raise IntegrityError(
                    f"dense layer {i} kernel shape {params['kernel'].shape} != {want}"
                )
        elif spec.kind == CONV2D:
            kh, kw = spec.kernel
            if params["kernel"].shape != (spec.units, kh, kw, in_dim[2]):
                raise IntegrityError(f"conv layer {i} kernel shape mismatch")
        elif spec.kind == DEPTHWISE:
            kh, kw = spec.kernel
            if params["kernel"].shape != (spec.units, kh, kw):
                raise IntegrityError(f"depthwise layer {i} kernel shape mismatch")
        elif spec.kind == POINTWISE:
            if params["kernel"].shape != (spec.units, 1, 1, in_dim[2]):
                raise IntegrityError(f"pointwise layer {i} kernel shape mismatch")


def layer_output_dims(g: ModelGraph, widths=None) -> list:
    """Per-layer output dims at the given active widths (None = full)."""
    act = resolve_widths(g, widths)
    dims = []
    cur = _input_dims(g)
    for i, spec in enumerate(g.layers):
        u = act[i]
        if spec.kind == DENSE:
            cur = (int(u),)
        elif spec.kind in (CONV2D, DEPTHWISE, POINTWISE):
            h, w, _ = cur
            sh, sw = spec.stride
            # 'same' padding: output spatial size ceil(in / stride)
            cur = (-(-h // sh), -(-w // sw), int(u))
        elif spec.kind == BATCHNORM:
            pass
        elif spec.kind == FLATTEN:
            cur = (int(np.prod(cur)),)
        else:
            raise ConfigError(f"unknown layer kind {spec.kind}")
        dims.append(cur)
    return dims


def resolve_widths(g: ModelGraph, slicing=None) -> np.ndarray:
    """Expand a per-sliceable-layer width vector to all layers.

    Depthwise and batchnorm layers inherit the width of the compute layer
    they are bound to; non-sliceable compute layers keep full width.
    """
    act = np.array(
        [l.units if l.kind != FLATTEN else 0 for l in g.layers], dtype=np.int64
    )
    if slicing is not None:
        sl = [int(v) for v in slicing]
        idx = g.sliceable_indices()
        if len(sl) != len(idx):
            raise ShapeMismatchError(
                f"slicing has {len(sl)} entries, expected {len(idx)}"
            )
        for i, wdt in zip(idx, sl):
            if not (1 <= wdt <= g.layers[i].units):
                raise ExtentError(
                    f"width {wdt} out of range for layer {i} "
                    f"(1..{g.layers[i].units})"
                )
            act[i] = wdt
    for i, spec in enumerate(g.layers):
        if spec.kind in (DEPTHWISE, BATCHNORM):
            prev = g.prev_compute_layer(i)
            if prev is not None:
                act[i] = act[prev]
    return act


# -- MAC accounting ----------------------------------------------------------


def unit_macs(g: ModelGraph) -> list:
    """Per-unit MAC cost of every compute-layer unit at full model widths.

    Dense neuron: fan-in. Conv filter: kh*kw*cin*hout*wout. Depthwise
    filter: kh*kw*hout*wout. Pointwise filter: cin*hout*wout. Batchnorm
    contributes zero and produces no entries.
    """
    dims = layer_output_dims(g)
    out = []
    for i, spec in enumerate(g.layers):
        if spec.kind not in COMPUTE_KINDS:
            continue
        per = _per_unit_macs(g, i, _in_dims_at(g, i, dims), dims[i])
        out.extend(UnitCost(i, u, per) for u in range(spec.units))
    return out


def _per_unit_macs(g, i, in_dim, out_dim):
    spec = g.layers[i]
    if spec.kind == DENSE:
        return int(np.prod(in_dim))
    kh, kw = spec.kernel if spec.kernel else (1, 1)
    ho, wo, _ = out_dim
    if spec.kind == CONV2D:
        return kh * kw * in_dim[2] * ho * wo
    if spec.kind == DEPTHWISE:
        return kh * kw * ho * wo
    return in_dim[2] * ho * wo  # pointwise


def plan_macs(g: ModelGraph, slicing=None) -> int:
    """Exact per-sample MAC count at the given active widths."""
    act = resolve_widths(g, slicing)
    dims = layer_output_dims(g, slicing)
    total = 0
    for i, spec in enumerate(g.layers):
        if spec.kind not in COMPUTE_KINDS:
            continue
        per = _per_unit_macs(g, i, _in_dims_at(g, i, dims), dims[i])
        total += per * int(act[i])
    return total


def full_macs(g: ModelGraph) -> int:
    return plan_macs(g, None)


def param_counts(g: ModelGraph, slicing=None, encoder_only=False) -> int:
    """Learnable parameter count at the given widths.

    Counts kernels, biases and batchnorm gamma/beta (running statistics
    are not learnable). Depthwise/batchnorm widths are derived.
    """
    act = resolve_widths(g, slicing)
    dims = layer_output_dims(g, slicing)
    total = 0
    for i, spec in enumerate(g.layers):
        if encoder_only and i > g.encoder_end:
            continue
        u = int(act[i])
        in_dim = _in_dims_at(g, i, dims)
        if spec.kind == DENSE:
            total += int(np.prod(in_dim)) * u + u
        elif spec.kind == CONV2D:
            kh, kw = spec.kernel
            total += u * kh * kw * in_dim[2] + u
        elif spec.kind == DEPTHWISE:
            kh, kw = spec.kernel
            total += u * kh * kw + u
        elif spec.kind == POINTWISE:
            total += u * in_dim[2] + u
        elif spec.kind == BATCHNORM:
            total += 2 * u
    return total


# -- forward pass ------------------------------------------------------------


def _im2col(x, kh, kw, sh, sw):
    """Patch matrix for 'same' padding; x is (N, H, W, C) float64."""
    xp = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # N,Ho',Wo',C,kh,kw
    win = win[:, ::sh, ::sw]
    n_, ho, wo = win.shape[:3]
    c = x.shape[3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n_, ho, wo, kh * kw * c)
    return cols, ho, wo


def dense_feed_structure(g: ModelGraph, i: int):
    """How dense layer i receives its input.

    Returns ('spatial', (h, w, c_full)) when it follows a flatten of a
    spatial map (its kernel rows are grouped per channel), else
    ('flat', fan_in_full).
    """
    dims = layer_output_dims(g)
    if i > 0 and g.layers[i - 1].kind == FLATTEN:
        src = dims[i - 2] if i - 2 >= 0 else _input_dims(g)
        if len(src) == 3:
            return "spatial", src
    return "flat", int(np.prod(_in_dims_at(g, i, dims)))


def dense_active_kernel(g: ModelGraph, i: int, act_in, act_units):
    """Active dense kernel as a float64 (fan_in_active, units_active) array.

    ``act_in`` is the active input structure: channel count when the layer
    follows a flatten of a spatial map, flat length otherwise. Rows of a
    post-flatten kernel are grouped per channel, so channel slicing picks a
    strided subset rather than a plain prefix.
    """
    karr = g.weights[i]["kernel"].array.astype(np.float64)
    if i in g.transposed_dense:
        karr = karr.T  # logical (fan_in, units)
    feed, info = dense_feed_structure(g, i)
    if feed == "spatial":
        h, w, cfull = info
        k = karr.reshape(h * w, cfull, g.layers[i].units)[:, :act_in, :]
        k = k.reshape(h * w * act_in, g.layers[i].units)
    else:
        k = karr[:act_in, :]
    return k[:, :act_units]


def run_forward(g: ModelGraph, x, slicing=None, bn_stats=None,
                mask_widths=None, want_cache=False):
    """Shared forward pass.

    x: (N, ...) float array matching input_shape. Returns
    (logits, cache, macs) where macs is the exact per-sample multiply
    count of the dense/conv contractions. ``mask_widths`` runs the
    network at full width but zeroes features beyond the given width at
    every layer boundary (binary-mask baseline); mutually exclusive with
    ``slicing``. ``bn_stats`` optionally overrides batchnorm running
    statistics: dict layer index -> (mean, var) full-width arrays.
    """
    if mask_widths is not None and slicing is not None:
        raise ConfigError("slicing and mask_widths are mutually exclusive")
    masked = mask_widths is not None
    act = resolve_widths(g, mask_widths if masked else slicing)

    x = np.asarray(x, dtype=np.float64)
    if np.isscalar(g.input_shape):
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != g.input_shape:
            raise ShapeMismatchError(
                f"input shape {x.shape} incompatible with {g.input_shape}"
            )
    else:
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(g.input_shape):
            raise ShapeMismatchError(
                f"input shape {x.shape[1:]} != {g.input_shape}"
            )

    cache = [] if want_cache else None
    macs = 0
    cur = x

    for i, spec in enumerate(g.layers):
        u = spec.units if masked else int(act[i]) if spec.kind != FLATTEN else 0
        entry = {"kind": spec.kind, "layer": i, "input": cur} if want_cache else None

        if spec.kind == DENSE:
            feed, _ = dense_feed_structure(g, i)
            if masked:
                act_in = (g.layers[i - 2].units if feed == "spatial"
                          else cur.shape[1])
            else:
                act_in = (int(act[i - 2]) if feed == "spatial"
                          else cur.shape[1])
            k = dense_active_kernel(g, i, act_in, u)
            b = g.weights[i]["bias"].array.astype(np.float64)[:u]
            out = cur @ k + b
            macs += k.shape[0] * u
            if want_cache:
                entry["kernel"] = k
                entry["act_in"] = act_in
        elif spec.kind == CONV2D:
            kh, kw = spec.kernel
            sh, sw = spec.stride
            cols, ho, wo = _im2col(cur, kh, kw, sh, sw)
            cin = cur.shape[3]
            k2 = g.weights[i]["kernel"].array.astype(np.float64)[
                :u, :, :, :cin].reshape(u, kh * kw * cin)
            b = g.weights[i]["bias"].array.astype(np.float64)[:u]
            out = cols @ k2.T + b
            macs += ho * wo * kh * kw * cin * u
            if want_cache:
                entry["cols"] = cols
                entry["k2"] = k2
        elif spec.kind == DEPTHWISE:
            kh, kw = spec.kernel
            sh, sw = spec.stride
            cin = cur.shape[3]
            xp = np.pad(cur, ((0, 0), (kh // 2, kh // 2),
                              (kw // 2, kw // 2), (0, 0)))
            win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
            ho, wo = win.shape[1:3]
            kd = g.weights[i]["kernel"].array.astype(np.float64)[:cin]
            b = g.weights[i]["bias"].array.astype(np.float64)[:cin]
            out = np.einsum("nhwckl,ckl->nhwc", win, kd) + b
            macs += ho * wo * kh * kw * cin
            if want_cache:
                entry["win"] = win
                entry["kd"] = kd
        elif spec.kind == POINTWISE:
            cin = cur.shape[3]
            kp = g.weights[i]["kernel"].array.astype(np.float64)[:u, 0, 0, :cin]
            b = g.weights[i]["bias"].array.astype(np.float64)[:u]
            out = cur @ kp.T + b
            ho, wo = cur.shape[1:3]
            macs += ho * wo * cin * u
            if want_cache:
                entry["kp"] = kp
        elif spec.kind == BATCHNORM:
            cw = cur.shape[-1]
            if bn_stats is not None and i in bn_stats:
                mean = np.asarray(bn_stats[i][0], dtype=np.float64)[:cw]
                var = np.asarray(bn_stats[i][1], dtype=np.float64)[:cw]
            else:
                mean = g.weights[i]["mean"].array.astype(np.float64)[:cw]
                var = g.weights[i]["var"].array.astype(np.float64)[:cw]
            gamma = g.weights[i]["gamma"].array.astype(np.float64)[:cw]
            beta = g.weights[i]["beta"].array.astype(np.float64)[:cw]
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (cur - mean) * inv
            out = gamma * xhat + beta
            if want_cache:
                entry["xhat"] = xhat
                entry["inv"] = inv
                entry["gamma"] = gamma
        elif spec.kind == FLATTEN:
            out = cur.reshape(cur.shape[0], -1)
        else:
            raise ConfigError(f"unknown layer kind {spec.kind}")

        if spec.activation == "relu":
            if want_cache:
                entry["pre_act"] = out
            out = np.maximum(out, 0.0)
        # softmax is folded into the loss; forward returns logits

        if masked and spec.kind in COMPUTE_KINDS + (BATCHNORM,):
            width = int(act[i])
            out = np.array(out)
            out[..., width:] = 0.0
        if want_cache:
            cache.append(entry)
        cur = out
    return cur, cache, macs


def forward(g: ModelGraph, x, slicing=None, bn_stats=None, count_macs=False):
    """Class logits for a batch; optionally also the per-sample MAC count."""
    logits, _, macs = run_forward(g, x, slicing=slicing, bn_stats=bn_stats)
    if count_macs:
        return logits, macs
    return logits


def forward_masked(g: ModelGraph, x, mask_widths, bn_stats=None,
                   count_macs=False):
    """Full-width forward with binary masks at every layer boundary."""
    logits, _, macs = run_forward(g, x, mask_widths=mask_widths,
                                  bn_stats=bn_stats)
    if count_macs:
        return logits, macs
    return logits


def truncate(g: ModelGraph, slicing) -> ModelGraph:
    """Physically truncated copy of the model at the given widths.

    Test oracle: sliced forward must equal the forward of this copy.
    """
    act = resolve_widths(g, slicing)
    act_dims = layer_output_dims(g, slicing)
    out = g.copy()
    for i, spec in enumerate(out.layers):
        u = int(act[i])
        params = out.weights[i]
        in_act = _in_dims_at(g, i, act_dims)
        if spec.kind == DENSE:
            feed, _ = dense_feed_structure(g, i)
            act_in = int(act[i - 2]) if feed == "spatial" else int(np.prod(in_act))
            k = dense_active_kernel(g, i, act_in, u)
            params["kernel"] = Tensor.from_array(k.astype(np.float32))
            params["bias"] = Tensor.from_array(
                g.weights[i]["bias"].array[:u].astype(np.float32))
            out.transposed_dense.discard(i)
        elif spec.kind == CONV2D:
            params["kernel"] = Tensor.from_array(
                g.weights[i]["kernel"].array[:u, :, :, :in_act[2]])
            params["bias"] = Tensor.from_array(g.weights[i]["bias"].array[:u])
        elif spec.kind == DEPTHWISE:
            params["kernel"] = Tensor.from_array(g.weights[i]["kernel"].array[:u])
            params["bias"] = Tensor.from_array(g.weights[i]["bias"].array[:u])
        elif spec.kind == POINTWISE:
            params["kernel"] = Tensor.from_array(
                g.weights[i]["kernel"].array[:u, :, :, :in_act[2]])
            params["bias"] = Tensor.from_array(g.weights[i]["bias"].array[:u])
        elif spec.kind == BATCHNORM:
            for nm in ("gamma", "beta", "mean", "var"):
                params[nm] = Tensor.from_array(g.weights[i][nm].array[:u])
        if spec.kind in COMPUTE_KINDS + (BATCHNORM,):
            spec.units = u
    validate_graph(out)
    return out


# -- manifest ----------------------------------------------------------------

_PARAM_ORDER = {
    DENSE: ("kernel", "bias"),
    CONV2D: ("kernel", "bias"),
    DEPTHWISE: ("kernel", "bias"),
    POINTWISE: ("kernel", "bias"),
    BATCHNORM: ("gamma", "beta", "mean", "var"),
}


def save_manifest(g: ModelGraph, out_dir, name="model") -> str:
    """Write the JSON manifest plus one weight blob file per layer."""
    os.makedirs(out_dir, exist_ok=True)
    layer_entries = []
    for i, spec in enumerate(g.layers):
        entry = spec.to_json()
        if g.weights[i] is not None:
            rel = f"{name}_layer{i:02d}.bin"
            with open(os.path.join(out_dir, rel), "wb") as fh:
                for nm in _PARAM_ORDER[spec.kind]:
                    write_blob(g.weights[i][nm], fh)
            entry["weights_file"] = rel
        else:
            entry["weights_file"] = None
        layer_entries.append(entry)
    doc = {
        "input_shape": (g.input_shape if np.isscalar(g.input_shape)
                        else list(g.input_shape)),
        "encoder_end": g.encoder_end,
        "transposed_dense": sorted(g.transposed_dense),
        "layers": layer_entries,
    }
    path = os.path.join(out_dir, f"{name}.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
    return path


def load_manifest(path) -> ModelGraph:
    with open(path) as fh:
        doc = json.load(fh)
    base = os.path.dirname(path)
    layers = []
    weights = []
    for entry in doc["layers"]:
        spec = LayerSpec.from_json(entry)
        layers.append(spec)
        rel = entry.get("weights_file")
        if rel is None:
            weights.append(None)
            continue
        with open(os.path.join(base, rel), "rb") as fh:
            blobs = read_blobs(fh)
        names = _PARAM_ORDER[spec.kind]
        if len(blobs) != len(names):
            raise IntegrityError(
                f"weight file {rel} holds {len(blobs)} tensors, "
                f"expected {len(names)}"
            )
        weights.append(dict(zip(names, blobs)))
    ishape = doc["input_shape"]
    g = ModelGraph(
        layers=layers,
        weights=weights,
        input_shape=ishape if np.isscalar(ishape) else tuple(ishape),
        encoder_end=int(doc["encoder_end"]),
        transposed_dense=set(doc.get("transposed_dense", [])),
    )
    validate_graph(g)
    return g
