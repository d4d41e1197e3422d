"""Runtime for a family of nested subnetworks over one weight store.

One permuted graph plus a slicing plan describes every subnetwork: the
active weights of a smaller row are a leading slice of the larger row's,
so no weights are ever duplicated. Switching the active subnetwork
rewrites one integer width register per sliceable layer (plus a flag bit
per cache-optimized layer) and copies zero weight elements; the module
asserts the latter through the tensor copy counter.

Batchnorm running statistics are the one width-dependent quantity, so
they are kept per plan row (learnable scale/shift stay shared and
sliced). ``recalibrate_bn`` refreshes them with a data pass per row.

The cache-optimized layout stores dense kernels transposed so each
neuron's weights are contiguous; inference then uses the flipped multiply
order. The binary-mask baseline (``masked_infer``) runs the full-width
computation with zeroed inactive units: same numbers, full-model multiply
count.
"""

from __future__ import annotations

import json
import os
import time
import zipfile
from dataclasses import dataclass

import numpy as np

from . import netgraph as ng
from . import tensor as tz
from .errors import ConfigError, ExtentError, IntegrityError
from .planner import SlicingPlan
from .tensor import Tensor

STANDARD = "standard"
CACHE_OPTIMIZED = "cache_optimized"


@dataclass
class SwitchStats:
    integers_updated: int
    weights_copied: int
    elapsed: float


class NestedModel:
    """One shared weight store, a plan, and an active-row register."""

    def __init__(self, graph: ng.ModelGraph, plan: SlicingPlan,
                 layout: str = STANDARD):
        if layout not in (STANDARD, CACHE_OPTIMIZED):
            raise ConfigError(f"unknown layout {layout!r}")
        plan.validate(graph)
        self.plan = plan
        self.layout = layout
        if layout == CACHE_OPTIMIZED:
            graph = _transpose_dense_store(graph)
        self.graph = graph
        self.active = 0
        self.width_registers = plan.row_widths(0)
        # per-row batchnorm running statistics, full-width float32 arrays
        # (float32 end to end so bundles round-trip bit-exactly)
        self.bn_stats = [
            {
                i: (np.array(graph.weights[i]["mean"].flat, dtype=np.float32),
                    np.array(graph.weights[i]["var"].flat, dtype=np.float32))
                for i, l in enumerate(graph.layers)
                if l.kind == ng.BATCHNORM
            }
            for _ in range(plan.n_rows)
        ]

    # -- switching -------------------------------------------------------

    def activate(self, k: int) -> SwitchStats:
        """Point subsequent inference at plan row k; O(layers) integers."""
        if not (0 <= k < self.plan.n_rows):
            raise ExtentError(
                f"row {k} out of range (plan has {self.plan.n_rows} rows)"
            )
        copies_before = tz.copy_counter()
        t0 = time.perf_counter()
        widths = self.plan.row_widths(k)
        for j in range(len(self.width_registers)):
            self.width_registers[j] = widths[j]
        self.active = k
        integers = len(widths)
        if self.layout == CACHE_OPTIMIZED:
            integers += len(self.graph.transposed_dense)  # flag bits
        elapsed = time.perf_counter() - t0
        copied = tz.copy_counter() - copies_before
        if copied != 0:
            raise IntegrityError(f"activate copied {copied} weight elements")
        return SwitchStats(integers, copied, elapsed)

    # -- inference -------------------------------------------------------

    def infer(self, x, count_macs=False):
        """Logits of the active subnetwork."""
        logits, _, macs = ng.run_forward(
            self.graph, x, slicing=self.width_registers,
            bn_stats=self.bn_stats[self.active])
        return (logits, macs) if count_macs else logits

    def masked_infer(self, k: int, x, count_macs=False):
        """Full-width forward of row k with binary masks on layer inputs."""
        if not (0 <= k < self.plan.n_rows):
            raise ExtentError(f"row {k} out of range")
        logits, _, macs = ng.run_forward(
            self.graph, x, mask_widths=self.plan.row_widths(k),
            bn_stats=self.bn_stats[k])
        return (logits, macs) if count_macs else logits

    # -- batchnorm statistics ---------------------------------------------

    def recalibrate_bn(self, x, batch_size=100) -> None:
        """Recompute per-row running statistics with a data pass per row.

        The active prefix of each row's statistics is replaced by the
        activation moments observed at that row's widths; sliced layers
        shift activation distributions, so the rows diverge here even
        though all learnable weights stay shared.
        """
        x = np.asarray(x, dtype=np.float64)
        for k in range(self.plan.n_rows):
            widths = self.plan.row_widths(k)
            act = ng.resolve_widths(self.graph, widths)
            dims = ng.layer_output_dims(self.graph, widths)
            sums, sqs = {}, {}
            for s in range(0, len(x), batch_size):
                xb = x[s:s + batch_size]
                _, cache, _ = ng.run_forward(
                    self.graph, xb, slicing=widths,
                    bn_stats=self.bn_stats[k], want_cache=True)
                for entry in cache:
                    if entry["kind"] != ng.BATCHNORM:
                        continue
                    i = entry["layer"]
                    vin = entry["input"]
                    axes = tuple(range(vin.ndim - 1))
                    sums[i] = sums.get(i, 0.0) + vin.sum(axis=axes)
                    sqs[i] = sqs.get(i, 0.0) + (vin * vin).sum(axis=axes)
            for i in sums:
                w = int(act[i])
                shape = dims[i]
                spatial = int(np.prod(shape[:-1])) if len(shape) == 3 else 1
                n_obs = len(x) * spatial
                mean = sums[i] / n_obs
                var = sqs[i] / n_obs - mean * mean
                mean_full, var_full = self.bn_stats[k][i]
                mean_full[:w] = mean.astype(np.float32)
                var_full[:w] = np.maximum(var, 1e-12).astype(np.float32)

    # -- audits -----------------------------------------------------------

    def assert_shared_store(self) -> None:
        """Every row reads through the same tensors; no private copies."""
        ids = {
            (i, name): id(t)
            for i, params in enumerate(self.graph.weights) if params
            for name, t in params.items()
        }
        for k in range(self.plan.n_rows):
            for (i, name), tid in ids.items():
                if id(self.graph.weights[i][name]) != tid:
                    raise IntegrityError("weight store was replaced per row")


def _transpose_dense_store(g: ng.ModelGraph) -> ng.ModelGraph:
    """Store dense kernels transposed (units x fan_in), flagged per layer.

    One-time conversion: afterwards each neuron's weights are contiguous
    and inference uses the flipped multiply order.
    """
    out = g.copy()
    for i, spec in enumerate(out.layers):
        if spec.kind != ng.DENSE or i in out.transposed_dense:
            continue
        k = out.weights[i]["kernel"]
        out.weights[i]["kernel"] = tz.transpose(k)
        out.transposed_dense.add(i)
    ng.validate_graph(out)
    return out


# -- bundle serialization ------------------------------------------------------


def save_bundle(model: NestedModel, out_dir, zipped=False) -> str:
    """Write manifest + weights + plan + per-row batchnorm statistics."""
    os.makedirs(out_dir, exist_ok=True)
    ng.save_manifest(model.graph, out_dir, name="model")
    model.plan.save(os.path.join(out_dir, "plan.json"))
    bn_layers = sorted(model.bn_stats[0]) if model.bn_stats else []
    with open(os.path.join(out_dir, "bn_stats.bin"), "wb") as fh:
        for k in range(model.plan.n_rows):
            for i in bn_layers:
                mean, var = model.bn_stats[k][i]
                tz.write_blob(Tensor.from_array(mean.astype(np.float32)), fh)
                tz.write_blob(Tensor.from_array(var.astype(np.float32)), fh)
    meta = {
        "layout": model.layout,
        "active": model.active,
        "bn_layers": bn_layers,
        "n_rows": model.plan.n_rows,
    }
    with open(os.path.join(out_dir, "bundle.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, separators=(",", ":"))
    if zipped:
        zpath = out_dir.rstrip("/\\") + ".zip"
        with zipfile.ZipFile(zpath, "w") as zf:
            for fn in sorted(os.listdir(out_dir)):
                zf.write(os.path.join(out_dir, fn), fn)
        return zpath
    return out_dir


def load_bundle(bundle_dir) -> NestedModel:
    with open(os.path.join(bundle_dir, "bundle.json")) as fh:
        meta = json.load(fh)
    graph = ng.load_manifest(os.path.join(bundle_dir, "model.json"))
    plan = SlicingPlan.load(os.path.join(bundle_dir, "plan.json"))
    model = NestedModel.__new__(NestedModel)
    model.plan = plan
    model.layout = meta["layout"]
    model.graph = graph
    model.active = int(meta["active"])
    model.width_registers = plan.row_widths(model.active)
    bn_layers = [int(i) for i in meta["bn_layers"]]
    model.bn_stats = []
    with open(os.path.join(bundle_dir, "bn_stats.bin"), "rb") as fh:
        blobs = tz.read_blobs(fh)
    pos = 0
    for _ in range(int(meta["n_rows"])):
        row = {}
        for i in bn_layers:
            mean = np.array(blobs[pos].flat, dtype=np.float32)
            var = np.array(blobs[pos + 1].flat, dtype=np.float32)
            row[i] = (mean, var)
            pos += 2
        model.bn_stats.append(row)
    return model
