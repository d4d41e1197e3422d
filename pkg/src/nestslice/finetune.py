"""Joint fine-tuning of all plan rows with a weight-shared loss.

Every batch evaluates every subnetwork row; the total loss is the sum of
per-row cross-entropies weighted by pi_n, the fraction of encoder
weights the row keeps active (the 100% row has pi = 1, raw fractions are
not re-normalized). Gradients flow through each row's slice into the one
shared store and are reduced in a fixed row order so runs reproduce
bit-for-bit under a seed.

Also provides plain single-model training (used to produce the
"pre-trained" starting point), evaluation helpers, few-shot fine-tuning,
and the paired bottom-up-versus-top-down recovery harness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import netgraph as ng
from .autograd import Adam, TrainConfig, backward, sgd_step
from .errors import DataError, NumericError
from .nest import NestedModel
from .planner import make_plan


def compute_pi(model: NestedModel) -> np.ndarray:
    """Per-row fraction of active encoder weights (biases and batchnorm
    scale/shift included; running statistics are not weights)."""
    g = model.graph
    total = ng.param_counts(g, None, encoder_only=True)
    out = []
    for k in range(model.plan.n_rows):
        active = ng.param_counts(g, model.plan.row_widths(k),
                                 encoder_only=True)
        out.append(active / total)
    return np.array(out)


def evaluate(g: ng.ModelGraph, x, y, slicing=None, bn_stats=None,
             batch_size=512) -> float:
    """Classification accuracy on (x, y)."""
    hits = 0
    for s in range(0, len(x), batch_size):
        logits = ng.forward(g, x[s:s + batch_size], slicing=slicing,
                            bn_stats=bn_stats)
        hits += int((logits.argmax(axis=1) == y[s:s + batch_size]).sum())
    return hits / len(x)


def evaluate_rows(model: NestedModel, x, y) -> list:
    """Accuracy of every plan row (capacity-descending order)."""
    return [
        evaluate(model.graph, x, y, slicing=model.plan.row_widths(k),
                 bn_stats=model.bn_stats[k])
        for k in range(model.plan.n_rows)
    ]


@dataclass
class FinetuneLog:
    epochs: list = field(default_factory=list)   # dict rows for CSV export
    batches: list = field(default_factory=list)  # (step, total, [row losses])

    def to_csv_rows(self):
        header = ["epoch", "row", "capacity_macs", "pi", "loss",
                  "val_accuracy"]
        yield header
        for e in self.epochs:
            yield [e["epoch"], e["row"], e["capacity_macs"], e["pi"],
                   e["loss"], e["val_accuracy"]]


def _snapshot(g: ng.ModelGraph):
    return {
        (i, name): np.array(t.flat)
        for i, params in enumerate(g.weights) if params
        for name, t in params.items()
    }


def _restore(g: ng.ModelGraph, snap):
    for (i, name), data in snap.items():
        g.weights[i][name].writable_array().reshape(-1)[...] = data


def finetune_joint(model: NestedModel, dataset, cfg: TrainConfig,
                   optimizer="sgd", seed=0, train_indices=None,
                   pi_weights=None) -> FinetuneLog:
    """Fine-tune all plan rows simultaneously.

    Per batch: total loss = sum_n pi_n * CE(row n forward); one optimizer
    step on the pi-weighted gradient sum. Divergence (non-finite loss)
    restores the last epoch's weights and raises NumericError.
    """
    g = model.graph
    pi = compute_pi(model) if pi_weights is None else np.asarray(pi_weights)
    rows = model.plan.n_rows
    log = FinetuneLog()
    adam = Adam(g) if optimizer == "adam" else None
    xs, ys = dataset.samples, dataset.labels
    train_idx = (np.asarray(train_indices)
                 if train_indices is not None else dataset.splits["train"])
    val_x, val_y = dataset.split("val")
    rng = np.random.default_rng(seed)
    step = 0
    bs = min(cfg.batch_size, len(train_idx))
    for epoch in range(cfg.epochs):
        snap = _snapshot(g)
        order = rng.permutation(train_idx)
        row_losses_sum = np.zeros(rows)
        n_batches = 0
        for s in range(0, len(order) - bs + 1, bs):
            sel = order[s:s + bs]
            batch = (xs[sel], ys[sel])
            total = None
            losses = []
            for k in range(rows):  # fixed order: deterministic reduction
                try:
                    loss_k, grads_k = backward(
                        g, batch, slicing=model.plan.row_widths(k),
                        loss=cfg.loss, bn_stats=model.bn_stats[k])
                except NumericError:
                    _restore(g, snap)
                    raise
                losses.append(loss_k)
                if total is None:
                    total = {key: pi[k] * arr for key, arr in grads_k.items()}
                else:
                    for key, arr in grads_k.items():
                        total[key] += pi[k] * arr
            total_loss = float(np.dot(pi, losses))
            if not np.isfinite(total_loss):
                _restore(g, snap)
                raise NumericError(
                    f"joint loss diverged at epoch {epoch} step {step}; "
                    "weights restored to last epoch"
                )
            lr = cfg.lr_at(step)
            if adam is not None:
                adam.step(g, total, lr)
            else:
                sgd_step(g, total, lr)
            log.batches.append((step, total_loss, losses))
            row_losses_sum += np.array(losses)
            n_batches += 1
            step += 1
        for k in range(rows):
            acc = evaluate(g, val_x, val_y,
                           slicing=model.plan.row_widths(k),
                           bn_stats=model.bn_stats[k])
            log.epochs.append({
                "epoch": epoch,
                "row": k,
                "capacity_macs": model.plan.capacities[k],
                "pi": float(pi[k]),
                "loss": float(row_losses_sum[k] / max(1, n_batches)),
                "val_accuracy": acc,
            })
    return log


def fewshot_indices(dataset, samples_per_class, seed=0) -> np.ndarray:
    """Seeded subsample of the train split: k samples per class."""
    rng = np.random.default_rng(seed)
    train = rng.permutation(dataset.splits["train"])
    labels = dataset.labels[train]
    picked = []
    for c in range(dataset.n_classes):
        pool = train[labels == c]
        if len(pool) < samples_per_class:
            raise DataError(
                f"class {c} has only {len(pool)} train samples, "
                f"{samples_per_class} requested"
            )
        picked.append(pool[:samples_per_class])
    return np.sort(np.concatenate(picked))


def finetune_fewshot(model: NestedModel, dataset, samples_per_class,
                     cfg: TrainConfig, optimizer="sgd", seed=0) -> FinetuneLog:
    """Joint fine-tuning restricted to a seeded per-class subsample."""
    idx = fewshot_indices(dataset, samples_per_class, seed)
    return finetune_joint(model, dataset, cfg, optimizer=optimizer,
                          seed=seed, train_indices=idx)


def train_single(g: ng.ModelGraph, dataset, cfg: TrainConfig,
                 optimizer="adam", seed=0) -> list:
    """Plain full-width training; the pre-training stand-in."""
    adam = Adam(g) if optimizer == "adam" else None
    xs, ys = dataset.samples, dataset.labels
    train_idx = dataset.splits["train"]
    val_x, val_y = dataset.split("val")
    rng = np.random.default_rng(seed)
    log = []
    step = 0
    bs = min(cfg.batch_size, len(train_idx))
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        losses = []
        for s in range(0, len(order) - bs + 1, bs):
            sel = order[s:s + bs]
            loss, grads = backward(g, (xs[sel], ys[sel]), loss=cfg.loss)
            lr = cfg.lr_at(step)
            if adam is not None:
                adam.step(g, grads, lr)
            else:
                sgd_step(g, grads, lr)
            losses.append(loss)
            step += 1
        log.append({
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "val_accuracy": evaluate(g, val_x, val_y),
        })
    return log


def few_shot_bu_td_harness(graph, scores, grad_store, dataset, capacities,
                           shot_counts, cfg: TrainConfig, seed=0) -> list:
    """Paired recovery curves: bottom-up vs top-down plans, same subsamples.

    For each shot count both plans are fine-tuned from identical copies of
    the permuted pre-trained weights on an identical subsample; the report
    carries per-row test accuracies and the mean bottom-up-minus-top-down
    delta. Deterministic under (seed, config).
    """
    test_x, test_y = dataset.split("test")
    plans = {
        mode: make_plan(graph, scores, capacities, heuristic=mode,
                        grad_store=grad_store, seed=seed)
        for mode in ("bu", "td")
    }
    out = []
    for shots in shot_counts:
        entry = {"shots": int(shots),
                 "bu_points": plans["bu"].points.tolist(),
                 "td_points": plans["td"].points.tolist()}
        accs = {}
        for mode in ("bu", "td"):
            model = NestedModel(graph.copy(), plans[mode])
            finetune_fewshot(model, dataset, shots, cfg, seed=seed)
            accs[mode] = evaluate_rows(model, test_x, test_y)
        entry["bu_accuracy"] = accs["bu"]
        entry["td_accuracy"] = accs["td"]
        entry["mean_delta"] = float(
            np.mean(np.array(accs["bu"]) - np.array(accs["td"]))
        )
        out.append(entry)
    return out
