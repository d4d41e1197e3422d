"""Command-line entry point.

Subcommands: pipeline, train, score, plan, finetune, eval, switch-sim,
bench-cache, verify-bounds. Global flags: --seed, --config (JSON file),
--out. Every artifact lands under --out together with a manifest that
embeds the configuration and its hash, so a run is reproducible from
(seed, config).

Exit codes: 0 success, 2 config error, 3 infeasible plan, 4 data error,
5 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import traceback

import numpy as np

from . import bounds as bnd
from . import cachesim as cs
from . import netgraph as ng
from .autograd import TrainConfig, accumulate_importance_grads
from .datasets import load_idx, synth_blobs
from .errors import EXIT_CODES, ConfigError, NestsliceError
from .finetune import evaluate_rows, finetune_joint, train_single
from .importance import (apply_to_scores, export_scores_csv,
                         permute_descending, score_units)
from .nest import NestedModel, load_bundle, save_bundle
from .planner import SlicingPlan, make_plan, plan_baseline

DEFAULT_CONFIG = {
    "seed": 0,
    "arch": "dnn",
    "size": "S",
    "classes": 10,
    "input_shape": None,
    "capacities_percent": [100, 75, 50, 25],
    "heuristic": "bu",
    "formulation": "auto",
    "layout": "standard",
    "importance_batches": 100,
    "dataset": {
        "kind": "synthetic",
        "classes": 10,
        "per_class": 100,
        "dims": 16,
        "separation": 4.0,
    },
    "pretrain": {
        "batch_size": 100,
        "epochs": 5,
        "learning_rate_schedule": [[0, 0.001]],
        "loss": "ce",
    },
    "finetune": {
        "batch_size": 100,
        "epochs": 5,
        "learning_rate_schedule": [[0, 0.001]],
        "loss": "ce",
    },
}


def load_config(path=None, seed=None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path:
        with open(path) as fh:
            user = json.load(fh)
        for k, v in user.items():
            if isinstance(v, dict) and isinstance(cfg.get(k), dict):
                cfg[k].update(v)
            else:
                cfg[k] = v
    if seed is not None:
        cfg["seed"] = seed
    pct = cfg["capacities_percent"]
    if pct != sorted(pct, reverse=True) or any(
        not (0 < p <= 100) for p in pct
    ):
        raise ConfigError(
            "capacities_percent must be descending values in (0, 100]"
        )
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def build_dataset(cfg: dict):
    ds = cfg["dataset"]
    if ds["kind"] == "synthetic":
        dims = ds.get("dims", 16)
        flat = int(dims) if np.isscalar(dims) else int(np.prod(dims))
        blob = synth_blobs(
            classes=ds.get("classes", 10),
            per_class=ds.get("per_class", 100),
            dims=flat,
            seed=cfg["seed"],
            separation=ds.get("separation", 4.0),
        )
        if not np.isscalar(dims):  # image-shaped synthetic data
            from .datasets import Dataset
            blob = Dataset(
                blob.samples.reshape((-1,) + tuple(int(d) for d in dims)),
                blob.labels, blob.splits)
        return blob
    if ds["kind"] == "idx":
        return load_idx(ds["images"], ds["labels"],
                        normalize=ds.get("normalize", True),
                        seed=cfg["seed"])
    raise ConfigError(f"unknown dataset kind {ds['kind']!r}")


def _dataset_input_shape(cfg, dataset):
    if cfg["input_shape"] is not None:
        shp = cfg["input_shape"]
        return int(shp) if np.isscalar(shp) else tuple(shp)
    sample = dataset.samples[0]
    if cfg["arch"] == "dnn":
        return int(np.prod(sample.shape))
    if sample.ndim == 1:
        raise ConfigError("image-shaped data required for conv architectures")
    return tuple(sample.shape)


def _arch_samples(cfg, dataset):
    """Dataset samples shaped for the target architecture."""
    if cfg["arch"] == "dnn":
        return dataset.samples.reshape(len(dataset.samples), -1)
    return dataset.samples


def capacities_from_percent(g, percents):
    full = ng.full_macs(g)
    return [max(1, int(full * p / 100.0)) for p in percents]


def _write_manifest(out_dir, cfg, stages):
    doc = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "stages": stages,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)


# -- stages --------------------------------------------------------------------


def _stage_train(cfg, dataset, out_dir):
    g = ng.build_reference(cfg["arch"], cfg["size"],
                           input_shape=_dataset_input_shape(cfg, dataset),
                           classes=dataset.n_classes, seed=cfg["seed"])
    tc = TrainConfig.from_json(cfg["pretrain"])
    xs = _arch_samples(cfg, dataset)
    from .datasets import Dataset
    ds = Dataset(xs, dataset.labels, dataset.splits)
    log = train_single(g, ds, tc, optimizer="adam", seed=cfg["seed"])
    ng.save_manifest(g, out_dir, name="model")
    with open(os.path.join(out_dir, "train_log.json"), "w") as fh:
        json.dump(log, fh, indent=2)
    return g, ds


def _stage_scores(cfg, g, ds):
    stream = ds.batches("train", min(cfg["pretrain"]["batch_size"],
                                     len(ds.splits["train"])),
                        seed=cfg["seed"], repeat=True)
    grads = accumulate_importance_grads(g, stream,
                                        n_batches=cfg["importance_batches"])
    scores = score_units(g, grads)
    return grads, scores


def cmd_pipeline(cfg, out_dir) -> int:
    os.makedirs(out_dir, exist_ok=True)
    stages = []

    def done(name, **info):
        stages.append({"stage": name, **info})
        _write_manifest(out_dir, cfg, stages)

    try:
        dataset = build_dataset(cfg)
        done("dataset", samples=int(len(dataset.samples)))
        g, ds = _stage_train(cfg, dataset, out_dir)
        done("train", artifact="model.json")
        grads, scores = _stage_scores(cfg, g, ds)
        export_scores_csv(scores, os.path.join(out_dir, "scores.csv"))
        done("score", artifact="scores.csv")
        caps = capacities_from_percent(g, cfg["capacities_percent"])
        if cfg["heuristic"] in ("l1", "random"):
            g2, plan = plan_baseline(g, cfg["heuristic"], caps,
                                     seed=cfg["seed"])
        else:
            g2, perm = permute_descending(g, scores)
            scores2 = apply_to_scores(g, perm, scores)
            grads2 = _permute_grads(g, g2, perm, grads)
            plan = make_plan(g2, scores2, caps, heuristic=cfg["heuristic"],
                             grad_store=grads2,
                             formulation=cfg["formulation"],
                             seed=cfg["seed"])
        ng.save_manifest(g2, out_dir, name="permuted")
        plan.save(os.path.join(out_dir, "plan.json"))
        done("plan", artifact="plan.json", heuristic=cfg["heuristic"],
             capacities=caps)
        model = NestedModel(g2, plan, layout=cfg["layout"])
        tc = TrainConfig.from_json(cfg["finetune"])
        log = finetune_joint(model, ds, tc, optimizer="sgd",
                             seed=cfg["seed"])
        with open(os.path.join(out_dir, "finetune_log.csv"), "w",
                  newline="") as fh:
            wr = csv.writer(fh)
            for row in log.to_csv_rows():
                wr.writerow(row)
        done("finetune", artifact="finetune_log.csv")
        if model.bn_stats and model.bn_stats[0]:
            model.recalibrate_bn(ds.split("train")[0][:500])
        bundle_dir = os.path.join(out_dir, "bundle")
        save_bundle(model, bundle_dir)
        done("bundle", artifact="bundle/")
    except NestsliceError as e:
        stage = "unknown"
        names = ["dataset", "train", "score", "plan", "finetune", "bundle"]
        stage = names[len(stages)] if len(stages) < len(names) else "bundle"
        print(f"pipeline halted at stage '{stage}': {e}", file=sys.stderr)
        done(f"failed:{stage}", error=str(e))
        raise
    return 0


def _permute_grads(g_old, g_new, perm, grads):
    """Gradient store aligned with the permuted graph (for dw planning)."""
    from .importance import permute_grad_store

    return permute_grad_store(g_new, perm, grads)


def cmd_eval(bundle_dir, cfg, out_path=None) -> int:
    model = load_bundle(bundle_dir)
    dataset = build_dataset(cfg)
    xs = _arch_samples(cfg, dataset)
    test_idx = dataset.splits["test"]
    test_x, test_y = xs[test_idx], dataset.labels[test_idx]
    accs = evaluate_rows(model, test_x, test_y)
    full = ng.full_macs(model.graph)
    rows = []
    for k in range(model.plan.n_rows):
        widths = model.plan.row_widths(k)
        macs = ng.plan_macs(model.graph, widths)
        rows.append({
            "row": k,
            "capacity_pct": round(100.0 * model.plan.capacities[k] / full, 2),
            "capacity_macs": model.plan.capacities[k],
            "macs": macs,
            "params": ng.param_counts(model.graph, widths),
            "accuracy": accs[k],
        })
    out_path = out_path or os.path.join(bundle_dir, "eval.csv")
    with open(out_path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)
    for r in rows:
        print(f"row {r['row']}: {r['capacity_pct']:6.2f}% MACs "
              f"({r['macs']}), params {r['params']}, "
              f"accuracy {r['accuracy']:.4f}")
    return 0


def cmd_switch_sim(bundle_dir, schedule_path, out_path=None) -> int:
    model = load_bundle(bundle_dir)
    with open(schedule_path) as fh:
        schedule = json.load(fh)
    events = []
    for t, row in schedule:
        st = model.activate(int(row))
        events.append({
            "time": t,
            "row": int(row),
            "integers_updated": st.integers_updated,
            "weights_copied": st.weights_copied,
            "elapsed_s": st.elapsed,
        })
    probe_shape = model.graph.input_shape
    probe = (np.zeros((1, probe_shape)) if np.isscalar(probe_shape)
             else np.zeros((1,) + tuple(probe_shape)))
    per_row = []
    for k in range(model.plan.n_rows):
        model.activate(k)
        _, macs = model.infer(probe, count_macs=True)
        per_row.append({"row": k, "inference_macs": macs})
    doc = {"events": events, "per_row_macs": per_row,
           "total_weights_copied": int(sum(e["weights_copied"]
                                           for e in events))}
    out_path = out_path or os.path.join(bundle_dir, "switch_log.json")
    with open(out_path, "w") as fh:
        json.dump(doc, fh, indent=2)
    print(f"{len(events)} switches, "
          f"{doc['total_weights_copied']} weight elements copied")
    return 0


def cmd_bench_cache(args, out_dir) -> int:
    cfg = cs.CacheConfig(args.cache_bytes, args.ways, args.line_bytes)
    rows = cs.bench_report(cfg=cfg, b=args.batch,
                           miss_penalty=args.miss_penalty,
                           include_inputs=args.include_inputs)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "cache_report.csv")
    cs.write_report_csv(rows, path)
    worst = {}
    for r in rows:
        key = (r["m"], r["n"], r["elem_bytes"], r["slice"])
        worst.setdefault(key, {})[r["mode"]] = r["hit_rate"]
    regressions = sum(
        1 for v in worst.values() if v["optimized"] < v["basic"]
    )
    print(f"wrote {path}; {len(rows)} rows; "
          f"{regressions} configurations where optimized < basic")
    return 0


def cmd_verify_bounds(args, out_dir) -> int:
    reports = bnd.verify_bounds(n_instances=args.instances, seed=args.seed,
                                max_items=args.max_items)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "bounds_report.json")
    with open(path, "w") as fh:
        json.dump([r.to_json() for r in reports], fh, indent=2)
    failed = [r for r in reports if not r.passed]
    print(f"wrote {path}; {len(reports)} reports, {len(failed)} violations")
    return 0 if not failed else 5


# -- argument parsing ------------------------------------------------------------


def _make_parser():
    ap = argparse.ArgumentParser(
        prog="nestslice",
        description="nested weight-sharing subnetworks toolkit",
    )
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--config", type=str, default=None,
                    help="JSON config file")
    ap.add_argument("--out", type=str, default="out")
    ap.add_argument("--images", type=str, default=None,
                    help="IDX image file (switches the dataset to IDX)")
    ap.add_argument("--labels", type=str, default=None,
                    help="IDX label file")
    ap.add_argument("--split", type=str, default="80:10:10",
                    help="train:val:test ratio (only 80:10:10 supported)")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("pipeline", help="train, score, permute, plan, "
                                    "fine-tune, bundle")
    sub.add_parser("train", help="pretrain the reference model")
    sub.add_parser("score", help="accumulate gradients and export scores")
    p = sub.add_parser("plan", help="permute and plan slicing points")
    p.add_argument("--heuristic", choices=["bu", "td", "l1", "random"],
                   default=None)
    p = sub.add_parser("finetune", help="joint fine-tuning into a bundle")
    p.add_argument("--model", required=True,
                   help="permuted model manifest JSON")
    p.add_argument("--plan", required=True, help="plan JSON")
    p = sub.add_parser("eval", help="per-row accuracy of a bundle")
    p.add_argument("--bundle", required=True)
    p = sub.add_parser("switch-sim", help="replay a resource schedule")
    p.add_argument("--bundle", required=True)
    p.add_argument("--schedule", required=True,
                   help="JSON [[time, row], ...]")
    p = sub.add_parser("bench-cache", help="cache hit-rate sweep")
    p.add_argument("--cache-bytes", type=int, default=16384)
    p.add_argument("--ways", type=int, default=2)
    p.add_argument("--line-bytes", type=int, default=8)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--miss-penalty", type=int, default=10)
    p.add_argument("--include-inputs", action="store_true")
    p = sub.add_parser("verify-bounds", help="knapsack bound property run")
    p.add_argument("--instances", type=int, default=1000)
    p.add_argument("--max-items", type=int, default=12)
    p.add_argument("--seed", dest="bounds_seed", type=int, default=0)
    return ap


def main(argv=None) -> int:
    ap = _make_parser()
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed)
        if args.split != "80:10:10":
            raise ConfigError(
                f"only the 80:10:10 split is supported, got {args.split!r}"
            )
        if args.images or args.labels:
            if not (args.images and args.labels):
                raise ConfigError("--images and --labels go together")
            cfg["dataset"] = {"kind": "idx", "images": args.images,
                              "labels": args.labels, "normalize": True}
        out_dir = args.out
        if args.command == "pipeline":
            return cmd_pipeline(cfg, out_dir)
        if args.command == "train":
            os.makedirs(out_dir, exist_ok=True)
            dataset = build_dataset(cfg)
            _stage_train(cfg, dataset, out_dir)
            _write_manifest(out_dir, cfg, [{"stage": "train"}])
            return 0
        if args.command == "score":
            os.makedirs(out_dir, exist_ok=True)
            dataset = build_dataset(cfg)
            g, ds = _stage_train(cfg, dataset, out_dir)
            _, scores = _stage_scores(cfg, g, ds)
            export_scores_csv(scores, os.path.join(out_dir, "scores.csv"))
            return 0
        if args.command == "plan":
            if args.heuristic:
                cfg["heuristic"] = args.heuristic
            os.makedirs(out_dir, exist_ok=True)
            dataset = build_dataset(cfg)
            g, ds = _stage_train(cfg, dataset, out_dir)
            grads, scores = _stage_scores(cfg, g, ds)
            caps = capacities_from_percent(g, cfg["capacities_percent"])
            if cfg["heuristic"] in ("l1", "random"):
                g2, plan = plan_baseline(g, cfg["heuristic"], caps,
                                         seed=cfg["seed"])
            else:
                g2, perm = permute_descending(g, scores)
                scores2 = apply_to_scores(g, perm, scores)
                grads2 = _permute_grads(g, g2, perm, grads)
                plan = make_plan(g2, scores2, caps,
                                 heuristic=cfg["heuristic"],
                                 grad_store=grads2,
                                 formulation=cfg["formulation"],
                                 seed=cfg["seed"])
            ng.save_manifest(g2, out_dir, name="permuted")
            plan.save(os.path.join(out_dir, "plan.json"))
            return 0
        if args.command == "finetune":
            os.makedirs(out_dir, exist_ok=True)
            g2 = ng.load_manifest(args.model)
            plan = SlicingPlan.load(args.plan)
            dataset = build_dataset(cfg)
            from .datasets import Dataset
            ds = Dataset(_arch_samples(cfg, dataset), dataset.labels,
                         dataset.splits)
            model = NestedModel(g2, plan, layout=cfg["layout"])
            tc = TrainConfig.from_json(cfg["finetune"])
            log = finetune_joint(model, ds, tc, optimizer="sgd",
                                 seed=cfg["seed"])
            with open(os.path.join(out_dir, "finetune_log.csv"), "w",
                      newline="") as fh:
                wr = csv.writer(fh)
                for row in log.to_csv_rows():
                    wr.writerow(row)
            save_bundle(model, os.path.join(out_dir, "bundle"))
            return 0
        if args.command == "eval":
            return cmd_eval(args.bundle, cfg)
        if args.command == "switch-sim":
            return cmd_switch_sim(args.bundle, args.schedule)
        if args.command == "bench-cache":
            return cmd_bench_cache(args, out_dir)
        if args.command == "verify-bounds":
            args.seed = args.bounds_seed
            return cmd_verify_bounds(args, out_dir)
        raise ConfigError(f"unknown command {args.command!r}")
    except NestsliceError as e:
        for cls, code in EXIT_CODES.items():
            if isinstance(e, cls):
                print(f"error: {e}", file=sys.stderr)
                return code
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:  # pragma: no cover - unexpected crash path
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
