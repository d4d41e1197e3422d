"""Empirical study of the two-stage iterative knapsack bounds.

Bottom-up (fill the half-capacity knapsack optimally, freeze it, then
fill the rest) is never worse than 2/3 of the full-capacity optimum as
long as no item weighs more than half the capacity, and that factor is
achieved by a four-item instance. Top-down (solve the full knapsack,
then re-solve at half capacity restricted to its items) can drop to 1/2
of the half-capacity optimum, also tight. Without the weight restriction
both heuristics can be arbitrarily bad.
"""

import numpy as np

from nestslice.bounds import (brute_opt, bu_two_stage, td_two_stage,
                              tight_instance_bu, tight_instance_td,
                              verify_bounds, violation_search)
from nestslice.planner import DwBlock, DwInstance, solve_depthwise

# ------------------------------------------------------- tight instances
for eps in (0.1, 0.01, 0.001):
    p, w, c, scale = tight_instance_bu(10.0, eps, 6)
    bu, _, _ = bu_two_stage(p, w, c)
    opt = brute_opt(p, w, c).profit
    print(f"bottom-up tight instance, eps={eps}: ratio {bu / opt:.5f} "
          f"(bound 2/3 = {2 / 3:.5f})")
for eps in (0.1, 0.01, 0.001):
    p, w, c, scale = tight_instance_td(10.0, eps, 6)
    td, _, _ = td_two_stage(p, w, c)
    opt_half = brute_opt(p, w, c // 2).profit
    print(f"top-down tight instance,  eps={eps}: ratio "
          f"{td / opt_half:.5f} (bound 1/2)")

# ------------------------------------------------ randomized verification
reports = verify_bounds(n_instances=500, seed=0, max_items=12)
bu_ratios = [r.ratio for r in reports if r.instance["kind"] == "bu"]
td_ratios = [r.ratio for r in reports if r.instance["kind"] == "td"]
print(f"\n500 random instances with weights <= c/2:")
print(f"  bottom-up ratios: min {min(bu_ratios):.4f}, "
      f"mean {np.mean(bu_ratios):.4f}, violations "
      f"{sum(not r.passed for r in reports if r.instance['kind'] == 'bu')}")
print(f"  top-down ratios:  min {min(td_ratios):.4f}, "
      f"mean {np.mean(td_ratios):.4f}, violations "
      f"{sum(not r.passed for r in reports if r.instance['kind'] == 'td')}")

# ------------------------------------------- without the weight restriction
wild = violation_search(n_instances=300, seed=1)
broken = [r for r in wild if not r.passed]
worst = min(broken, key=lambda r: r.ratio)
print(f"\nunrestricted weights: {len(broken)} bound violations in "
      f"{len(wild)} reports; worst ratio {worst.ratio:.3f} "
      f"({worst.instance['kind']})")

# ---------------------------------- depthwise chains, measured empirically
# the depthwise generalization couples consecutive layer counts; its
# two-stage ratios are measured here but no bound is asserted
rng = np.random.default_rng(2)
ratios = []
for _ in range(50):
    n0 = 4
    km = rng.random((4, n0))
    km = km[np.argsort(-km.sum(axis=1))]
    inst = DwInstance(
        np.sort(rng.random(n0))[::-1].copy(), 3, n0,
        [DwBlock(rng.random(n0), 3, 4, km, 1)], capacity=1)
    from nestslice.planner import dw_objective
    _, total = dw_objective(inst, [n0, 4])
    c = max(total // 2, 20)
    inst.capacity = c
    opt = solve_depthwise(inst).profit
    inst.capacity = c // 2
    try:
        half = solve_depthwise(inst)
    except Exception:
        continue
    inst.capacity = c
    grown = solve_depthwise(inst, min_counts=half.counts).profit
    ratios.append(grown / opt)
print(f"\ndepthwise two-stage bottom-up ratios over {len(ratios)} chains: "
      f"min {min(ratios):.4f}, mean {np.mean(ratios):.4f} "
      f"(reported only; the 2/3 proof covers the flat problem)")
