"""Iterative knapsack planning of nested subnetwork widths.

The core is an exact 0-1 knapsack solver: dynamic programming over
GCD-reduced integer MAC weights with a branch-and-bound fallback when the
DP table would be too large. On top of it sit the two multi-stage
heuristics: bottom-up (solve the tightest capacity first, freeze its
items for all larger stages) and top-down (solve the loosest capacity
first, restrict every smaller stage to the previous selection). Both
produce nested plans by construction.

Items are the encoder's computational units with their importance score
as profit and their full-width MAC count as weight. Costs that a unit
drags along implicitly are folded into its weight: the depthwise filter
bound to a channel, and the classifier columns fed by the last encoder
layer. With that folding the knapsack budget bounds the true full-model
MAC count of the resulting subnetwork.

Depthwise-separable chains get a dedicated exact solver: choosing k
filters in a layer forces k depthwise filters and k kernels per chosen
pointwise filter in the next block, which couples consecutive counts. The
solver runs dynamic programming over (block, previous count, MAC budget)
and is intended for moderate widths; its table grows with width^2, so
wide models should plan with the flat formulation instead.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import netgraph as ng
from .errors import ConfigError, InfeasiblePlanError, IntegrityError
from .importance import scores_by_layer

# DP cell budget before solve_exact falls back to branch and bound,
# plus a cap on the live suffix-row memory (about 2*sqrt(n) rows)
DP_CELL_LIMIT = 2_500_000_000
DP_ROW_BYTES_LIMIT = 400_000_000


@dataclass
class KnapsackInstance:
    profits: np.ndarray
    weights: np.ndarray
    capacity: int
    forced_in: frozenset = frozenset()
    excluded: frozenset = frozenset()

    def __post_init__(self):
        self.profits = np.asarray(self.profits, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.int64)
        self.forced_in = frozenset(int(i) for i in self.forced_in)
        self.excluded = frozenset(int(i) for i in self.excluded)
        if self.profits.shape != self.weights.shape:
            raise ConfigError("profits and weights must align")
        if np.any(self.weights <= 0):
            raise ConfigError("item weights must be positive integers")
        if self.capacity <= 0:
            raise ConfigError("capacity must be positive")
        if self.forced_in & self.excluded:
            raise ConfigError("forced_in and excluded overlap")


@dataclass
class KnapsackSolution:
    selected: tuple
    profit: float
    weight: int


def solve_exact(inst: KnapsackInstance) -> KnapsackSolution:
    """Profit-maximal feasible selection honoring forced_in/excluded.

    Deterministic tie-break: the lexicographically smallest selected index
    set among optima, comparing sorted index sequences (a proper prefix
    sorts first, so trailing zero-profit items are dropped while a leading
    zero-profit item that keeps the set lexicographically smaller is kept).
    Exact float ties require exactly representable profit sums; integer
    valued profits are safe.
    """
    n = len(inst.profits)
    forced = sorted(inst.forced_in)
    if any(i >= n or i < 0 for i in inst.forced_in | inst.excluded):
        raise ConfigError("item index out of range")
    forced_w = int(inst.weights[forced].sum()) if forced else 0
    if forced_w > inst.capacity:
        raise InfeasiblePlanError(
            f"forced items weigh {forced_w} > capacity {inst.capacity}"
        )
    skip = inst.forced_in | inst.excluded
    free = [i for i in range(n) if i not in skip]
    cap_free = inst.capacity - forced_w

    def finish(sel_free):
        sel = tuple(sorted(set(forced) | set(sel_free)))
        idx = np.array(sel, dtype=np.int64)
        profit = float(inst.profits[idx].sum()) if sel else 0.0
        weight = int(inst.weights[idx].sum()) if sel else 0
        return KnapsackSolution(sel, profit, weight)

    if not free or cap_free <= 0:
        return finish([])
    w_free = inst.weights[free]
    p_free = inst.profits[free]
    if int(w_free.sum()) <= cap_free:
        # everything fits: lex-min keeps every item up to the last one
        # contributing profit and drops the zero-profit tail
        pos = np.nonzero(p_free > 0)[0]
        last = int(pos[-1]) + 1 if len(pos) else 0
        return finish(free[:last])

    g = int(np.gcd.reduce(w_free))
    ws = (w_free // g).astype(np.int64)
    cap_s = cap_free // g
    row_bytes = 16 * (cap_s + 1) * (int(np.sqrt(len(free))) + 2)
    if ((len(free) + 1) * (cap_s + 1) > DP_CELL_LIMIT
            or row_bytes > DP_ROW_BYTES_LIMIT):
        sel_free = _branch_and_bound(p_free, w_free, cap_free)
        return finish([free[i] for i in sel_free])
    sel_free = _dp_lexmin(p_free, ws, cap_s)
    return finish([free[i] for i in sel_free])


def _dp_lexmin(p, w, cap):
    """Lex-smallest optimal subset via suffix DP with block checkpoints.

    dp_i[c] = best profit using items i.. within capacity c. The greedy
    scan over ascending indices includes item i when doing so is needed
    for optimality, or on a profit tie whenever positive profit remains
    behind it (which is exactly when inclusion keeps the sorted index
    sequence lexicographically smaller). Memory is O(sqrt(n) * cap).
    """
    n = len(p)
    k = max(1, int(np.sqrt(n)))
    # suffix rows at block boundaries n, n-k, n-2k, ...
    checkpoints = {n: np.zeros(cap + 1)}
    row = checkpoints[n]
    for i in range(n - 1, -1, -1):
        nxt = row.copy()
        wi = int(w[i])
        if wi <= cap:
            np.maximum(nxt[wi:], row[: cap + 1 - wi] + p[i], out=nxt[wi:])
        row = nxt
        if i % k == 0:
            checkpoints[i] = row
    sel = []
    c = cap
    block_rows = {}
    for i in range(n):
        j = i + 1  # need dp over items j..
        if j not in block_rows:
            base = min(((j + k - 1) // k) * k, n)
            block_rows = {base: checkpoints[base]}
            r = checkpoints[base]
            for t in range(base - 1, j - 1, -1):
                nxt = r.copy()
                wt = int(w[t])
                if wt <= cap:
                    np.maximum(nxt[wt:], r[: cap + 1 - wt] + p[t],
                               out=nxt[wt:])
                block_rows[t] = nxt
                r = nxt
        suffix = block_rows[j]
        wi = int(w[i])
        best_without = suffix[c]
        best_with = p[i] + suffix[c - wi] if wi <= c else -np.inf
        take = best_with > best_without or (
            best_with == best_without and best_without > 0
        )
        if take:
            sel.append(i)
            c -= wi
    return sel


def _branch_and_bound(p, w, cap):
    """Exact fallback for huge capacities; deterministic but not lex-canonical."""
    n = len(p)
    order = sorted(range(n), key=lambda i: (-p[i] / w[i], i))
    ps = p[order]
    ws = w[order]

    def bound(k, cap_left, cur):
        b = cur
        for j in range(k, n):
            if ws[j] <= cap_left:
                cap_left -= ws[j]
                b += ps[j]
            else:
                return b + ps[j] * (cap_left / ws[j])
        return b

    best = -1.0
    best_set = []
    stack = [(0, cap, 0.0, [])]
    while stack:
        k, cap_left, cur, chosen = stack.pop()
        if k == n:
            if cur > best:
                best, best_set = cur, chosen
            continue
        if bound(k, cap_left, cur) <= best:
            continue
        # exclude branch pushed first so the include branch is explored first
        stack.append((k + 1, cap_left, cur, chosen))
        if ws[k] <= cap_left:
            stack.append((k + 1, cap_left - ws[k], cur + ps[k],
                          chosen + [order[k]]))
        if cur > best:
            best, best_set = cur, chosen
    return sorted(best_set)


def solve_iterative(profits, weights, capacities, mode="bu",
                    forced=frozenset()):
    """Multi-stage knapsack with nesting across stages.

    capacities: descending budgets. Bottom-up solves the smallest budget
    first and freezes its selection into all larger stages; top-down
    solves the largest budget first and restricts each smaller stage to
    the previous selection. Returns KnapsackSolutions aligned with the
    (descending) capacities.
    """
    caps = [int(c) for c in capacities]
    if caps != sorted(caps, reverse=True):
        raise ConfigError("capacities must be sorted descending")
    profits = np.asarray(profits, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.int64)
    n = len(profits)
    sols = []
    if mode == "bu":
        cur_forced = frozenset(forced)
        for stage, cap in enumerate(reversed(caps)):
            try:
                sol = solve_exact(KnapsackInstance(
                    profits, weights, cap, forced_in=cur_forced))
            except InfeasiblePlanError as e:
                raise InfeasiblePlanError(
                    f"bottom-up stage {stage} (capacity {cap}): {e}"
                ) from None
            cur_forced = frozenset(sol.selected)
            sols.append(sol)
        sols.reverse()
    elif mode == "td":
        allowed = frozenset(range(n))
        for stage, cap in enumerate(caps):
            excluded = frozenset(range(n)) - allowed
            try:
                sol = solve_exact(KnapsackInstance(
                    profits, weights, cap, forced_in=frozenset(forced),
                    excluded=excluded))
            except InfeasiblePlanError as e:
                raise InfeasiblePlanError(
                    f"top-down stage {stage} (capacity {cap}): {e}"
                ) from None
            allowed = frozenset(sol.selected)
            sols.append(sol)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    return sols


# -- slicing plans -----------------------------------------------------------


@dataclass
class SlicingPlan:
    """One integer slicing point per subnetwork and sliceable layer."""

    capacities: list
    points: np.ndarray  # (n_rows, n_sliceable)
    heuristic: str = "bu"
    seed: int | None = None

    def __post_init__(self):
        self.capacities = [int(c) for c in self.capacities]
        self.points = np.asarray(self.points, dtype=np.int64)

    @property
    def n_rows(self) -> int:
        return self.points.shape[0]

    def row_widths(self, k: int) -> list:
        return [int(v) for v in self.points[k]]

    def validate(self, g: ng.ModelGraph) -> None:
        if self.capacities != sorted(self.capacities, reverse=True):
            raise IntegrityError("plan capacities must be descending")
        if self.points.shape[0] != len(self.capacities):
            raise IntegrityError("one row per capacity required")
        if np.any(self.points < 1):
            raise IntegrityError("every slicing point must be >= 1")
        if np.any(self.points[1:] > self.points[:-1]):
            raise IntegrityError("rows must be pointwise nested")
        full = [g.layers[i].units for i in g.sliceable_indices()]
        if np.any(self.points > np.array(full)):
            raise IntegrityError("slicing point exceeds layer width")
        for k, cap in enumerate(self.capacities):
            used = ng.plan_macs(g, self.row_widths(k))
            if used > cap:
                raise IntegrityError(
                    f"row {k} uses {used} MACs > capacity {cap}"
                )

    def to_json(self) -> dict:
        return {
            "capacities": self.capacities,
            "points": self.points.tolist(),
            "heuristic": self.heuristic,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SlicingPlan":
        return cls(d["capacities"], np.asarray(d["points"]),
                   d.get("heuristic", "bu"), d.get("seed"))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True,
                      separators=(",", ":"))

    @classmethod
    def load(cls, path) -> "SlicingPlan":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def rider_costs(g: ng.ModelGraph) -> dict:
    """Extra MACs a unit of each sliceable layer drags along implicitly.

    A unit in a layer feeding a depthwise layer forces one depthwise
    filter; a unit in the last encoder layer feeds columns of the
    classifier. Folding these into item weights makes the knapsack budget
    bound the full-model MAC count.
    """
    per_unit = {c.layer: c.macs for c in ng.unit_macs(g)}  # equal within layer
    riders = {}
    cls_idx = g.classifier_index()
    for i in g.sliceable_indices():
        extra = 0
        nxt = g.next_compute_layer(i)
        if nxt is not None and g.layers[nxt].kind == ng.DEPTHWISE:
            extra += per_unit[nxt]
        riders[i] = extra
    last_enc = [i for i in g.sliceable_indices() if i <= g.encoder_end][-1]
    cls_spec = g.layers[cls_idx]
    feed, info = ng.dense_feed_structure(g, cls_idx)
    if feed == "spatial":
        h, w, _ = info
        riders[last_enc] += cls_spec.units * h * w
    else:
        riders[last_enc] += cls_spec.units
    return riders


@dataclass
class PlanItems:
    layer_of: np.ndarray
    unit_of: np.ndarray
    profits: np.ndarray
    weights: np.ndarray
    forced_min: frozenset
    sliceable: list

    @classmethod
    def build(cls, g: ng.ModelGraph, scores):
        """Flat knapsack items from permuted, descending-importance scores.

        Depthwise layers produce no items (their filters ride with the
        units of the preceding layer); the classifier is always kept. A
        tiny profit floor keeps zero-importance units selectable: a unit
        that fits the budget is kept rather than dropped, so a 100% row
        really is the full model.
        """
        by_layer = scores_by_layer(scores)
        riders = rider_costs(g)
        sliceable = g.sliceable_indices()
        layer_of, unit_of, profits, weights = [], [], [], []
        forced = []
        top = max((s.importance for s in scores), default=1.0)
        floor = 1e-9 * max(top, 1.0)
        for li in sliceable:
            lst = by_layer.get(li)
            if lst is None or len(lst) != g.layers[li].units:
                raise IntegrityError(f"scores missing for layer {li}")
            imp = np.array([s.importance for s in lst])
            if np.any(np.diff(imp) > 1e-12):
                raise IntegrityError(
                    f"layer {li} scores are not descending; permute first"
                )
            forced.append(len(layer_of))  # first unit of the layer
            for s in lst:
                layer_of.append(li)
                unit_of.append(s.unit)
                profits.append(s.importance + floor)
                weights.append(s.macs + riders[li])
        return cls(np.array(layer_of), np.array(unit_of),
                   np.array(profits, dtype=np.float64),
                   np.array(weights, dtype=np.int64),
                   frozenset(forced), sliceable)

    def counts_from_selection(self, selected) -> list:
        counts = {li: 0 for li in self.sliceable}
        sel = set(selected)
        for pos in sel:
            counts[int(self.layer_of[pos])] += 1
        # prefix audit: the selected units of each layer must be 0..k-1
        for li in self.sliceable:
            got = sorted(int(self.unit_of[p]) for p in sel
                         if self.layer_of[p] == li)
            if got != list(range(len(got))):
                raise IntegrityError(
                    f"selection in layer {li} is not a leading prefix: {got}"
                )
        return [counts[li] for li in self.sliceable]


def _validate_capacities(g, capacities):
    caps = [int(c) for c in capacities]
    if caps != sorted(caps, reverse=True):
        raise ConfigError("capacities must be sorted descending")
    return caps


def plan_bottom_up(g: ng.ModelGraph, scores, capacities,
                   seed=None) -> SlicingPlan:
    """Nested plan via the bottom-up heuristic on the flat formulation."""
    caps = _validate_capacities(g, capacities)
    items = PlanItems.build(g, scores)
    sols = solve_iterative(items.profits, items.weights, caps, mode="bu",
                           forced=items.forced_min)
    points = [items.counts_from_selection(s.selected) for s in sols]
    plan = SlicingPlan(caps, np.array(points), heuristic="bu", seed=seed)
    plan.validate(g)
    return plan


def plan_top_down(g: ng.ModelGraph, scores, capacities,
                  seed=None) -> SlicingPlan:
    """Nested plan via the top-down heuristic on the flat formulation."""
    caps = _validate_capacities(g, capacities)
    items = PlanItems.build(g, scores)
    sols = solve_iterative(items.profits, items.weights, caps, mode="td",
                           forced=items.forced_min)
    points = [items.counts_from_selection(s.selected) for s in sols]
    plan = SlicingPlan(caps, np.array(points), heuristic="td", seed=seed)
    plan.validate(g)
    return plan


def plan_baseline(g: ng.ModelGraph, strategy, capacities, seed=0):
    """Equal-share baselines: keep the same unit fraction in every layer.

    Unit choice is by descending L1 weight norm or seeded-uniform random;
    the graph is re-permuted by that ordering so rows remain leading
    prefixes. Returns (permuted graph, plan).
    """
    from .importance import UnitScore, permute_descending

    caps = _validate_capacities(g, capacities)
    rng = np.random.default_rng(seed)
    costs = {(c.layer, c.unit): c.macs for c in ng.unit_macs(g)}
    scores = []
    for li in g.sliceable_indices():
        spec = g.layers[li]
        karr = g.weights[li]["kernel"].array.astype(np.float64)
        if strategy == "l1":
            if spec.kind == ng.DENSE:
                axis = tuple(a for a in range(karr.ndim)
                             if a != (0 if li in g.transposed_dense else 1))
                vals = np.abs(karr).sum(axis=axis)
            else:
                vals = np.abs(karr).sum(axis=tuple(range(1, karr.ndim)))
        elif strategy == "random":
            vals = rng.random(spec.units)
        else:
            raise ConfigError(f"unknown baseline strategy {strategy!r}")
        scores.extend(
            UnitScore(li, u, float(vals[u]), costs[(li, u)])
            for u in range(spec.units)
        )
    g2, _ = permute_descending(g, scores)

    sliceable = g2.sliceable_indices()
    units = np.array([g2.layers[i].units for i in sliceable])
    rows = []
    for cap in caps:
        chosen = None
        for k in range(1000, 0, -1):
            f = k / 1000.0
            raw = (f * units).astype(np.int64)
            widths = np.maximum(1, raw)
            if ng.plan_macs(g2, widths.tolist()) <= cap:
                chosen = widths
                if np.any(raw == 0):
                    clamped = [int(sliceable[j])
                               for j in np.nonzero(raw == 0)[0]]
                    warnings.warn(
                        f"equal share {f:.3f} yields 0 units in layers "
                        f"{clamped}; clamped to 1"
                    )
                break
        if chosen is None:
            raise InfeasiblePlanError(
                f"no equal-share fraction fits capacity {cap}"
            )
        rows.append(chosen.tolist())
    plan = SlicingPlan(caps, np.array(rows), heuristic=strategy, seed=seed)
    plan.validate(g2)
    return g2, plan


# -- depthwise-separable chains ----------------------------------------------


@dataclass
class DwBlock:
    dw_profits: np.ndarray     # (n_prev,) one per depthwise filter
    w2: int                    # MACs per depthwise filter
    n_units: int               # pointwise filter count
    kernel_profits: np.ndarray  # (n_units, n_prev) per pointwise kernel
    w3: int                    # MACs per pointwise kernel
    pw_extra_macs: int = 0     # per-pointwise-filter rider (classifier share)

    def __post_init__(self):
        self.dw_profits = np.asarray(self.dw_profits, dtype=np.float64)
        self.kernel_profits = np.asarray(self.kernel_profits,
                                         dtype=np.float64)
        if self.kernel_profits.shape != (self.n_units, len(self.dw_profits)):
            raise ConfigError("kernel profit matrix shape mismatch")
        if self.w2 <= 0 or self.w3 <= 0 or self.pw_extra_macs < 0:
            raise ConfigError("MAC coefficients must be positive")


@dataclass
class DwInstance:
    first_profits: np.ndarray
    w1: int
    n0: int
    blocks: list
    capacity: int

    def __post_init__(self):
        self.first_profits = np.asarray(self.first_profits, dtype=np.float64)
        if len(self.first_profits) != self.n0:
            raise ConfigError("first layer profit count mismatch")
        if self.w1 <= 0:
            raise ConfigError("MAC coefficients must be positive")
        if np.any(np.diff(self.first_profits) > 1e-12):
            raise ConfigError("first layer profits must be descending")
        for b in self.blocks:
            rowsum = b.kernel_profits.sum(axis=1)
            if np.any(np.diff(rowsum) > 1e-9 * np.maximum(1.0, rowsum[:-1])):
                raise ConfigError(
                    "pointwise filter profits must be descending; "
                    "permute first"
                )


@dataclass
class DwSolution:
    counts: tuple
    profit: float
    macs: int


def dw_objective(inst: DwInstance, counts) -> tuple:
    """(profit, macs) of a count tuple under prefix-selection semantics."""
    counts = [int(c) for c in counts]
    x0 = counts[0]
    profit = float(inst.first_profits[:x0].sum())
    macs = x0 * inst.w1
    for i, blk in enumerate(inst.blocks):
        xp, x = counts[i], counts[i + 1]
        profit += float(blk.dw_profits[:xp].sum())
        profit += float(blk.kernel_profits[:x, :xp].sum())
        macs += xp * blk.w2 + x * xp * blk.w3 + x * blk.pw_extra_macs
    return profit, macs


def solve_depthwise(inst: DwInstance, min_counts=None,
                    max_counts=None) -> DwSolution:
    """Exact filter counts for a depthwise-separable chain.

    Choosing count x in a layer takes its top-x prefix; the depthwise
    filter count equals the previous layer count and every chosen
    pointwise filter carries exactly that many kernels. Dynamic
    programming over (block, previous count, MAC budget).
    """
    d = len(inst.blocks)
    sizes = [inst.n0] + [b.n_units for b in inst.blocks]
    minc = [1] * (d + 1) if min_counts is None else [int(v) for v in min_counts]
    maxc = list(sizes) if max_counts is None else [int(v) for v in max_counts]
    if len(minc) != d + 1 or len(maxc) != d + 1:
        raise ConfigError("count bounds must cover every layer")
    for lo, hi, n in zip(minc, maxc, sizes):
        if not (1 <= lo <= hi <= n):
            raise ConfigError(f"invalid count bounds [{lo}, {hi}] for n={n}")
    _, min_macs = dw_objective(inst, minc)
    if min_macs > inst.capacity:
        raise InfeasiblePlanError(
            f"minimal network needs {min_macs} MACs > capacity "
            f"{inst.capacity}"
        )

    coeffs = [inst.w1]
    for b in inst.blocks:
        coeffs.extend([b.w2, b.w3])
        if b.pw_extra_macs:
            coeffs.append(b.pw_extra_macs)
    g = int(np.gcd.reduce(np.array(coeffs, dtype=np.int64)))
    w1 = inst.w1 // g
    cap = int(inst.capacity) // g

    # prefix sums
    f1 = np.concatenate([[0.0], np.cumsum(inst.first_profits)])
    dpre, kpre = [], []
    for b in inst.blocks:
        dpre.append(np.concatenate([[0.0], np.cumsum(b.dw_profits)]))
        k2 = np.zeros((b.n_units + 1, len(b.dw_profits) + 1))
        k2[1:, 1:] = b.kernel_profits.cumsum(axis=0).cumsum(axis=1)
        kpre.append(k2)

    neg = -np.inf
    tables = []
    m = np.full((sizes[0] + 1, cap + 1), neg)
    for x in range(minc[0], maxc[0] + 1):
        c0 = x * w1
        if c0 <= cap:
            m[x, c0:] = f1[x]
    tables.append(m)
    for i, blk in enumerate(inst.blocks):
        w2 = blk.w2 // g
        w3 = blk.w3 // g
        wf = blk.pw_extra_macs // g
        mn = np.full((sizes[i + 1] + 1, cap + 1), neg)
        prev = tables[i]
        for x in range(minc[i + 1], maxc[i + 1] + 1):
            for xp in range(minc[i], maxc[i] + 1):
                s = xp * w2 + x * xp * w3 + x * wf
                if s > cap:
                    continue
                add = dpre[i][xp] + kpre[i][x, xp]
                np.maximum(mn[x, s:], prev[xp, : cap + 1 - s] + add,
                           out=mn[x, s:])
        tables.append(mn)

    last = tables[-1]
    best_x, best_v = -1, neg
    for x in range(maxc[-1], minc[-1] - 1, -1):  # prefer larger counts on ties
        if last[x, cap] > best_v:
            best_v, best_x = last[x, cap], x
    if best_x < 0 or best_v == neg:
        raise InfeasiblePlanError("no feasible depthwise configuration")

    # backtrack by recomputation, preferring larger predecessor counts
    counts = [0] * (d + 1)
    counts[d] = best_x
    budget = cap
    for i in range(d, 0, -1):
        blk = inst.blocks[i - 1]
        w2 = blk.w2 // g
        w3 = blk.w3 // g
        wf = blk.pw_extra_macs // g
        x = counts[i]
        target = tables[i][x, budget]
        found = False
        for xp in range(maxc[i - 1], minc[i - 1] - 1, -1):
            s = xp * w2 + x * xp * w3 + x * wf
            if s > budget:
                continue
            add = dpre[i - 1][xp] + kpre[i - 1][x, xp]
            if tables[i - 1][xp, budget - s] + add == target:
                counts[i - 1] = xp
                budget -= s
                found = True
                break
        if not found:
            raise IntegrityError("depthwise backtrack failed")
    profit, macs = dw_objective(inst, counts)
    return DwSolution(tuple(counts), profit, macs)


def build_dw_instance(g: ng.ModelGraph, scores, grad_store) -> DwInstance:
    """DwInstance for a depthwise-separable graph from permuted scores.

    Kernel profits of each pointwise layer come from per-weight scores;
    the filter-level bias/batchnorm share is folded into the first kernel
    column, which every feasible solution includes (at least one unit per
    layer is always kept). The classifier MAC share rides on the last
    block's pointwise filters so the capacity bounds full-model MACs.
    """
    from .importance import pointwise_kernel_scores

    by_layer = scores_by_layer(scores)
    sliceable = g.sliceable_indices()
    conv_idx = sliceable[0]
    if g.layers[conv_idx].kind != ng.CONV2D:
        raise ConfigError("depthwise formulation expects a leading conv layer")
    per_unit = {c.layer: c.macs for c in ng.unit_macs(g)}

    first_scores = np.array([s.importance for s in by_layer[conv_idx]])
    blocks = []
    cur = conv_idx
    cls_idx = g.classifier_index()
    cls_spec = g.layers[cls_idx]
    feed, info = ng.dense_feed_structure(g, cls_idx)
    cls_per_unit = (cls_spec.units * info[0] * info[1]
                    if feed == "spatial" else cls_spec.units)
    while True:
        dw = g.next_compute_layer(cur)
        if dw is None or g.layers[dw].kind != ng.DEPTHWISE:
            break
        pw = g.next_compute_layer(dw)
        if pw is None or g.layers[pw].kind != ng.POINTWISE:
            raise ConfigError("depthwise layer must feed a pointwise layer")
        dw_scores = np.array([s.importance for s in by_layer[dw]])
        kmat = pointwise_kernel_scores(g, grad_store, pw)
        extras = np.zeros(g.layers[pw].units)
        gb = grad_store.grads[(pw, "bias")]
        extras += np.abs(gb * g.weights[pw]["bias"].array.astype(np.float64))
        bn = g.attached_batchnorm(pw)
        if bn is not None:
            for nm in ("gamma", "beta"):
                extras += np.abs(
                    grad_store.grads[(bn, nm)]
                    * g.weights[bn][nm].array.astype(np.float64)
                )
        kmat = kmat.copy()
        kmat[:, 0] += extras
        is_last = g.next_compute_layer(pw) in (None, cls_idx) or (
            g.layers[g.next_compute_layer(pw)].kind != ng.DEPTHWISE
        )
        # per-kernel MACs: the full per-filter cost spread over full cin
        blocks.append(DwBlock(
            dw_profits=dw_scores,
            w2=per_unit[dw],
            n_units=g.layers[pw].units,
            kernel_profits=kmat,
            w3=per_unit[pw] // g.layers[cur].units,
            pw_extra_macs=cls_per_unit if is_last else 0,
        ))
        cur = pw
    if not blocks:
        raise ConfigError("graph has no depthwise blocks")
    return DwInstance(
        first_profits=first_scores,
        w1=per_unit[conv_idx],
        n0=g.layers[conv_idx].units,
        blocks=blocks,
        capacity=1,  # set per solve
    )


def plan_depthwise(g: ng.ModelGraph, scores, grad_store, capacities,
                   mode="bu", seed=None) -> SlicingPlan:
    """Iterative BU/TD planning with the exact depthwise solver."""
    caps = _validate_capacities(g, capacities)
    base = build_dw_instance(g, scores, grad_store)
    d = len(base.blocks)
    rows = [None] * len(caps)
    if mode == "bu":
        minc = [1] * (d + 1)
        for stage, cap in enumerate(sorted(caps)):
            sol = solve_depthwise(replace(base, capacity=cap),
                                  min_counts=minc)
            minc = list(sol.counts)
            rows[caps.index(cap)] = list(sol.counts)
    elif mode == "td":
        maxc = None
        for stage, cap in enumerate(caps):
            sol = solve_depthwise(replace(base, capacity=cap),
                                  max_counts=maxc)
            maxc = list(sol.counts)
            rows[stage] = list(sol.counts)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    plan = SlicingPlan(caps, np.array(rows), heuristic=mode, seed=seed)
    plan.validate(g)
    return plan


def dw_dp_work(g: ng.ModelGraph, capacities) -> float:
    """Rough cell count of the depthwise DP; used to pick a formulation."""
    blocks = sum(1 for l in g.layers if l.kind == ng.DEPTHWISE)
    width = max((l.units for l in g.layers if l.kind == ng.POINTWISE),
                default=0)
    coeffs = [c.macs for c in ng.unit_macs(g)]
    gg = int(np.gcd.reduce(np.array(coeffs, dtype=np.int64))) or 1
    cap = max(capacities) // gg
    return float(blocks) * width * width * cap


def make_plan(g: ng.ModelGraph, scores, capacities, heuristic="bu",
              grad_store=None, formulation="auto", seed=None,
              dw_work_limit=2e9):
    """Plan entry point choosing between flat and depthwise formulations.

    'auto' uses the exact depthwise solver when the graph has depthwise
    blocks and the DP is affordable, otherwise the flat item formulation
    (depthwise MACs ride along with the preceding layer's units).
    """
    has_dw = any(l.kind == ng.DEPTHWISE for l in g.layers)
    if heuristic in ("l1", "random"):
        raise ConfigError("baseline plans are built by plan_baseline")
    if formulation == "auto":
        use_dw = (has_dw and grad_store is not None
                  and dw_dp_work(g, capacities) <= dw_work_limit)
    elif formulation == "depthwise":
        if not has_dw:
            raise ConfigError("graph has no depthwise blocks")
        if grad_store is None:
            raise ConfigError("depthwise formulation needs gradient sums")
        use_dw = True
    elif formulation == "flat":
        use_dw = False
    else:
        raise ConfigError(f"unknown formulation {formulation!r}")
    if use_dw:
        return plan_depthwise(g, scores, grad_store, capacities,
                              mode=heuristic, seed=seed)
    if heuristic == "bu":
        return plan_bottom_up(g, scores, capacities, seed=seed)
    return plan_top_down(g, scores, capacities, seed=seed)
