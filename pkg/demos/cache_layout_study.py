"""Why the transposed weight store is cache-friendly.

The standard forward multiply X^T . W walks a row-major W column by
column, striding a full row between consecutive reads. Computing
(W^T . X)^T from the transposed store reads each neuron's weights
contiguously instead. This script prints the two access-order sequences
for the small worked example, then sweeps a simulated 16 kB two-way
cache with 8-byte lines over matrix shapes, element widths and slicing
points.

Note the ceiling: with weight reads only, every cache line of a large
matrix must be fetched once per sweep, so the best possible hit rate at
batch b is 1 - elem_bytes / (8 b), i.e. 87.5% for 4-byte elements at
batch 4. Hardware counters that also see instruction fetches report
higher absolute numbers; the ordering between the two layouts is what
this model reproduces.
"""

from nestslice.cachesim import (RP2040_CACHE, bench_report, simulate,
                                trace_matmul)

# ------------------------------------------------ worked example, 2x3 W
basic = trace_matmul("basic", m=2, n=3, b=3, elem_bytes=4) // 4
opt = trace_matmul("optimized", m=2, n=3, b=3, elem_bytes=4) // 4
print("basic access order:     ", " -> ".join(map(str, basic[:8])), "...")
print("optimized access order: ", " -> ".join(map(str, opt[:8])), "...")

# ---------------------------------------------------------- hit ceiling
m, n, b = 256, 512, 4
for elem in (1, 2, 4):
    tr = trace_matmul("optimized", m, n, b, 1.0, elem)
    st = simulate(tr, RP2040_CACHE)
    bound = 1 - elem / (8 * b)
    print(f"optimized, {elem}-byte elements: hit rate {st.hit_rate:.4f} "
          f"(compulsory-miss ceiling {bound:.4f})")

# ------------------------------------------------------------ full sweep
rows = bench_report(cfg=RP2040_CACHE, b=4, miss_penalty=10)
pairs = {}
for r in rows:
    pairs.setdefault((r["m"], r["n"], r["elem_bytes"], r["slice"]),
                     {})[r["mode"]] = r

print("\n  shape      elem  slice   basic-hit  opt-hit   cost ratio")
for (m, n, elem, sl), pair in sorted(pairs.items()):
    b_, o_ = pair["basic"], pair["optimized"]
    print(f"  {m:3d}x{n:<4d}  {elem}B   {int(sl * 100):3d}%"
          f"    {b_['hit_rate']:.3f}     {o_['hit_rate']:.3f}"
          f"     {o_['cost'] / b_['cost']:.2f}")

worse = sum(1 for pair in pairs.values()
            if pair["optimized"]["hit_rate"] < pair["basic"]["hit_rate"])
print(f"\nsweep points where the optimized layout lost: {worse}")
