"""
Per-query cost of the two scores
================================

The nearest-neighbour score compares each query against every stored
training representation, so its cost grows with the training set. The
Gaussian score only needs a mean and a Cholesky factor.
"""

# %%
import matplotlib.pyplot as plt

from con2 import bench_scores

ns = [100, 300, 1000, 3000, 10_000]
rows = bench_scores(ns, n_batches=10, batch_size=32, d=64, repeats=5)

# %%
plt.loglog(ns, [r["nnd_query_s"] for r in rows], "o-", label="nearest neighbour")
plt.loglog(ns, [r["lh_query_s"] for r in rows], "s-", label="Gaussian")
plt.xlabel("training samples")
plt.ylabel("seconds per query")
plt.legend()

for r in rows:
    print(f"n={r['n']:>6}  nnd={r['nnd_query_s']:.2e}s  lh={r['lh_query_s']:.2e}s")
