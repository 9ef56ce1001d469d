"""AUROC, context-cluster silhouette, score runtime benchmark and PCA export."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from ._io import atomic_write_bytes, atomic_write_text
from .imageops import ContentTransform, get_context_augmentation
from .scoring import GaussianScoreModel, NNDScoreModel, TestTimePolicy, gaussian_moments


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that an anomaly (label 1) outscores a normal sample, ties counting half.

    Computed from midranks (Mann-Whitney U), which is exact under ties.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in shape")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != len(y):
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both normal and anomalous samples")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def cosine_distances(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cosine distance undefined for a zero vector")
    U = X / norms
    return np.clip(1.0 - U @ U.T, 0.0, 2.0)


def silhouette(representations, labels, metric: str = "cosine") -> float:
    """Mean silhouette coefficient of a labeling, cosine distance by default."""
    X = np.asarray(representations, dtype=np.float64)
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValueError("silhouette needs at least two clusters")
    if np.any(counts < 2):
        raise ValueError("silhouette undefined for a singleton cluster")
    if metric == "cosine":
        D = cosine_distances(X)
    elif metric == "euclidean":
        D = np.sqrt(np.maximum(((X[:, None] - X[None]) ** 2).sum(-1), 0.0))
    else:
        raise ValueError(f"unsupported metric {metric!r}")
    member = y[:, None] == classes[None, :]  # (n, k)
    sums = D @ member  # distance totals to every cluster
    own = member.argmax(axis=1)
    n_own = counts[own]
    a = sums[np.arange(len(y)), own] / (n_own - 1)
    mean_to = sums / counts[None, :]
    mean_to[np.arange(len(y)), own] = np.inf
    b = mean_to.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def context_silhouette(encoder, images, t_c) -> float:
    """Silhouette of representations of ``x`` and ``t_c(x)`` labeled by context."""
    fn = get_context_augmentation(t_c)
    images = np.asarray(images, dtype=np.float64)
    reps = np.vstack([encoder(images), encoder(np.stack([fn(x) for x in images]))])
    return silhouette(reps, np.repeat([0, 1], len(images)))


# -- PCA alignment export ---------------------------------------------------


@dataclass
class PCAResult:
    coords: np.ndarray
    components: np.ndarray
    mean: np.ndarray
    explained_variance_ratio: np.ndarray


def pca_2d(X: np.ndarray, n_components: int = 2) -> PCAResult:
    """PCA with each component's largest-magnitude loading made positive."""
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    Xc = X - mean
    _, sv, Vt = np.linalg.svd(Xc, full_matrices=False)
    comps = Vt[:n_components].copy()
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    var = sv**2
    total = var.sum()
    ratio = var[:n_components] / total if total > 0 else np.zeros(n_components)
    return PCAResult(coords=Xc @ comps.T, components=comps, mean=mean, explained_variance_ratio=ratio)


EMBEDDING_FIELDS = ("id", "context", "split", "anomaly", "pc1", "pc2")


def pca_alignment_export(
    encoder,
    images,
    t_c,
    out_csv=None,
    out_figure=None,
    ids: Sequence | None = None,
    splits: Sequence[str] | None = None,
    anomaly: Sequence[int] | None = None,
) -> tuple[list[dict], PCAResult]:
    """Project every sample and its context counterpart onto 2 principal components.

    Writes one CSV row per (sample, context) and, optionally, a figure where a
    segment joins the two positions of each sample.
    """
    images = np.asarray(images, dtype=np.float64)
    n = len(images)
    if n < 3:
        raise ValueError("need at least 3 samples for the alignment export")
    ids = list(range(n)) if ids is None else list(ids)
    splits = ["test"] * n if splits is None else list(splits)
    anomaly = [0] * n if anomaly is None else [int(a) for a in anomaly]
    fn = get_context_augmentation(t_c)
    reps = np.vstack([encoder(images), encoder(np.stack([fn(x) for x in images]))])
    pca = pca_2d(reps)
    rows = []
    for ctx in (0, 1):
        for k in range(n):
            pc = pca.coords[ctx * n + k]
            rows.append(
                dict(id=ids[k], context=ctx, split=splits[k], anomaly=anomaly[k],
                     pc1=float(pc[0]), pc2=float(pc[1]))
            )
    if out_csv is not None:
        write_csv(out_csv, rows, EMBEDDING_FIELDS)
    if out_figure is not None:
        render_alignment_figure(rows, out_figure)
    return rows, pca


def render_alignment_figure(rows: list[dict], path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_id: dict = {}
    for r in rows:
        by_id.setdefault(r["id"], {})[r["context"]] = r
    fig, ax = plt.subplots(figsize=(6, 5))
    for pair in by_id.values():
        if 0 in pair and 1 in pair:
            ax.plot([pair[0]["pc1"], pair[1]["pc1"]], [pair[0]["pc2"], pair[1]["pc2"]],
                    color="0.8", lw=0.5, zorder=1)
    styles = {(0, 0): ("tab:blue", "o"), (1, 0): ("tab:orange", "o"),
              (0, 1): ("tab:blue", "x"), (1, 1): ("tab:orange", "x")}
    for (ctx, anom), (color, marker) in styles.items():
        pts = [(r["pc1"], r["pc2"]) for r in rows if r["context"] == ctx and r["anomaly"] == anom]
        if pts:
            xy = np.array(pts)
            label = f"context {ctx}" + (" (anomaly)" if anom else "")
            ax.scatter(xy[:, 0], xy[:, 1], c=color, marker=marker, s=12, label=label, zorder=2)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    buf = io.BytesIO()
    fig.savefig(buf, format=path.suffix.lstrip(".") or "png", dpi=120)
    plt.close(fig)
    return atomic_write_bytes(path, buf.getvalue())


# -- runtime benchmark ------------------------------------------------------


def _single_transform_policy() -> TestTimePolicy:
    return TestTimePolicy(transforms=(ContentTransform(), ContentTransform()))


def bench_scores(
    n_values: Sequence[int],
    n_batches: int = 10,
    batch_size: int = 32,
    d: int = 64,
    repeats: int = 7,
    seed: int = 0,
) -> list[dict]:
    """Median fit and per-query scoring times of both score models on random representations."""
    n_values = list(n_values)
    if n_values != sorted(n_values):
        raise ValueError("n values must be sorted ascending")
    rng = np.random.default_rng(seed)
    queries = [rng.normal(size=(batch_size, d)) for _ in range(n_batches)]
    n_queries = n_batches * batch_size
    policy = _single_transform_policy()
    rows = []
    for n in n_values:
        reps = rng.normal(size=(n, d))

        def fit_nnd_model():
            return NNDScoreModel(policy=policy, keys=[reps, reps])

        def fit_lh_model():
            mean, cov = gaussian_moments(reps)
            eps = max(1e-6 * np.trace(cov) / d, 1e-12)
            return GaussianScoreModel(policy=policy, means=[mean, mean], covs=[cov, cov], eps=[eps, eps])

        row = {"n": n, "d": d, "queries": n_queries}
        for name, fit in (("nnd", fit_nnd_model), ("lh", fit_lh_model)):
            fit_times, query_times = [], []
            for _ in range(repeats):
                t0 = time.perf_counter()
                model = fit()
                fit_times.append(time.perf_counter() - t0)
                t0 = time.perf_counter()
                for q in queries:
                    model.score_representations(q, 0)
                query_times.append(time.perf_counter() - t0)
            row[f"{name}_fit_s"] = float(np.median(fit_times))
            row[f"{name}_query_s"] = float(np.median(query_times)) / n_queries
            row[f"{name}_bytes"] = model.nbytes()
        rows.append(row)
    return rows


BENCH_FIELDS = ("n", "d", "queries", "nnd_fit_s", "nnd_query_s", "nnd_bytes",
                "lh_fit_s", "lh_query_s", "lh_bytes")


# -- reports ----------------------------------------------------------------


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)  # one per (variant, seed)
    silhouette: float | None = None
    runtime: list[dict] = field(default_factory=list)
    embedding_export: str | None = None
    config_hash: str | None = None

    @property
    def auroc(self) -> float:
        return float(np.mean([r["auroc"] for r in self.rows]))

    def to_manifest(self) -> dict:
        by_variant: dict[str, list[float]] = {}
        for r in self.rows:
            by_variant.setdefault(r["variant"], []).append(r["auroc"])
        return {
            "config_hash": self.config_hash,
            "auroc": {
                v: {"mean": float(np.mean(a)), "std": float(np.std(a)), "per_seed": a}
                for v, a in by_variant.items()
            },
            "silhouette": self.silhouette,
            "runtime": self.runtime,
            "embedding_export": self.embedding_export,
            "rows": self.rows,
        }

    def write(self, csv_path, json_path=None) -> None:
        fields = ("variant", "seed", "auroc", "n", "source", "config_hash")
        write_csv(csv_path, [{**r, "config_hash": self.config_hash} for r in self.rows], fields)
        if json_path is not None:
            atomic_write_text(json_path, json.dumps(self.to_manifest(), indent=2, sort_keys=True))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def write_csv(path, rows: list[dict], fields: Sequence[str]) -> Path:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in fields})
    return atomic_write_text(path, buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

