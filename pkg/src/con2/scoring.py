"""Anomaly scores on encoder representations.

Two per-view scores are provided: the nearest-neighbor cosine score and a
Gaussian negative log-likelihood of the unit-normalized representation. Both
are averaged over a frozen set of ``A`` test-time content transforms, the first
half applied to the query and the second half to its context-augmented copy.

An ``encoder`` is any callable mapping a batch of images ``(n, H, W, C)`` to
representations ``(n, d)``; a :class:`~con2.trainer.Checkpoint` qualifies.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from ._io import atomic_write_bytes, atomic_write_text
from .imageops import (
    ContentAugmentationPolicy,
    ContentTransform,
    context_name,
    get_context_augmentation,
    sample_content_transform,
)

Encoder = Callable[[np.ndarray], np.ndarray]
SCORE_MODEL_FORMAT = 1
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TestTimePolicy:
    """``A`` frozen content transforms plus the context augmentation."""

    __test__ = False  # not a pytest class

    transforms: tuple[ContentTransform, ...]
    context: str = "invert"
    seed: int = 0

    def __post_init__(self):
        if len(self.transforms) < 2 or len(self.transforms) % 2:
            raise ValueError(f"A must be a positive even number, got {len(self.transforms)}")
        get_context_augmentation(self.context)

    @property
    def A(self) -> int:
        return len(self.transforms)

    def uses_context(self, i: int) -> bool:
        """Transforms in the second half act on the context-augmented query."""
        return i >= self.A // 2

    @classmethod
    def draw(
        cls,
        A: int = 40,
        content: ContentAugmentationPolicy | None = None,
        context: str = "invert",
        seed: int = 0,
    ) -> "TestTimePolicy":
        if A < 2 or A % 2:
            raise ValueError(f"A must be a positive even number, got {A}")
        content = content or ContentAugmentationPolicy()
        rng = np.random.default_rng(seed)
        transforms = tuple(sample_content_transform(content, rng) for _ in range(A))
        return cls(transforms=transforms, context=context_name(context), seed=seed)

    def to_dict(self) -> dict:
        return {
            "context": self.context,
            "seed": self.seed,
            "transforms": [t.to_dict() for t in self.transforms],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TestTimePolicy":
        return cls(
            transforms=tuple(ContentTransform.from_dict(t) for t in d["transforms"]),
            context=d["context"],
            seed=d["seed"],
        )


def transformed_views(images, t: ContentTransform, context_fn=None) -> np.ndarray:
    """``t(x)`` (or ``t(context_fn(x))``) for every image."""
    out = []
    for img in images:
        img = np.asarray(img, dtype=np.float64)
        if context_fn is not None:
            img = context_fn(img)
        out.append(t(img))
    return np.stack(out)


def policy_views(images, policy: TestTimePolicy, i: int) -> np.ndarray:
    ctx = get_context_augmentation(policy.context) if policy.uses_context(i) else None
    return transformed_views(images, policy.transforms[i], ctx)


def _unit_rows(reps: np.ndarray) -> np.ndarray:
    reps = np.asarray(reps, dtype=np.float64)
    norms = np.linalg.norm(reps, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero representation: cosine similarity undefined")
    return reps / norms


def _resolve_index(policy: TestTimePolicy, t) -> int:
    if isinstance(t, (int, np.integer)):
        if not 0 <= t < policy.A:
            raise KeyError(f"transform index {t} not fitted (A = {policy.A})")
        return int(t)
    for i, fitted in enumerate(policy.transforms):
        if fitted == t:
            return i
    raise KeyError(f"transform {t} is not one of the fitted transforms")


# -- nearest neighbor -------------------------------------------------------


@dataclass
class NNDScoreModel:
    """Training representations for each test-time transform."""

    policy: TestTimePolicy
    keys: list[np.ndarray]  # A arrays of shape (n, d)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.keys) != self.policy.A:
            raise ValueError("need one key matrix per test-time transform")
        self._unit = [_unit_rows(k) for k in self.keys]

    kind = "nnd"

    @property
    def n(self) -> int:
        return self.keys[0].shape[0]

    @property
    def d(self) -> int:
        return self.keys[0].shape[1]

    def score_representations(self, reps, i: int) -> np.ndarray:
        """``-max`` cosine similarity of each representation to the stored rows."""
        q = _unit_rows(np.atleast_2d(reps))
        sims = q @ self._unit[i].T
        # quantize ulp-level noise so a query equal to a stored view scores exactly -1
        best = np.clip(np.round(sims.max(axis=1), 12), -1.0, 1.0)
        return -best

    def nbytes(self) -> int:
        return sum(k.nbytes for k in self.keys)


def fit_nnd(encoder: Encoder, train_images, policy: TestTimePolicy) -> NNDScoreModel:
    if len(train_images) == 0:
        raise ValueError("cannot fit a score model on an empty training set")
    keys = [
        np.asarray(encoder(policy_views(train_images, policy, i)), dtype=np.float64)
        for i in range(policy.A)
    ]
    return NNDScoreModel(policy=policy, keys=keys)


def s_nnd(model: NNDScoreModel, encoder: Encoder, x, t) -> float:
    """Nearest-neighbor score of one image under fitted transform ``t`` (index or descriptor)."""
    i = _resolve_index(model.policy, t)
    rep = encoder(model.policy.transforms[i](np.asarray(x, dtype=np.float64))[None])
    return float(model.score_representations(rep, i)[0])


# -- Gaussian likelihood ----------------------------------------------------


@dataclass
class GaussianScoreModel:
    """Mean and covariance of unit-normalized training representations per transform."""

    policy: TestTimePolicy
    means: list[np.ndarray]
    covs: list[np.ndarray]
    eps: list[float]
    meta: dict = field(default_factory=dict)

    kind = "lh"

    def __post_init__(self):
        if not len(self.means) == len(self.covs) == len(self.eps) == self.policy.A:
            raise ValueError("need one mean, covariance and eps per test-time transform")
        self._chol = []
        self._logdet = []
        for mean, cov, eps in zip(self.means, self.covs, self.eps):
            L, logdet = _factorize(np.asarray(cov, dtype=np.float64), eps)
            if not np.all(np.isfinite(mean)):
                raise ValueError("non-finite mean")
            self._chol.append(L)
            self._logdet.append(logdet)

    @property
    def d(self) -> int:
        return len(self.means[0])

    def nll(self, z, i: int) -> np.ndarray:
        """``-log N(z | mean, cov + eps I)`` for rows of ``z`` (used as given)."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        diff = (z - self.means[i]).T
        y = solve_triangular(self._chol[i], diff, lower=True, check_finite=False)
        maha = np.einsum("ij,ij->j", y, y)
        return 0.5 * (maha + self._logdet[i] + self.d * _LOG_2PI)

    def score_representations(self, reps, i: int) -> np.ndarray:
        return self.nll(_unit_rows(np.atleast_2d(reps)), i)

    def nbytes(self) -> int:
        return sum(m.nbytes + c.nbytes for m, c in zip(self.means, self.covs))


def _factorize(cov: np.ndarray, eps: float):
    d = cov.shape[0]
    reg = cov + eps * np.eye(d)
    reg = 0.5 * (reg + reg.T)
    eig = np.linalg.eigvalsh(reg)
    if eig[0] <= max(eig[-1], 0.0) * d * np.finfo(float).eps or eig[0] <= 0:
        raise np.linalg.LinAlgError(
            f"covariance is singular after regularization with eps={eps:g} "
            f"(eigenvalues in [{eig[0]:.3g}, {eig[-1]:.3g}])"
        )
    L = np.linalg.cholesky(reg)
    return L, 2.0 * float(np.sum(np.log(np.diag(L))))


def default_eps(cov: np.ndarray) -> float:
    """``1e-6 * trace / d``, floored so a zero covariance stays factorizable."""
    d = cov.shape[0]
    return max(1e-6 * float(np.trace(cov)) / d, 1e-12)


def gaussian_moments(reps) -> tuple[np.ndarray, np.ndarray]:
    z = _unit_rows(reps)
    if len(z) < 2:
        raise ValueError("need at least two samples to estimate a covariance")
    mean = z.mean(axis=0)
    centered = z - mean
    cov = centered.T @ centered / (len(z) - 1)
    return mean, cov


def fit_gaussian(
    encoder: Encoder, train_images, policy: TestTimePolicy, eps: float | str = "auto"
) -> GaussianScoreModel:
    if len(train_images) < 2:
        raise ValueError("need at least two training images")
    means, covs, eps_used = [], [], []
    for i in range(policy.A):
        reps = np.asarray(encoder(policy_views(train_images, policy, i)), dtype=np.float64)
        mean, cov = gaussian_moments(reps)
        means.append(mean)
        covs.append(cov)
        eps_used.append(default_eps(cov) if eps == "auto" else float(eps))
    return GaussianScoreModel(policy=policy, means=means, covs=covs, eps=eps_used)


def s_lh(model: GaussianScoreModel, encoder: Encoder, x, t) -> float:
    i = _resolve_index(model.policy, t)
    rep = encoder(model.policy.transforms[i](np.asarray(x, dtype=np.float64))[None])
    return float(model.score_representations(rep, i)[0])


# -- test-time-augmented score ----------------------------------------------

ScoreModel = NNDScoreModel | GaussianScoreModel


def fit_score_model(encoder: Encoder, train_images, policy: TestTimePolicy, variant: str, eps="auto"):
    variant = variant.lower()
    if variant == "nnd":
        return fit_nnd(encoder, train_images, policy)
    if variant == "lh":
        return fit_gaussian(encoder, train_images, policy, eps)
    raise ValueError(f"unknown score variant {variant!r}; expected 'nnd' or 'lh'")


def per_transform_scores(model: ScoreModel, encoder: Encoder, images) -> np.ndarray:
    """``(A, n)`` matrix of per-transform scores; row ``i >= A/2`` scores the context view."""
    policy = model.policy
    return np.stack(
        [
            model.score_representations(encoder(policy_views(images, policy, i)), i)
            for i in range(policy.A)
        ]
    )


def final_scores(
    model: ScoreModel, encoder: Encoder, images, policy: TestTimePolicy | None = None
) -> np.ndarray:
    """Mean of the ``A`` per-transform scores for each image."""
    if policy is not None and policy != model.policy:
        if policy.A != model.policy.A:
            raise ValueError(f"policy has A = {policy.A} but the model was fitted with A = {model.policy.A}")
        raise ValueError("policy transforms differ from those the model was fitted with")
    return per_transform_scores(model, encoder, images).mean(axis=0)


def final_score(model: ScoreModel, encoder: Encoder, x, policy: TestTimePolicy | None = None) -> float:
    return float(final_scores(model, encoder, np.asarray(x)[None], policy)[0])


def threshold_predict(scores: Sequence[float], threshold: float) -> np.ndarray:
    """1 (anomaly) where the score is strictly above ``threshold``."""
    return (np.asarray(scores, dtype=np.float64) > threshold).astype(np.int64)


# -- persistence ------------------------------------------------------------


def save_score_model(model: ScoreModel, path, meta: dict | None = None) -> Path:
    """Write ``data.bin`` (little-endian float32, row-major) and ``manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if isinstance(model, NNDScoreModel):
        blocks = model.keys
        extra = {"n": model.n, "d": model.d}
    else:
        blocks = [a for m, c in zip(model.means, model.covs) for a in (m, c)]
        extra = {"d": model.d, "eps": list(model.eps)}
    blob = b"".join(np.ascontiguousarray(b, dtype="<f4").tobytes() for b in blocks)
    manifest = {
        "format_version": SCORE_MODEL_FORMAT,
        "kind": model.kind,
        "A": model.policy.A,
        "policy": model.policy.to_dict(),
        "dtype": "<f4",
        **extra,
        **(meta or model.meta),
    }
    atomic_write_bytes(path / "data.bin", blob)
    atomic_write_text(path / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_score_model(path) -> ScoreModel:
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise FileNotFoundError(f"no score model at {path}")
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != SCORE_MODEL_FORMAT:
        raise ValueError(f"unsupported score-model format {manifest.get('format_version')}")
    data = np.frombuffer((path / "data.bin").read_bytes(), dtype="<f4").astype(np.float64)
    policy = TestTimePolicy.from_dict(manifest["policy"])
    A, d = manifest["A"], manifest["d"]
    meta = {k: v for k, v in manifest.items() if k not in ("policy",)}
    if manifest["kind"] == "nnd":
        n = manifest["n"]
        keys = list(data.reshape(A, n, d))
        return NNDScoreModel(policy=policy, keys=keys, meta=meta)
    per = d + d * d
    chunks = data.reshape(A, per)
    means = [c[:d] for c in chunks]
    covs = [c[d:].reshape(d, d) for c in chunks]
    return GaussianScoreModel(policy=policy, means=means, covs=covs, eps=manifest["eps"], meta=meta)
