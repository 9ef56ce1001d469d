"""Context augmentations, the content-augmentation policy and assumption checks.

Images are ``H x W x C`` float arrays in ``[0, 1]``. Context augmentations
(:func:`invert`, :func:`vflip`, :func:`equalize`) are deterministic and
parameter-free. Content augmentations are sampled from a
:class:`ContentAugmentationPolicy` as fully parameterized
:class:`ContentTransform` descriptors that can be replayed any number of times.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.stats import rankdata, spearmanr
from skimage.transform import resize

CONTEXT_KINDS = ("invert", "vflip", "equalize")
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


def as_image(img, min_size: int = 8) -> np.ndarray:
    """Validate ``img`` and return it as a float64 ``H x W x C`` array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected an H x W x C image with C in (1, 3), got shape {arr.shape}")
    if arr.shape[0] < min_size or arr.shape[1] < min_size:
        raise ValueError(f"image must be at least {min_size}x{min_size}, got {arr.shape[:2]}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return arr


def to_rgb(img: np.ndarray) -> np.ndarray:
    """Replicate a single-channel image to three channels."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        return np.repeat(img, 3, axis=2)
    return img


# -- context augmentations --------------------------------------------------


PIXEL_GRID = 2.0**-53


def snap_to_grid(img: np.ndarray) -> np.ndarray:
    """Round pixel values to multiples of ``2**-53`` (moves each by at most ``2**-54``).

    On this grid ``1 - x`` is exact in float64, so :func:`invert` round-trips
    bit for bit. Off the grid no float map can: below ``2**-53``, ``1 - x``
    already rounds to ``1.0``.
    """
    return np.round(np.asarray(img, dtype=np.float64) / PIXEL_GRID) * PIXEL_GRID


def invert(img: np.ndarray) -> np.ndarray:
    """Map every pixel value ``x`` to ``1 - x``."""
    return 1.0 - np.asarray(img)


def vflip(img: np.ndarray) -> np.ndarray:
    """Mirror the image vertically (row ``r`` goes to row ``H - 1 - r``)."""
    return np.ascontiguousarray(np.asarray(img)[::-1])


def _equalize_channel(chan: np.ndarray) -> np.ndarray:
    levels = np.clip(np.rint(chan * 255.0), 0, 255).astype(np.int64)
    hist = np.bincount(levels.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    cdf_min = cdf[np.flatnonzero(hist)[0]]
    total = cdf[-1]
    if total == cdf_min:
        # single occupied level: nothing to spread
        return chan.copy()
    lut = np.rint((cdf - cdf_min) / (total - cdf_min) * 255.0) / 255.0
    return lut[levels]


def equalize(img: np.ndarray) -> np.ndarray:
    """Per-channel histogram equalization over 256 quantization levels."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return _equalize_channel(img)
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = _equalize_channel(img[:, :, c])
    return out


def identity(img: np.ndarray) -> np.ndarray:
    return np.asarray(img)


_CONTEXTS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "invert": invert,
    "vflip": vflip,
    "equalize": equalize,
    "identity": identity,
}


def get_context_augmentation(kind: str | Callable) -> Callable[[np.ndarray], np.ndarray]:
    """Resolve a context augmentation by name; callables pass through unchanged."""
    if callable(kind):
        return kind
    try:
        return _CONTEXTS[kind]
    except KeyError:
        raise ValueError(
            f"unknown context augmentation {kind!r}; expected one of {sorted(_CONTEXTS)}"
        ) from None


def context_name(t_c) -> str:
    if isinstance(t_c, str):
        return t_c
    for name, fn in _CONTEXTS.items():
        if fn is t_c:
            return name
    return getattr(t_c, "__name__", repr(t_c))


# -- content augmentations --------------------------------------------------


@dataclass(frozen=True)
class ContentAugmentationPolicy:
    """SimCLR-style content augmentation recipe.

    ``jitter`` holds the brightness, contrast, saturation and hue strengths.
    ``output_size`` of ``None`` keeps the input resolution.
    """

    crop_scale: tuple[float, float] = (0.08, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    hflip_p: float = 0.5
    jitter: tuple[float, float, float, float] = (0.8, 0.8, 0.8, 0.2)
    jitter_p: float = 0.8
    gray_p: float = 0.2
    output_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not 0 < self.crop_ratio[0] <= self.crop_ratio[1]:
            raise ValueError(f"invalid crop_ratio {self.crop_ratio}")
        for name in ("hflip_p", "jitter_p", "gray_p"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValueError(f"{name} must be a probability, got {p}")
        if any(s < 0 for s in self.jitter) or self.jitter[3] > 0.5:
            raise ValueError(f"invalid jitter strengths {self.jitter}")
        if self.output_size is not None and self.output_size < 1:
            raise ValueError("output_size must be positive")

    @classmethod
    def identity(cls, output_size: int | None = None) -> "ContentAugmentationPolicy":
        """A degenerate policy whose samples only resize."""
        return cls(
            crop_scale=(1.0, 1.0),
            crop_ratio=(1.0, 1.0),
            hflip_p=0.0,
            jitter=(0.0, 0.0, 0.0, 0.0),
            jitter_p=0.0,
            gray_p=0.0,
            output_size=output_size,
        )

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


@dataclass(frozen=True)
class ContentTransform:
    """A replayable content transform.

    ``crop`` is ``(top, left, height, width)`` as fractions of the source image,
    so one descriptor applies to images of any resolution.
    """

    crop: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
    hflip: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    grayscale: bool = False
    output_size: int | None = None

    def __call__(self, img: np.ndarray) -> np.ndarray:
        return apply_content_transform(self, img)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ContentTransform":
        d = dict(d)
        d["crop"] = tuple(float(v) for v in d["crop"])
        return cls(**d)


def _sample_crop(rng: np.random.Generator, policy: ContentAugmentationPolicy):
    # Random-resized-crop on the unit square; falls back to the full image.
    lo, hi = policy.crop_scale
    log_r = (math.log(policy.crop_ratio[0]), math.log(policy.crop_ratio[1]))
    for _ in range(10):
        area = rng.uniform(lo, hi)
        ratio = math.exp(rng.uniform(*log_r))
        w = math.sqrt(area * ratio)
        h = math.sqrt(area / ratio)
        if 0 < w <= 1 and 0 < h <= 1:
            top = rng.uniform(0.0, 1.0 - h)
            left = rng.uniform(0.0, 1.0 - w)
            return (float(top), float(left), float(h), float(w))
    return (0.0, 0.0, 1.0, 1.0)


def sample_content_transform(
    policy: ContentAugmentationPolicy, rng: np.random.Generator
) -> ContentTransform:
    """Draw one fully parameterized content transform from ``policy``."""
    crop = _sample_crop(rng, policy)
    hflip = bool(rng.random() < policy.hflip_p)
    b, c, s, h = policy.jitter
    factors = dict(brightness=1.0, contrast=1.0, saturation=1.0, hue=0.0)
    if rng.random() < policy.jitter_p:
        factors["brightness"] = float(rng.uniform(max(0.0, 1 - b), 1 + b))
        factors["contrast"] = float(rng.uniform(max(0.0, 1 - c), 1 + c))
        factors["saturation"] = float(rng.uniform(max(0.0, 1 - s), 1 + s))
        factors["hue"] = float(rng.uniform(-h, h))
    grayscale = bool(rng.random() < policy.gray_p)
    return ContentTransform(
        crop=crop, hflip=hflip, grayscale=grayscale, output_size=policy.output_size, **factors
    )


def _gray(img: np.ndarray) -> np.ndarray:
    return img @ GRAY_WEIGHTS


def apply_content_transform(t: ContentTransform, img: np.ndarray) -> np.ndarray:
    """Apply ``t`` to an ``H x W x 3`` image; returns a new image in ``[0, 1]``."""
    img = to_rgb(np.asarray(img, dtype=np.float64))
    H, W = img.shape[:2]
    top, left, h, w = t.crop
    r0 = int(round(top * H))
    c0 = int(round(left * W))
    r1 = max(r0 + 1, min(H, int(round((top + h) * H))))
    c1 = max(c0 + 1, min(W, int(round((left + w) * W))))
    out = img[r0:r1, c0:c1]
    size = t.output_size or H
    out_w = t.output_size or W
    if out.shape[:2] != (size, out_w):
        out = resize(out, (size, out_w), order=1, mode="edge", anti_aliasing=False)
    if t.hflip:
        out = out[:, ::-1]
    if t.brightness != 1.0:
        out = np.clip(out * t.brightness, 0.0, 1.0)
    if t.contrast != 1.0:
        mean = _gray(out).mean()
        out = np.clip(t.contrast * out + (1 - t.contrast) * mean, 0.0, 1.0)
    if t.saturation != 1.0:
        g = _gray(out)[:, :, None]
        out = np.clip(t.saturation * out + (1 - t.saturation) * g, 0.0, 1.0)
    if t.hue != 0.0 and np.ptp(out, axis=2).max() > 0:
        hsv = rgb_to_hsv(out)
        hsv[:, :, 0] = np.mod(hsv[:, :, 0] + t.hue, 1.0)
        out = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    if t.grayscale:
        out = np.repeat(_gray(out)[:, :, None], 3, axis=2)
    return np.ascontiguousarray(out)


# -- assumption checks ------------------------------------------------------


@dataclass
class AssumptionReport:
    augmentation: str
    distinctiveness: float | None = None
    alignment: float | None = None
    n_samples: int = 0
    k: int | None = None
    distance: dict = field(default_factory=dict)

    def summary_lines(self) -> list[str]:
        lines = []
        if self.distinctiveness is not None:
            lines.append(f"distinctiveness = {self.distinctiveness:.6g}")
        if self.alignment is not None:
            lines.append(f"alignment = {self.alignment:.6g}")
        return lines


def _flatten(samples: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([np.asarray(s, dtype=np.float64).ravel() for s in samples])


def _cosine_distance_matrix(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cosine distance undefined for an all-zero image")
    U = X / norms
    return 1.0 - U @ U.T


def check_distinctiveness(samples: Sequence[np.ndarray], t_c, k: int = 5) -> AssumptionReport:
    """Estimate how confusable the original and context-augmented samples are.

    Pools ``{x} U {t_c(x)}`` and returns the fraction of pooled points whose
    ``k`` nearest neighbors (pixel-space cosine distance) include a point from
    the other context. 0 means the contexts never mix.
    """
    if k < 1:
        raise ValueError("k must be positive")
    if len(samples) < k + 1:
        raise ValueError(f"need at least k + 1 = {k + 1} samples, got {len(samples)}")
    fn = get_context_augmentation(t_c)
    originals = _flatten(samples)
    contexts = _flatten([fn(s) for s in samples])
    pooled = np.vstack([originals, contexts])
    labels = np.repeat([0, 1], len(samples))
    D = _cosine_distance_matrix(pooled)
    np.fill_diagonal(D, np.inf)
    nn = np.argsort(D, axis=1, kind="stable")[:, :k]
    mixed = (labels[nn] != labels[:, None]).any(axis=1)
    return AssumptionReport(
        augmentation=context_name(t_c),
        distinctiveness=float(mixed.mean()),
        n_samples=len(samples),
        k=k,
        distance={"distinctiveness": "cosine"},
    )


def _pairwise_euclidean(X: np.ndarray) -> np.ndarray:
    iu = np.triu_indices(len(X), k=1)
    diff = X[iu[0]] - X[iu[1]]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def check_alignment(samples: Sequence[np.ndarray], t_c) -> AssumptionReport:
    """Spearman correlation of pairwise pixel distances before and after ``t_c``."""
    if len(samples) < 3:
        raise ValueError("alignment needs at least 3 samples")
    fn = get_context_augmentation(t_c)
    before = _pairwise_euclidean(_flatten(samples))
    after = _pairwise_euclidean(_flatten([fn(s) for s in samples]))
    # rounding keeps float noise from reordering exactly tied distances
    scale = max(before.max(), after.max(), np.finfo(float).tiny)
    before, after = np.round(before / scale, 9), np.round(after / scale, 9)
    if np.array_equal(rankdata(before), rankdata(after)):
        # identical rankings: report the exact value rather than the Pearson round-off
        rho = 1.0
    else:
        rho = spearmanr(before, after).statistic
    return AssumptionReport(
        augmentation=context_name(t_c),
        alignment=float(rho),
        n_samples=len(samples),
        distance={"alignment": "euclidean"},
    )
