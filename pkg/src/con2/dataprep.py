"""Context-labeled datasets, 4N-view training batches and dataset ingestion."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from .imageops import (
    ContentAugmentationPolicy,
    ContentTransform,
    apply_content_transform,
    context_name,
    get_context_augmentation,
    sample_content_transform,
    snap_to_grid,
    to_rgb,
)

logger = logging.getLogger(__name__)

NORM_MEAN = 0.5
NORM_STD = 0.5
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


@dataclass(frozen=True)
class ContextDataset:
    """Each base image once per context: label 0 is the original, label 1 is ``t_c(x)``."""

    images: np.ndarray  # (2n, H, W, C)
    labels: np.ndarray  # (2n,)
    ids: np.ndarray  # (2n,)
    augmentation: str

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class ContextViewBatch:
    views: np.ndarray  # (4N, H, W, 3), normalized unless built with normalize=False
    labels: np.ndarray  # (4N,)
    ids: np.ndarray  # (4N,)
    transforms: tuple[ContentTransform, ...]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray  # (n, H, W, C), normal only
    test: np.ndarray  # (m, H, W, C)
    test_labels: np.ndarray  # (m,), 1 = anomaly
    norm_mean: float = NORM_MEAN
    norm_std: float = NORM_STD
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.train) == 0:
            raise ValueError("training split is empty")
        labels = np.asarray(self.test_labels)
        if len(labels) != len(self.test):
            raise ValueError("test images and labels differ in length")
        if len(labels) and not set(np.unique(labels)) <= {0, 1}:
            raise ValueError("test labels must be 0 (normal) or 1 (anomaly)")


def build_context_dataset(train: Sequence[np.ndarray], t_c) -> ContextDataset:
    """Label every training image 0 and its context-augmented copy 1."""
    if len(train) == 0:
        raise ValueError("cannot build a context dataset from an empty training set")
    fn = get_context_augmentation(t_c)
    originals = np.stack([np.asarray(x, dtype=np.float64) for x in train])
    contexts = np.stack([fn(x) for x in originals])
    n = len(originals)
    return ContextDataset(
        images=np.concatenate([originals, contexts]),
        labels=np.repeat([0, 1], n),
        ids=np.tile(np.arange(n), 2),
        augmentation=context_name(t_c),
    )


def normalize(views: np.ndarray, mean: float = NORM_MEAN, std: float = NORM_STD) -> np.ndarray:
    return (views - mean) / std


def make_view_batch(
    base: Sequence[tuple[np.ndarray, int]],
    t_c,
    policy: ContentAugmentationPolicy,
    rng: np.random.Generator,
    normalize_views: bool = True,
) -> ContextViewBatch:
    """Build the 4N views for N base images.

    Per base image ``x`` the views are ``t(x), t'(x), s(t_c(x)), s'(t_c(x))``
    with four independently sampled content transforms, labels ``(0, 0, 1, 1)``.
    """
    if len(base) == 0:
        raise ValueError("need at least one base image")
    fn = get_context_augmentation(t_c)
    views, labels, ids, transforms = [], [], [], []
    for img, base_id in base:
        img = to_rgb(np.asarray(img, dtype=np.float64))
        for label, source in ((0, img), (1, fn(img))):
            for _ in range(2):
                t = sample_content_transform(policy, rng)
                views.append(apply_content_transform(t, source))
                labels.append(label)
                ids.append(base_id)
                transforms.append(t)
    arr = np.stack(views).astype(np.float32)
    if normalize_views:
        arr = normalize(arr)
    return ContextViewBatch(
        views=arr,
        labels=np.asarray(labels, dtype=np.int64),
        ids=np.asarray(ids, dtype=np.int64),
        transforms=tuple(transforms),
    )


# -- synthetic desk-scale data ----------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Bright squares on a dark background: top-left quadrant is normal, bottom-right anomalous."""

    size: int = 16
    n_train: int = 200
    n_test_normal: int = 100
    n_test_anomaly: int = 100
    noise: float = 0.05
    square: int = 4
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.size < 8 or self.square < 1 or self.square > self.size // 2:
            raise ValueError("need size >= 8 and 1 <= square <= size // 2")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if min(self.n_train, self.n_test_normal, self.n_test_anomaly) < 0 or self.noise < 0:
            raise ValueError("counts and noise must be non-negative")


def _square_images(cfg: SyntheticConfig, n: int, anomalous: bool, rng: np.random.Generator):
    half = cfg.size // 2
    out = np.zeros((n, cfg.size, cfg.size, cfg.channels))
    span = half - cfg.square + 1
    for i in range(n):
        r, c = rng.integers(0, span, size=2)
        if anomalous:
            r, c = r + half, c + half
        out[i, r : r + cfg.square, c : c + cfg.square, :] = 1.0
    if cfg.noise > 0:
        out = out + rng.normal(0.0, cfg.noise, size=out.shape)
    return snap_to_grid(np.clip(out, 0.0, 1.0))


def make_synthetic_split(config: SyntheticConfig | None = None) -> DatasetSplit:
    cfg = config or SyntheticConfig()
    rng = np.random.default_rng(cfg.seed)
    train = _square_images(cfg, cfg.n_train, False, rng)
    normal = _square_images(cfg, cfg.n_test_normal, False, rng)
    anomalous = _square_images(cfg, cfg.n_test_anomaly, True, rng)
    return DatasetSplit(
        train=train,
        test=np.concatenate([normal, anomalous]),
        test_labels=np.repeat([0, 1], [cfg.n_test_normal, cfg.n_test_anomaly]),
        meta={"source": "synthetic"},
    )


# -- image folders ----------------------------------------------------------


@dataclass(frozen=True)
class FolderLayout:
    """Where the splits live under the dataset root and how images are sized.

    ``resize`` is the target length of the shorter edge; ``crop`` the side of the
    square crop taken afterwards (``None`` resizes straight to ``crop``-less
    ``resize x resize``).
    """

    train_normal: str = "train/normal"
    test_normal: str = "test/normal"
    test_anomaly: str = "test/anomaly"
    resize: int = 256
    crop: int | None = 224
    crop_mode: str = "center"
    channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.crop_mode not in ("center", "random"):
            raise ValueError(f"crop_mode must be 'center' or 'random', got {self.crop_mode!r}")
        if self.crop is not None and self.crop > self.resize:
            raise ValueError("crop must not exceed resize")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")


def _list_images(folder: Path) -> list[Path]:
    if not folder.is_dir():
        raise FileNotFoundError(f"missing image folder: {folder}")
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_image(path: Path, layout: FolderLayout, rng: np.random.Generator | None = None) -> np.ndarray:
    """Decode, resize the shorter edge, crop, and scale to ``[0, 1]``."""
    try:
        with PILImage.open(path) as im:
            im = im.convert("L" if layout.channels == 1 else "RGB")
            w, h = im.size
            s = layout.resize / min(w, h)
            new_w, new_h = max(layout.resize, round(w * s)), max(layout.resize, round(h * s))
            if layout.crop is None:
                new_w = new_h = layout.resize
            im = im.resize((new_w, new_h), PILImage.BILINEAR)
            if layout.crop is not None:
                c = layout.crop
                if layout.crop_mode == "center":
                    left, top = (new_w - c) // 2, (new_h - c) // 2
                else:
                    rng = rng or np.random.default_rng(layout.seed)
                    left = int(rng.integers(0, new_w - c + 1))
                    top = int(rng.integers(0, new_h - c + 1))
                im = im.crop((left, top, left + c, top + c))
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"could not decode image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return snap_to_grid(arr)


def load_image_folder(path, layout: FolderLayout | None = None) -> DatasetSplit:
    """Read a train/test image-folder dataset.

    Training must be anomaly-free: if any file under the normal-train folder is
    byte-identical to a file under the anomaly folder, loading fails.
    """
    layout = layout or FolderLayout()
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root does not exist: {root}")
    train_dir = root / layout.train_normal
    anomaly_dir = root / layout.test_anomaly
    train_files = _list_images(train_dir)
    normal_files = _list_images(root / layout.test_normal)
    anomaly_files = _list_images(anomaly_dir)
    if not train_files:
        raise ValueError(f"no normal training images in {train_dir}")
    if train_dir.resolve() == anomaly_dir.resolve():
        raise ValueError("the training folder is the anomaly folder")
    anomaly_digests = {_file_digest(p): p for p in anomaly_files}
    for p in train_files:
        hit = anomaly_digests.get(_file_digest(p))
        if hit is not None:
            raise ValueError(f"anomalous image {hit} appears in the training folder as {p}")
    rng = np.random.default_rng(layout.seed)
    train = np.stack([load_image(p, layout, rng) for p in train_files])
    test_files = normal_files + anomaly_files
    if test_files:
        test = np.stack([load_image(p, layout, rng) for p in test_files])
    else:
        test = np.zeros((0,) + train.shape[1:])
    logger.info("loaded %d train / %d test images from %s", len(train), len(test), root)
    return DatasetSplit(
        train=train,
        test=test,
        test_labels=np.repeat([0, 1], [len(normal_files), len(anomaly_files)]),
        meta={"source": str(root), "test_files": [str(p) for p in test_files]},
    )
