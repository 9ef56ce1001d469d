"""Encoder, projection heads, the Con2 training loop and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dataprep import DatasetSplit, make_view_batch, normalize
from .imageops import ContentAugmentationPolicy, context_name
from .objective import ProjectionSet, con2_loss

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
ENCODERS = ("tiny-cnn", "paper-resnet18")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, breakdown: dict):
        self.step = step
        self.breakdown = breakdown
        super().__init__(f"non-finite loss at step {step}: {breakdown}")


@dataclass(frozen=True)
class ModelConfig:
    encoder: str = "tiny-cnn"
    rep_dim: int = 64
    width: int = 32
    head_hidden: int = 64
    head_out: int = 32
    in_channels: int = 3

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}; expected one of {ENCODERS}")
        if self.encoder == "paper-resnet18" and self.rep_dim != 512:
            raise ValueError("paper-resnet18 produces 512-d representations; set rep_dim = 512")
        if self.head_out < 2 or self.rep_dim < 2 or self.head_hidden < 1:
            raise ValueError("rep_dim and head_out must be >= 2")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings. ``max_steps`` overrides ``epochs`` when set.

    ``alpha`` pins the content-alignment weight; ``None`` anneals it linearly
    from 0 at the first step to 1 at the last.
    """

    epochs: int = 2048
    max_steps: int | None = None
    batch_size: int = 32
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-3
    tau: float = 0.5
    context: str = "invert"
    content: ContentAugmentationPolicy = field(default_factory=ContentAugmentationPolicy)
    alpha: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if self.lr < 0 or self.weight_decay < 0 or self.tau <= 0:
            raise ValueError("lr and weight_decay must be >= 0 and tau > 0")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be non-negative")

    def total_steps(self, n_train: int) -> int:
        if self.max_steps is not None:
            return self.max_steps
        # partial batches are dropped, matching the index stream in ``_batches``
        return self.epochs * (n_train // min(self.batch_size, n_train))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        content = dict(d.pop("content", {}) or {})
        for key in ("crop_scale", "crop_ratio", "jitter"):
            if key in content:
                content[key] = tuple(content[key])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(content=ContentAugmentationPolicy(**content), **d)


# -- networks ---------------------------------------------------------------


def _conv_block(c_in: int, c_out: int, pool: bool) -> nn.Sequential:
    layers = [nn.Conv2d(c_in, c_out, 3, padding=1, bias=False), nn.BatchNorm2d(c_out), nn.ReLU()]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


class TinyCNN(nn.Module):
    """Three conv blocks followed by global average pooling."""

    def __init__(self, in_channels: int = 3, width: int = 32, rep_dim: int = 64):
        super().__init__()
        self.features = nn.Sequential(
            _conv_block(in_channels, width, pool=True),
            _conv_block(width, 2 * width, pool=True),
            _conv_block(2 * width, rep_dim, pool=False),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)


def _resnet18_trunk() -> nn.Module:
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    net.fc = nn.Identity()
    return net


class ProjectionHead(nn.Sequential):
    def __init__(self, d_in: int, hidden: int, d_out: int):
        super().__init__(nn.Linear(d_in, hidden), nn.ReLU(), nn.Linear(hidden, d_out))


class Con2Model(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.encoder == "tiny-cnn":
            self.encoder = TinyCNN(cfg.in_channels, cfg.width, cfg.rep_dim)
        else:
            self.encoder = _resnet18_trunk()
        self.context_head = ProjectionHead(cfg.rep_dim, cfg.head_hidden, cfg.head_out)
        self.content_head = ProjectionHead(cfg.rep_dim, cfg.head_hidden, cfg.head_out)

    def forward(self, x: torch.Tensor):
        h = self.encoder(x)
        return h, self.context_head(h), self.content_head(h)


def build_model(cfg: ModelConfig, seed: int) -> Con2Model:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Con2Model(cfg)


# -- schedules --------------------------------------------------------------


def anneal_alpha(step: int, total_steps: int) -> float:
    """Linear content-alignment weight: 0 at step 0, 1 at ``total_steps``."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return step / total_steps


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from ``base_lr`` at step 0 down to 0 at the last step."""
    if total_steps <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


# -- checkpoints ------------------------------------------------------------


def images_to_tensor(images) -> torch.Tensor:
    """``(n, H, W, C)`` images in ``[0, 1]`` to a normalized float32 NCHW tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected (n, H, W, C) images, got shape {arr.shape}")
    arr = to_rgb_batch(arr)
    return torch.from_numpy(np.ascontiguousarray(normalize(arr).transpose(0, 3, 1, 2)))


def to_rgb_batch(arr: np.ndarray) -> np.ndarray:
    if arr.shape[-1] == 1:
        return np.repeat(arr, 3, axis=-1)
    return arr


@dataclass
class Checkpoint:
    model: Con2Model
    model_config: ModelConfig
    train_config: TrainConfig
    step: int = 0
    history: list[dict] = field(default_factory=list)
    rng_state: dict | None = None
    input_size: tuple[int, int] | None = None
    meta: dict = field(default_factory=dict)

    # inference

    def _check_shape(self, x: torch.Tensor) -> None:
        if x.shape[1] != self.model_config.in_channels:
            raise ValueError(f"expected {self.model_config.in_channels} channels, got {x.shape[1]}")
        if self.input_size is not None and tuple(x.shape[2:]) != tuple(self.input_size):
            raise ValueError(
                f"image size {tuple(x.shape[2:])} does not match the trained size {self.input_size}"
            )

    @torch.no_grad()
    def encode(self, images, batch_size: int = 256) -> np.ndarray:
        """Representations ``g(x)`` of a batch of images, shape ``(n, d)``."""
        x = images_to_tensor(images)
        self._check_shape(x)
        self.model.eval()
        out = [self.model.encoder(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        return torch.cat(out).numpy()

    __call__ = encode

    @torch.no_grad()
    def _head(self, head: nn.Module, reps) -> np.ndarray:
        r = torch.as_tensor(np.asarray(reps, dtype=np.float32))
        squeeze = r.ndim == 1
        if squeeze:
            r = r[None]
        if r.shape[1] != self.model_config.rep_dim:
            raise ValueError(f"expected representations of length {self.model_config.rep_dim}")
        head.eval()
        out = head(r).numpy()
        return out[0] if squeeze else out

    def project_context(self, reps) -> np.ndarray:
        return self._head(self.model.context_head, reps)

    def project_content(self, reps) -> np.ndarray:
        return self._head(self.model.content_head, reps)

    # persistence

    def manifest(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT,
            "model_config": asdict(self.model_config),
            "train_config": self.train_config.to_dict(),
            "step": self.step,
            "input_size": list(self.input_size) if self.input_size else None,
            "rng_state": self.rng_state,
            "meta": self.meta,
        }

    def save(self, path) -> Path:
        """Write ``manifest.json``, ``params.npz`` and ``loss_history.csv`` atomically."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
        try:
            state = {k: v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
            with open(tmp / "params.npz", "wb") as fh:
                np.savez(fh, **state)
            (tmp / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))
            write_history_csv(tmp / "loss_history.csv", self.history)
            _replace_dir(tmp, path)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        manifest_path = path / "manifest.json"
        if not manifest_path.is_file():
            raise FileNotFoundError(f"no checkpoint at {path}")
        manifest = json.loads(manifest_path.read_text())
        version = manifest.get("format_version")
        if version != CHECKPOINT_FORMAT:
            raise ValueError(f"checkpoint format {version} is not supported (expected {CHECKPOINT_FORMAT})")
        model_config = ModelConfig(**manifest["model_config"])
        train_config = TrainConfig.from_dict(manifest["train_config"])
        model = Con2Model(model_config)
        with np.load(path / "params.npz") as blob:
            state = {k: torch.from_numpy(blob[k].copy()) for k in blob.files}
        model.load_state_dict(state)
        model.eval()
        return cls(
            model=model,
            model_config=model_config,
            train_config=train_config,
            step=manifest["step"],
            history=read_history_csv(path / "loss_history.csv"),
            rng_state=manifest.get("rng_state"),
            input_size=tuple(manifest["input_size"]) if manifest.get("input_size") else None,
            meta=manifest.get("meta", {}),
        )


HISTORY_FIELDS = ("step", "loss", "context", "content", "alpha", "lr")


def write_history_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_FIELDS})


def read_history_csv(path) -> list[dict]:
    if not Path(path).is_file():
        return []
    with open(path, newline="") as fh:
        return [
            {k: int(v) if k == "step" else float(v) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def _replace_dir(src: Path, dst: Path) -> None:
    if dst.exists():
        old = dst.with_name(f".{dst.name}.old")
        if old.exists():
            shutil.rmtree(old)
        os.replace(dst, old)
        os.replace(src, dst)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(src, dst)


# -- training ---------------------------------------------------------------


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches; reshuffles after every pass."""
    size = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - size + 1, size):
            yield perm[start : start + size]


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    dataset: DatasetSplit,
    log_every: int = 0,
) -> Checkpoint:
    """Optimize the Con2 objective on the (anomaly-free) training split."""
    images = np.asarray(dataset.train, dtype=np.float64)
    if len(images) < 2:
        raise ValueError("need at least two training images")
    cfg = train_config
    total = cfg.total_steps(len(images))
    rng = np.random.default_rng(cfg.seed)
    model = build_model(model_config, cfg.seed)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay
    )
    batches = _batches(len(images), cfg.batch_size, rng)
    history: list[dict] = []
    for step in range(total):
        idx = next(batches)
        batch = make_view_batch(
            [(images[i], int(i)) for i in idx], cfg.context, cfg.content, rng
        )
        x = torch.from_numpy(np.ascontiguousarray(batch.views.transpose(0, 3, 1, 2)))
        labels = torch.from_numpy(batch.labels)
        ids = torch.from_numpy(batch.ids)

        alpha = cfg.alpha if cfg.alpha is not None else anneal_alpha(step, max(total - 1, 1))
        lr = cosine_lr(step, total, cfg.lr)
        for group in optimizer.param_groups:
            group["lr"] = lr

        model.train()
        _, z_context, z_content = model(x)
        loss = con2_loss(
            ProjectionSet(z_context, labels, ids, cfg.tau),
            ProjectionSet(z_content, labels, ids, cfg.tau),
            alpha,
        )
        value = float(loss.total.detach())
        record = dict(step=step, loss=value, context=loss.context, content=loss.content, alpha=alpha, lr=lr)
        if not math.isfinite(value):
            raise NonFiniteLossError(step, record)
        optimizer.zero_grad(set_to_none=True)
        loss.total.backward()
        optimizer.step()
        history.append(record)
        if log_every and step % log_every == 0:
            logger.info("step %d/%d loss %.4f (context %.4f, content %.4f, alpha %.3f)",
                        step, total, value, loss.context, loss.content, alpha)
    model.eval()
    return Checkpoint(
        model=model,
        model_config=model_config,
        train_config=cfg,
        step=total,
        history=history,
        rng_state=rng.bit_generator.state,
        input_size=tuple(images.shape[1:3]),
        meta={"context": context_name(cfg.context), "n_train": len(images)},
    )


def encode(checkpoint: Checkpoint, img) -> np.ndarray:
    """Representation of a single image (or a batch when given ``(n, H, W, C)``)."""
    arr = np.asarray(img)
    if arr.ndim == 3:
        return checkpoint.encode(arr[None])[0]
    return checkpoint.encode(arr)


def project_context(checkpoint: Checkpoint, representation) -> np.ndarray:
    return checkpoint.project_context(representation)


def project_content(checkpoint: Checkpoint, representation) -> np.ndarray:
    return checkpoint.project_content(representation)

