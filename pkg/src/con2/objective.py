"""Contrastive losses over projection sets.

Every loss is built from the same ``M x M`` matrix of instance-discrimination
terms ``l(i, j) = log sum_{k != i} exp(s_ik / tau) - s_ij / tau`` where ``s`` is
the cosine similarity. The log-sum-exp is evaluated with max subtraction
(``torch.logsumexp``) so values are reproducible to the last digits.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

DEFAULT_TAU = 0.5


@dataclass
class ProjectionSet:
    """Projected vectors plus the context labels and base ids they carry."""

    vectors: torch.Tensor
    labels: torch.Tensor | None = None
    ids: torch.Tensor | None = None
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if not isinstance(self.vectors, torch.Tensor):
            self.vectors = torch.as_tensor(np.asarray(self.vectors, dtype=np.float64))
        if self.vectors.ndim != 2:
            raise ValueError(f"vectors must be 2-d, got shape {tuple(self.vectors.shape)}")
        M, d = self.vectors.shape
        if M < 2 or d < 2:
            raise ValueError(f"need at least 2 vectors of dimension >= 2, got {M} x {d}")
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        for name in ("labels", "ids"):
            v = getattr(self, name)
            if v is None:
                continue
            v = torch.as_tensor(np.asarray(v) if not isinstance(v, torch.Tensor) else v)
            v = v.to(device=self.vectors.device, dtype=torch.long).reshape(-1)
            if len(v) != M:
                raise ValueError(f"{name} has length {len(v)}, expected {M}")
            setattr(self, name, v)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def _require(self, name: str) -> torch.Tensor:
        v = getattr(self, name)
        if v is None:
            raise ValueError(f"this loss needs {name} on the projection set")
        return v


@dataclass
class LossValue:
    total: torch.Tensor
    context: float
    content: float
    alpha: float

    def __float__(self) -> float:
        return float(self.total)


def pairwise_instance_losses(vectors: torch.Tensor, tau: float) -> torch.Tensor:
    """``M x M`` matrix of instance-discrimination terms; the diagonal is ``+inf``."""
    norms = vectors.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("cosine similarity undefined for a zero vector")
    u = vectors / norms
    logits = (u @ u.T) / tau
    eye = torch.eye(len(u), dtype=torch.bool, device=u.device)
    logits = logits.masked_fill(eye, float("-inf"))
    return torch.logsumexp(logits, dim=1, keepdim=True) - logits


def instance_discrimination(i: int, j: int, pset: ProjectionSet) -> torch.Tensor:
    """Loss of pulling item ``j`` toward anchor ``i`` against every other item."""
    M = len(pset)
    if not (0 <= i < M and 0 <= j < M):
        raise IndexError(f"indices ({i}, {j}) out of range for {M} items")
    if i == j:
        raise ValueError("anchor and positive must differ")
    return pairwise_instance_losses(pset.vectors, pset.tau)[i, j]


def _masked_sum(pset: ProjectionSet, mask: torch.Tensor) -> torch.Tensor:
    losses = pairwise_instance_losses(pset.vectors, pset.tau)
    mask = mask & ~torch.eye(len(pset), dtype=torch.bool, device=mask.device)
    return torch.where(mask, losses, torch.zeros_like(losses)).sum()


def _balanced_groups(labels: torch.Tensor, min_groups: int) -> tuple[int, int]:
    values, counts = torch.unique(labels, return_counts=True)
    if len(values) < min_groups:
        raise ValueError(f"need at least {min_groups} context groups, got {len(values)}")
    if not bool((counts == counts[0]).all()):
        raise ValueError(f"context groups are unbalanced: {counts.tolist()}")
    per_group = int(counts[0])
    if per_group < 2 or per_group % 2:
        raise ValueError(f"each context needs 2N >= 2 items, got {per_group}")
    return len(values), per_group


def context_contrast_loss(pset: ProjectionSet) -> torch.Tensor:
    """Mean instance discrimination over ordered same-context pairs, K = 4N(2N - 1)."""
    labels = pset._require("labels")
    n_groups, per_group = _balanced_groups(labels, 2)
    if n_groups != 2:
        raise ValueError("context contrasting expects exactly two contexts")
    K = 2 * per_group * (per_group - 1)
    return _masked_sum(pset, labels[:, None] == labels[None, :]) / K


def multi_context_contrast_loss(pset: ProjectionSet) -> torch.Tensor:
    """Context contrasting over ``C >= 2`` balanced contexts, normalized by 2NC(2N - 1)."""
    labels = pset._require("labels")
    n_groups, per_group = _balanced_groups(labels, 2)
    K = n_groups * per_group * (per_group - 1)
    return _masked_sum(pset, labels[:, None] == labels[None, :]) / K


def content_alignment_loss(pset: ProjectionSet) -> torch.Tensor:
    """Mean instance discrimination over ordered pairs among the 4 views of each base id."""
    ids = pset._require("ids")
    _, counts = torch.unique(ids, return_counts=True)
    if not bool((counts == 4).all()):
        raise ValueError(f"every base id must appear exactly 4 times, got counts {counts.tolist()}")
    n_ids = len(counts)
    return _masked_sum(pset, ids[:, None] == ids[None, :]) / (12 * n_ids)


def con2_loss(context_set: ProjectionSet, content_set: ProjectionSet, alpha: float) -> LossValue:
    """Context contrasting plus ``alpha`` times content alignment."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    if len(context_set) != len(content_set):
        raise ValueError(
            f"projection sets differ in size: {len(context_set)} vs {len(content_set)}"
        )
    ctx = context_contrast_loss(context_set)
    cnt = content_alignment_loss(content_set)
    total = ctx + alpha * cnt
    return LossValue(total=total, context=float(ctx.detach()), content=float(cnt.detach()), alpha=float(alpha))


def supcon_loss(pset: ProjectionSet) -> torch.Tensor:
    """Supervised contrastive loss: per anchor, positives averaged, anchors summed."""
    labels = pset._require("labels")
    _, counts = torch.unique(labels, return_counts=True)
    if bool((counts < 2).any()):
        raise ValueError("every label needs at least two members")
    losses = pairwise_instance_losses(pset.vectors, pset.tau)
    same = (labels[:, None] == labels[None, :]) & ~torch.eye(
        len(pset), dtype=torch.bool, device=labels.device
    )
    per_anchor = torch.where(same, losses, torch.zeros_like(losses)).sum(dim=1)
    n_same = same.sum(dim=1).to(losses.dtype)
    return (per_anchor / n_same).sum()


def simclr_loss(pset: ProjectionSet) -> torch.Tensor:
    """Symmetric SimCLR loss; ``ids`` pair the two views of each sample."""
    ids = pset._require("ids")
    _, counts = torch.unique(ids, return_counts=True)
    if not bool((counts == 2).all()):
        raise ValueError("every pair id must appear exactly twice")
    n_pairs = len(counts)
    return _masked_sum(pset, ids[:, None] == ids[None, :]) / (2 * n_pairs)


# -- golden fixture files ---------------------------------------------------


def save_fixture(path, pset: ProjectionSet, loss: str, expected: float) -> None:
    """Write a projection set and its expected loss as a plain text fixture."""
    v = pset.vectors.detach().cpu().double().numpy()
    lines = ["# loss fixture", f"loss {loss}", f"tau {pset.tau!r}", f"expected {expected:.12g}"]
    if pset.labels is not None:
        lines.append("labels " + " ".join(str(int(x)) for x in pset.labels))
    if pset.ids is not None:
        lines.append("ids " + " ".join(str(int(x)) for x in pset.ids))
    lines.append("vectors")
    lines.extend(" ".join(repr(float(x)) for x in row) for row in v)
    Path(path).write_text("\n".join(lines) + "\n")


def load_fixture(path) -> tuple[ProjectionSet, str, float]:
    header: dict[str, str] = {}
    rows: list[list[float]] = []
    in_vectors = False
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if in_vectors:
            rows.append([float(x) for x in line.split()])
        elif line == "vectors":
            in_vectors = True
        else:
            key, _, value = line.partition(" ")
            header[key] = value
    to_ints = lambda s: [int(x) for x in s.split()] if s is not None else None  # noqa: E731
    pset = ProjectionSet(
        vectors=np.array(rows),
        labels=to_ints(header.get("labels")),
        ids=to_ints(header.get("ids")),
        tau=float(header["tau"]),
    )
    return pset, header["loss"], float(header["expected"])


LOSSES = {
    "context_contrast": context_contrast_loss,
    "content_alignment": content_alignment_loss,
    "supcon": supcon_loss,
    "simclr": simclr_loss,
    "multi_context_contrast": multi_context_contrast_loss,
}

