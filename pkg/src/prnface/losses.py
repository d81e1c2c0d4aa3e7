"""Triplet-ratio, pairwise and identity losses, and triplet sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DatasetError
from .numerics import nn
from .numerics import tensor as T
from .numerics.tensor import Tensor


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int


@dataclass(frozen=True)
class LossWeights:
    triplet: float = 1.0
    pairwise: float = 0.5
    identity: float = 1.0
    margin: float = 1.0
    normalize: bool = False

    def __post_init__(self):
        if min(self.triplet, self.pairwise, self.identity) < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.margin > 0:
            raise ValueError("margin must be positive")


@dataclass
class LossBreakdown:
    total: Tensor
    triplet: float
    pairwise: float
    identity: float

    def as_dict(self) -> dict[str, float]:
        return {
            "L_t": self.triplet,
            "L_p": self.pairwise,
            "L_id": self.identity,
            "total": self.total.item(),
        }


def _as_2d(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    return x.reshape(1, -1) if x.ndim == 1 else x


def _check_widths(*xs: Tensor) -> None:
    if len({x.shape for x in xs}) != 1:
        raise ValueError(f"embedding shapes differ: {[x.shape for x in xs]}")


def l2_normalize(x: Tensor) -> Tensor:
    return x / T.l2_norm(x, axis=-1).reshape(-1, 1)


def triplet_ratio_terms(anchor, positive, negative, margin: float = 1.0) -> Tensor:
    """Per-triplet max(0, 1 - |a - n| / (|a - p| + margin))."""
    if not margin > 0:
        raise ValueError("margin must be positive")
    a, p, n = _as_2d(anchor), _as_2d(positive), _as_2d(negative)
    _check_widths(a, p, n)
    d_pos = T.l2_norm(a - p, axis=-1)
    d_neg = T.l2_norm(a - n, axis=-1)
    return T.relu(1.0 - d_neg / (d_pos + margin))


def triplet_ratio_loss(anchor, positive, negative, margin: float = 1.0) -> Tensor:
    """Sum over triplets of the ratio hinge."""
    return triplet_ratio_terms(anchor, positive, negative, margin).sum()


def pairwise_loss(anchor, positive) -> Tensor:
    """Sum over (anchor, positive) pairs of squared Euclidean distance."""
    a, p = _as_2d(anchor), _as_2d(positive)
    _check_widths(a, p)
    d = a - p
    return (d * d).sum()


def total_loss(
    anchor: Tensor,
    positive: Tensor,
    negative: Tensor,
    logits: Tensor | None,
    labels,
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Weighted sum of the three terms, each averaged over its own count."""
    a, p, n = _as_2d(anchor), _as_2d(positive), _as_2d(negative)
    if weights.normalize:
        a, p, n = l2_normalize(a), l2_normalize(p), l2_normalize(n)
    count = a.shape[0]
    lt = triplet_ratio_loss(a, p, n, weights.margin) * (1.0 / count)
    lp = pairwise_loss(a, p) * (1.0 / count)
    total = lt * weights.triplet + lp * weights.pairwise
    lid_value = 0.0
    if logits is not None:
        lid = nn.softmax_cross_entropy(logits, labels)
        total = total + lid * weights.identity
        lid_value = lid.item()
    return LossBreakdown(total, lt.item(), lp.item(), lid_value)


def sample_triplets(
    labels,
    batch_size: int,
    strategy: str = "random",
    seed: int = 0,
    embeddings: np.ndarray | None = None,
    margin: float = 1.0,
) -> list[Triplet]:
    """Draw ``batch_size`` triplets of sample indices.

    ``semi-hard`` needs ``embeddings`` and prefers negatives with
    d_p < d_n < d_p + margin, falling back to any d_n < d_p + margin, then to a
    uniform negative.
    """
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 2:
        raise DatasetError("triplets need at least two identities")
    anchor_pool = np.flatnonzero(np.isin(labels, ids[counts >= 2]))
    if anchor_pool.size == 0:
        raise DatasetError("triplets need an identity with at least two samples")
    if strategy not in ("random", "semi-hard"):
        raise ValueError(f"unknown mining strategy {strategy!r}")
    if strategy == "semi-hard" and embeddings is None:
        raise ValueError("semi-hard mining needs embeddings")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(batch_size):
        a = int(rng.choice(anchor_pool))
        same = np.flatnonzero(labels == labels[a])
        same = same[same != a]
        p = int(rng.choice(same))
        negatives = np.flatnonzero(labels != labels[a])
        if strategy == "semi-hard":
            emb = np.asarray(embeddings, dtype=np.float64)
            d_p = np.linalg.norm(emb[a] - emb[p])
            d_n = np.linalg.norm(emb[negatives] - emb[a], axis=1)
            semi = negatives[(d_n > d_p) & (d_n < d_p + margin)]
            close = negatives[d_n < d_p + margin]
            if semi.size:
                negatives = semi
            elif close.size:
                negatives = close
        n = int(rng.choice(negatives))
        out.append(Triplet(a, p, n))
    return out
