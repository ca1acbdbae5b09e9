"""Training objectives and their batch helpers.

Every loss accepts either plain arrays (returns a float) or numcore
expressions (returns an expression, so it can be differentiated).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import NumericError, ShapeError

DEFAULT_MARGIN = 1.0
DEFAULT_TEMPERATURE = 0.5
# added to self-similarities so they drop out of the NT-Xent denominator
_SELF_MASK = -1e9


@dataclass(frozen=True)
class TripletIndices:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray

    def __post_init__(self):
        for name in ("anchor", "positive", "negative"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        if not (len(self.anchor) == len(self.positive) == len(self.negative)):
            raise ShapeError("triplet index arrays differ in length")

    def __len__(self) -> int:
        return len(self.anchor)


@dataclass(frozen=True)
class AugPairBatch:
    anchors: np.ndarray
    views: np.ndarray


def _finish(expr: nc.Expr, numeric: bool):
    return nc.evaluate(expr, {}) if numeric else expr


def _is_expr(*xs) -> bool:
    return any(isinstance(x, nc.Expr) for x in xs)


def _one_hot(labels, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n_rows,):
        raise ShapeError(f"expected {n_rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    out = np.zeros((n_rows, n_classes))
    out[np.arange(n_rows), labels] = 1.0
    return out


def _selector(index: np.ndarray, n: int) -> np.ndarray:
    # row-gather as a matmul with a 0/1 matrix keeps it inside numcore
    sel = np.zeros((len(index), n))
    sel[np.arange(len(index)), index] = 1.0
    return sel


def _rows(x) -> int:
    if isinstance(x, nc.Expr):
        raise TypeError("row count of an expression is unknown; pass n explicitly")
    return np.shape(x)[0]


def cross_entropy_loss(logits, labels, num_rows: int | None = None, num_classes: int | None = None):
    """Mean of -log softmax(logits)[label] over the batch."""
    numeric = not _is_expr(logits)
    if numeric:
        arr = np.asarray(logits, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"logits must be 2-D, got shape {arr.shape}")
        num_rows, num_classes = arr.shape
    elif num_rows is None or num_classes is None:
        raise TypeError("num_rows and num_classes are required for expression logits")
    onehot = _one_hot(labels, num_rows, num_classes)
    z = nc._lift(logits)
    expr = nc.mean(nc.logsumexp(z, axis=1) - nc.sum_(z * nc.const(onehot), axis=1))
    return _finish(expr, numeric)


def triplet_loss(embeddings, triplets: TripletIndices, margin: float = DEFAULT_MARGIN,
                 num_rows: int | None = None):
    """Mean hinge max(0, |a-p|^2 - |a-n|^2 + margin) over the triplets."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    if len(triplets) == 0:
        raise ValueError("empty triplet set")
    numeric = not _is_expr(embeddings)
    n = _rows(embeddings) if numeric else num_rows
    if n is None:
        raise TypeError("num_rows is required for expression embeddings")
    e = nc._lift(embeddings)
    a = nc.const(_selector(triplets.anchor, n)) @ e
    p = nc.const(_selector(triplets.positive, n)) @ e
    neg = nc.const(_selector(triplets.negative, n)) @ e
    gap = nc.sqnorm(a - p, axis=1) - nc.sqnorm(a - neg, axis=1) + margin
    return _finish(nc.mean(nc.max0(gap)), numeric)


def nt_xent_stacked(z, n: int, temperature: float = DEFAULT_TEMPERATURE):
    """NT-Xent over a stacked (2n, d) pool where rows i and n+i are a positive pair."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if n < 2:
        raise ValueError("NT-Xent needs at least 2 pairs")
    numeric = not _is_expr(z)
    if numeric and np.any(np.linalg.norm(np.asarray(z, dtype=np.float64), axis=1) == 0):
        raise NumericError("zero-norm embedding: L2 normalization undefined")
    zn = nc.normalize_rows(z)
    sim = (zn @ zn.T) * (1.0 / temperature)
    pair = np.zeros((2 * n, 2 * n))
    idx = np.arange(n)
    pair[idx, n + idx] = 1.0
    pair[n + idx, idx] = 1.0
    masked = sim + nc.const(np.eye(2 * n) * _SELF_MASK)
    positive = nc.sum_(sim * nc.const(pair), axis=1)
    return _finish(nc.mean(nc.logsumexp(masked, axis=1) - positive), numeric)


def nt_xent_loss(anchor_embeds, view_embeds, temperature: float = DEFAULT_TEMPERATURE,
                 num_rows: int | None = None):
    """SimCLR NT-Xent between unaugmented anchors and their augmented views."""
    numeric = not _is_expr(anchor_embeds, view_embeds)
    if numeric:
        a = np.asarray(anchor_embeds, dtype=np.float64)
        v = np.asarray(view_embeds, dtype=np.float64)
        if a.shape != v.shape or a.ndim != 2:
            raise ShapeError(f"anchor/view shapes differ: {a.shape} vs {v.shape}")
        return nt_xent_stacked(np.vstack([a, v]), a.shape[0], temperature)
    n = num_rows
    if n is None:
        raise TypeError("num_rows is required for expression embeddings")
    top = np.vstack([np.eye(n), np.zeros((n, n))])
    bottom = np.vstack([np.zeros((n, n)), np.eye(n)])
    z = nc.const(top) @ nc._lift(anchor_embeds) + nc.const(bottom) @ nc._lift(view_embeds)
    return nt_xent_stacked(z, n, temperature)


def triplet_entropy_loss(logits, embeddings, labels, triplets: TripletIndices,
                         margin: float = DEFAULT_MARGIN, num_rows: int | None = None,
                         num_classes: int | None = None):
    """Cross-entropy on the head plus triplet loss on the embedding, weighted 1:1."""
    ce = cross_entropy_loss(logits, labels, num_rows, num_classes)
    tl = triplet_loss(embeddings, triplets, margin, num_rows)
    return ce + tl


def mine_triplets_supervised(labels, rng: np.random.Generator) -> TripletIndices:
    """One random (positive, negative) pair for every anchor that has both."""
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("no negatives available: batch holds a single class")
    anchors, positives, negatives = [], [], []
    for i, y in enumerate(labels):
        same = np.flatnonzero(labels == y)
        same = same[same != i]
        if same.size == 0:
            continue
        other = np.flatnonzero(labels != y)
        anchors.append(i)
        positives.append(same[rng.integers(same.size)])
        negatives.append(other[rng.integers(other.size)])
    if not anchors:
        raise ValueError("no positives available: every class has a single sample")
    return TripletIndices(anchors, positives, negatives)


def self_supervised_triplets(n: int, rng: np.random.Generator) -> TripletIndices:
    """Triplets over a stacked [anchors; views] batch: own view positive, another view negative."""
    if n < 2:
        raise ValueError("need at least 2 samples to draw a negative")
    idx = np.arange(n)
    # shift by 1..n-1 so the negative is never the anchor's own sample
    other = (idx + rng.integers(1, n, size=n)) % n
    return TripletIndices(idx, n + idx, n + other)


def make_aug_pairs(inputs, rng: np.random.Generator, strength: float,
                   mask_fraction: float = 0.2) -> AugPairBatch:
    """Views = clip01(inputs + N(0, strength^2)), then a random feature mask zeroes ``mask_fraction``."""
    if strength < 0:
        raise ValueError("strength must be non-negative")
    x = np.asarray(inputs, dtype=np.float64)
    views = x + rng.normal(0.0, 1.0, size=x.shape) * strength
    if mask_fraction > 0:
        views = np.where(rng.random(x.shape) < mask_fraction, 0.0, views)
    return AugPairBatch(x.copy(), np.clip(views, 0.0, 1.0))
