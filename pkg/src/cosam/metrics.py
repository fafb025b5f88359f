"""Retrieval metrics (CMC, mAP) and attention coverage."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class RetrievalResult:
    distance_matrix: np.ndarray  # [Q, G]
    query_labels: np.ndarray
    gallery_labels: np.ndarray

    def __post_init__(self):
        self.distance_matrix = np.asarray(self.distance_matrix, dtype=np.float64)
        self.query_labels = np.asarray(self.query_labels)
        self.gallery_labels = np.asarray(self.gallery_labels)
        q, g = self.distance_matrix.shape
        if q != self.query_labels.size or g != self.gallery_labels.size:
            raise ValueError("label counts do not match the distance matrix")
        if np.any(self.distance_matrix < 0):
            raise ValueError("distances must be non-negative")

    @classmethod
    def from_embeddings(cls, query, gallery, query_labels, gallery_labels) -> "RetrievalResult":
        return cls(l2_distances(query, gallery), query_labels, gallery_labels)

    def ranked_matches(self) -> np.ndarray:
        """Boolean [Q, G]: match flags in rank order (distance, then gallery index)."""
        order = np.argsort(self.distance_matrix, axis=1, kind="stable")
        matches = self.gallery_labels[order] == self.query_labels[:, None]
        missing = ~matches.any(axis=1)
        if missing.any():
            raise ValueError(f"queries {np.flatnonzero(missing).tolist()} have no gallery match")
        return matches


def l2_distances(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


def cmc(result: RetrievalResult, ranks=(1, 5, 20)) -> list[float]:
    """Fraction of queries whose first correct match is within the top k, for each k."""
    matches = result.ranked_matches()
    first = matches.argmax(axis=1) + 1
    return [float(np.mean(first <= k)) for k in ranks]


def average_precision(ranked: np.ndarray) -> float:
    """Mean of precision@rank over the ranks of the relevant items.

    Sums use math.fsum (correctly rounded), so results do not depend on
    summation order.
    """
    hits = np.flatnonzero(ranked) + 1
    return math.fsum(np.arange(1, hits.size + 1) / hits) / hits.size


def mean_ap(result: RetrievalResult) -> float:
    aps = [average_precision(row) for row in result.ranked_matches()]
    return math.fsum(aps) / len(aps)


def downsample_mask(gt, height: int, width: int) -> np.ndarray:
    """Area-average a binary [..., H, W] mask onto a coarser grid and threshold at 0.5."""
    gt = np.asarray(gt, dtype=np.float64)
    h, w = gt.shape[-2:]
    if h % height or w % width:
        raise ValueError(f"cannot area-average {h}x{w} onto {height}x{width}")
    fh, fw = h // height, w // width
    pooled = gt.reshape(gt.shape[:-2] + (height, fh, width, fw)).mean(axis=(-3, -1))
    return (pooled >= 0.5).astype(np.float64)


def attention_coverage(mask, gt) -> float:
    """Mean over frames of sum(mask * gt) / sum(mask), gt brought to mask resolution.

    ``mask`` is [N, 1, h, w] (or [B, N, 1, h, w]); ``gt`` has the same leading
    shape at any resolution that is an integer multiple.  Frames whose object
    vanishes at mask resolution are left out (see :func:`area_fraction`).
    """
    mask = np.asarray(mask, dtype=np.float64)
    gt_small = downsample_mask(gt, *mask.shape[-2:])
    if gt_small.shape != mask.shape:
        raise ValueError(f"mask {mask.shape} and ground truth {gt_small.shape} disagree")
    m = mask.reshape(-1, mask.shape[-2] * mask.shape[-1])
    g = gt_small.reshape(m.shape)
    keep = g.sum(axis=1) > 0
    if not keep.any():
        raise ValueError("ground-truth region is empty at mask resolution in every frame")
    m, g = m[keep], g[keep]
    return float(np.mean((m * g).sum(axis=1) / m.sum(axis=1)))


def area_fraction(gt, height: int, width: int) -> float:
    """Mean per-frame area fraction of the downsampled ground truth, over the
    same frames :func:`attention_coverage` keeps."""
    small = downsample_mask(gt, height, width).reshape(-1, height * width)
    small = small[small.sum(axis=1) > 0]
    if not small.size:
        raise ValueError("ground-truth region is empty at mask resolution in every frame")
    return float(small.mean(axis=1).mean())
